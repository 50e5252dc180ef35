"""Command-line entry point: prepare-data, train, eval, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .autodiff import ContractViolation, NumericError
from .config import ConfigError, load_config, parse_assignments
from .data import DataError, build_sequences, load_dataset, parse_interactions, save_dataset, split_leave_one_out
from .evaluation import evaluate
from .gradcheck import grad_check, small_config
from .experiments import run_training
from .training import CheckpointError, load_checkpoint, restore
from .backbone import ModelConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECK_FAILED = 5

OUTPUT_ROOT_ENV = "HYMOEREC_OUTPUT_ROOT"

log = logging.getLogger("hymoerec")


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare_data(args) -> int:
    interactions = parse_interactions(args.input, args.format, args.max_malformed)
    split = split_leave_one_out(build_sequences(interactions, args.min_user, args.min_item))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"source": str(args.input), "format": args.format,
            "min_user": args.min_user, "min_item": args.min_item}
    save_dataset(out, split, meta)
    summary = split.summary()
    Path(str(out) + ".summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"users {summary['users']}  items {summary['items']}  "
          f"interactions {summary['interactions']}  density {summary['density']:.5f}")
    return EXIT_OK


def _overrides(args) -> dict:
    values = parse_assignments(args.set or [])
    if getattr(args, "uniform_pffn", False):
        values["uniform_pffn"] = True
    if getattr(args, "lb_weight", None) is not None:
        values["lb_weight"] = args.lb_weight
    if getattr(args, "freeze_alpha", False):
        values["fusion"] = "frozen"
    for key in ("dataset", "epochs", "seed", "output_dir"):
        val = getattr(args, key, None)
        if val is not None:
            values[key] = val
    return values


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if not cfg.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    split = load_dataset(cfg.dataset)
    run_dir = Path(cfg.output_dir) if cfg.output_dir else output_root() / "run"
    run_dir.mkdir(parents=True, exist_ok=True)
    model_cfg = cfg.model_config(split.n_items)
    (run_dir / "config.txt").write_text(cfg.dumps())
    mode = "uniform-pffn" if cfg.uniform_pffn else "hymoerec"
    (run_dir / "run.json").write_text(json.dumps(
        {"mode": mode, "baseline": cfg.uniform_pffn, "n_items": split.n_items}, sort_keys=True) + "\n")

    last = run_dir / "last.ckpt"
    resume_state = None
    if args.resume and last.exists():
        resume_state = restore(load_checkpoint(last), model_cfg)
        log.info("resuming from %s at step %d", last, resume_state[2].step)
    elif (run_dir / "metrics.jsonl").exists():
        (run_dir / "metrics.jsonl").unlink()
    outcome = run_training(cfg, split, run_dir, resume_state)
    if outcome.test is None:
        print(f"stopped at step {outcome.fit.state.step} (max_steps); resume with --resume")
        return EXIT_OK
    print(f"[{mode}] test metrics after {outcome.fit.state.step} steps")
    print(outcome.test.table())
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    split = load_dataset(args.dataset)
    if args.config:
        run = load_config(args.config)
        model_cfg = run.model_config(split.n_items)
    else:
        model_cfg = ModelConfig(**ckpt.config)
    if model_cfg.n_items != split.n_items:
        raise ConfigError(f"checkpoint covers {model_cfg.n_items} items, dataset has {split.n_items}")
    try:
        model, _, state = restore(ckpt, model_cfg)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    report = evaluate(model, split, args.phase, state.step, exclude_train=args.exclude_train)
    print(report.table())
    records = report.records(state.step, args.phase)
    if args.records:
        with open(args.records, "a") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    overrides = parse_assignments(args.set or [])
    allowed = {"d_model", "n_layers", "n_heads", "n_experts", "top_k", "d_ff", "router_hidden",
               "warmup_steps", "lb_weight", "max_len", "uniform_pffn"}
    unknown = set(overrides) - allowed
    if unknown:
        raise ConfigError(f"grad-check does not take {sorted(unknown)}")
    cfg = small_config(**overrides)
    report = grad_check(cfg, tolerance=args.tolerance, eps=args.eps, seed=args.seed)
    for line in report.lines():
        print(line)
    print("PASS" if report.passed else "FAIL", f"(tolerance {args.tolerance:g})")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hymoerec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="parse, filter and split an interaction log")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--format", choices=["movielens-dat", "csv"], default="movielens-dat")
    p.add_argument("--min-user", type=int, default=5)
    p.add_argument("--min-item", type=int, default=5)
    p.add_argument("--max-malformed", type=int, default=0)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model with early stopping")
    p.add_argument("--config")
    p.add_argument("--dataset")
    p.add_argument("--output-dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--uniform-pffn", action="store_true", help="ablation: plain shared FFN, no experts")
    p.add_argument("--lb-weight", type=float)
    p.add_argument("--freeze-alpha", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from <output-dir>/last.ckpt")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--phase", choices=["valid", "test"], default="test")
    p.add_argument("--config")
    p.add_argument("--exclude-train", action="store_true")
    p.add_argument("--records", help="append line-delimited metric records here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
