"""Train-then-test runs and the HyMoE vs uniform-FFN comparison."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import SeqRecModel
from .config import RunConfig
from .data import DatasetSplit, build_sequences, parse_interactions, split_leave_one_out
from .evaluation import MetricsReport, evaluate
from .training import FitResult, fit, load_checkpoint, restore

log = logging.getLogger(__name__)

ML1M_ENV = "HYMOEREC_ML1M"

# Budget for the 2,000-user comparison on a CPU-only numpy engine.
ABLATION_OVERRIDES = dict(d_model=32, max_len=50, n_layers=2, n_heads=2, dropout=0.2,
                          all_positions=True, lr=2e-3, batch_size=128, epochs=40,
                          eval_every=5, patience=3, warmup_steps=100)


@dataclass
class RunOutcome:
    fit: FitResult
    test: MetricsReport | None  # None when max_steps interrupted training


def run_training(cfg: RunConfig, split: DatasetSplit, run_dir: str | Path, resume_state=None) -> RunOutcome:
    """Fit with early stopping, then score the best checkpoint on the test targets."""
    run_dir = Path(run_dir)
    model_cfg = cfg.model_config(split.n_items)
    if resume_state is not None:
        model, opt, state = resume_state
    else:
        model, opt, state = SeqRecModel(model_cfg, seed=cfg.model_seed), None, None
    train_cfg = cfg.train_config()
    result = fit(model, split, train_cfg, run_dir, opt, state)
    interrupted = bool(train_cfg.max_steps) and result.state.step >= train_cfg.max_steps
    if interrupted and not result.stopped_early and result.state.epoch < train_cfg.epochs:
        return RunOutcome(result, None)
    best = run_dir / "best.ckpt"
    final = restore(load_checkpoint(best), model_cfg)[0] if best.exists() else model
    report = evaluate(final, split, "test", result.state.step, exclude_train=cfg.exclude_train)
    with open(run_dir / "metrics.jsonl", "a") as fh:
        for rec in report.records(result.state.step, "test"):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return RunOutcome(result, report)


def ml1m_subset(path: str | Path, n_users: int = 2000, min_count: int = 5) -> DatasetSplit:
    """The first ``n_users`` users of a ``ratings.dat`` file (file order), 5-core filtered."""
    rows = parse_interactions(path, "movielens-dat")
    keep: list[str] = []
    seen: set[str] = set()
    for r in rows:
        if r.user not in seen:
            seen.add(r.user)
            keep.append(r.user)
            if len(keep) == n_users:
                break
    chosen = set(keep)
    return split_leave_one_out(build_sequences([r for r in rows if r.user in chosen], min_count, min_count))


@dataclass
class AblationResult:
    seeds: list[int]
    hymoe_hr10: list[float]
    uniform_hr10: list[float]
    margin: float

    @property
    def hymoe_mean(self) -> float:
        return float(np.mean(self.hymoe_hr10))

    @property
    def uniform_mean(self) -> float:
        return float(np.mean(self.uniform_hr10))

    @property
    def passed(self) -> bool:
        return self.hymoe_mean >= self.uniform_mean - self.margin


def directional_ablation(split: DatasetSplit, out_dir: str | Path, seeds=(0, 1, 2),
                         margin: float = 0.002, **overrides) -> AblationResult:
    """Train both variants per seed (shared init and shuffling) and compare mean test HR@10."""
    out_dir = Path(out_dir)
    base = dataclasses.replace(RunConfig(), **{**ABLATION_OVERRIDES, **overrides})
    scores: dict[bool, list[float]] = {False: [], True: []}
    for seed in seeds:
        for uniform in (False, True):
            cfg = dataclasses.replace(base, seed=seed, model_seed=seed, uniform_pffn=uniform)
            name = f"{'uniform' if uniform else 'hymoe'}-seed{seed}"
            outcome = run_training(cfg, split, out_dir / name)
            scores[uniform].append(outcome.test.hr[10])
            log.info("%s: test HR@10 %.4f", name, outcome.test.hr[10])
    return AblationResult(list(seeds), scores[False], scores[True], margin)
