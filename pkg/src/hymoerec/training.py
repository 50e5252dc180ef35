"""Adam, the training loop, early stopping and the checkpoint container."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ContractViolation, NumericError, backward
from .backbone import ModelConfig, SeqRecModel
from .data import DatasetSplit, batch_iter
from .evaluation import evaluate
from .hymoe import usage_entropy, warmup_factor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HYMOECKPT\n"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0        # 0 disables clipping
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0
    patience: int = 10
    eval_every: int = 1
    max_steps: int = 0            # 0 = no limit; otherwise stop (and checkpoint) at this step
    exclude_train: bool = False


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainState:
    step: int = 0                 # completed optimizer steps; drives the warm-up
    epoch: int = 0                # epoch in progress (or next to start)
    batch_in_epoch: int = 0       # batches of ``epoch`` already consumed
    best_metric: float = -1.0
    best_epoch: int = -1
    bad_epochs: int = 0
    rng_state: dict | None = None  # dropout generator


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    train_state: TrainState
    config: dict
    version: int = CHECKPOINT_VERSION


@dataclass
class EpochReport:
    epoch: int
    steps: int
    mean_ce: float
    mean_lb: float
    expert_usage: list[list[float]]
    throughput: float             # examples / second
    losses: list[float]
    completed: bool = True


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return total


def adam_step(params: dict, state: OptimizerState, clip_norm: float = 0.0) -> None:
    """One bias-corrected Adam update on every parameter that holds a gradient."""
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ContractViolation(f"adam: grad shape {p.grad.shape} != param {name} {p.data.shape}")
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"adam: non-finite gradient in {name}")
        grads[name] = p.grad
    clip_grad_norm(grads, clip_norm)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ContractViolation(f"adam: moment shape {m.shape} != param {name} {p.data.shape}")
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def trainable(model: SeqRecModel) -> dict:
    params = dict(model.named_parameters())
    if model.cfg.fusion == "frozen":
        params = {n: p for n, p in params.items() if not n.endswith("alpha_param")}
    return params


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def train_epoch(model: SeqRecModel, split: DatasetSplit, opt: OptimizerState,
                state: TrainState, cfg: TrainConfig,
                on_step: Callable[[int, dict], None] | None = None) -> EpochReport:
    """Run (the rest of) epoch ``state.epoch``; each batch is one optimizer step."""
    model.train()
    params = trainable(model)
    ce_sum = lb_sum = 0.0
    usage = [np.zeros(model.cfg.n_experts) for _ in model.blocks()]
    losses: list[float] = []
    seen = 0
    started = time.perf_counter()
    completed = True
    for i, batch in enumerate(batch_iter(split, model.cfg.max_len, cfg.batch_size, cfg.seed, state.epoch)):
        if i < state.batch_in_epoch:
            continue
        if cfg.max_steps and state.step >= cfg.max_steps:
            completed = False
            break
        model.zero_grad()
        parts = model.loss(batch, state.step)
        values = parts.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericError(f"non-finite loss at step {state.step}, batch {i}: {values}")
        backward(parts.total)
        adam_step(params, opt, cfg.clip_norm)
        model.item_emb.data[0] = 0.0
        state.step += 1
        state.batch_in_epoch = i + 1
        ce_sum += values["loss_ce"]
        lb_sum += values["loss_lb"]
        for j, s in enumerate(parts.stats):
            if s.mean is not None:
                usage[j] += s.mean.data
        losses.append(values["loss_total"])
        seen += len(batch.targets)
        if on_step is not None:
            on_step(state.step, values)
    n = max(len(losses), 1)
    elapsed = time.perf_counter() - started
    if completed:
        state.epoch += 1
        state.batch_in_epoch = 0
    state.rng_state = model.dropout_rng.bit_generator.state
    return EpochReport(state.epoch - (1 if completed else 0), len(losses), ce_sum / n, lb_sum / n,
                       [(u / n).tolist() for u in usage], seen / elapsed if elapsed > 0 else 0.0,
                       losses, completed)


@dataclass
class FitResult:
    state: TrainState
    losses: list[float]
    history: list[dict]
    stopped_early: bool = False


def fit(model: SeqRecModel, split: DatasetSplit, cfg: TrainConfig,
        run_dir: str | Path | None = None, opt: OptimizerState | None = None,
        state: TrainState | None = None, evaluate_valid: bool = True) -> FitResult:
    """Train with early stopping on validation NDCG@10.

    With ``run_dir`` set, writes ``metrics.jsonl``, ``last.ckpt`` after every
    epoch (and when ``max_steps`` interrupts) and ``best.ckpt``.
    """
    opt = opt or OptimizerState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    state = state or TrainState()
    if state.rng_state is not None:
        model.dropout_rng.bit_generator.state = state.rng_state
    run_dir = Path(run_dir) if run_dir else None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
    losses: list[float] = []
    history: list[dict] = []
    stopped_early = False
    while state.epoch < cfg.epochs:
        report = train_epoch(model, split, opt, state, cfg)
        losses.extend(report.losses)
        entry = {"epoch": report.epoch, "step": state.step, "loss_ce": report.mean_ce,
                 "loss_lb": report.mean_lb, "throughput": report.throughput,
                 "warmup": warmup_factor(state.step, model.cfg.warmup_steps),
                 "usage_entropy": [usage_entropy(np.array(u)) for u in report.expert_usage]}
        records = [{"step": state.step, "epoch": report.epoch, "phase": "train",
                    "metric": k, "value": entry[k]} for k in ("loss_ce", "loss_lb")]
        if not report.completed:
            history.append(entry)
            _emit(run_dir, records)
            if run_dir:
                save_checkpoint(run_dir / "last.ckpt", snapshot(model, opt, state))
            break
        metrics = None
        if evaluate_valid and cfg.eval_every and (report.epoch + 1) % cfg.eval_every == 0:
            metrics = evaluate(model, split, "valid", state.step, exclude_train=cfg.exclude_train)
            entry["valid"] = metrics.as_dict()
            records += metrics.records(state.step, "valid", report.epoch)
            score = metrics.ndcg[10]
            if score > state.best_metric:
                state.best_metric, state.best_epoch, state.bad_epochs = score, report.epoch, 0
                if run_dir:
                    save_checkpoint(run_dir / "best.ckpt", snapshot(model, opt, state))
            else:
                state.bad_epochs += 1
        history.append(entry)
        _emit(run_dir, records)
        log.info("epoch %d step %d ce %.4f lb %.4f%s", report.epoch, state.step, report.mean_ce,
                 report.mean_lb, f" valid NDCG@10 {metrics.ndcg[10]:.4f}" if metrics else "")
        if run_dir:
            save_checkpoint(run_dir / "last.ckpt", snapshot(model, opt, state))
        if metrics is not None and state.bad_epochs >= cfg.patience:
            stopped_early = True
            break
    return FitResult(state, losses, history, stopped_early)


def _emit(run_dir: Path | None, records: list[dict]) -> None:
    if run_dir is None:
        return
    with open(run_dir / "metrics.jsonl", "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def snapshot(model: SeqRecModel, opt: OptimizerState, state: TrainState) -> Checkpoint:
    state.rng_state = model.dropout_rng.bit_generator.state
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    opt_copy = OptimizerState(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step,
                              {k: v.copy() for k, v in opt.m.items()},
                              {k: v.copy() for k, v in opt.v.items()})
    return Checkpoint(params, opt_copy, TrainState(**asdict(state)), model.cfg.to_dict())


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` as magic line, u64 header length, JSON header, raw float64 blob.

    The header lists every tensor (``param/``, ``adam_m/``, ``adam_v/`` prefixes)
    with its shape and byte offset into the blob; everything else (config,
    counters, generator state) is stored in the header itself.
    """
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.optimizer.m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.optimizer.v.items()]
    index, blobs, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    opt = ckpt.optimizer
    header = {
        "format": "hymoerec-checkpoint",
        "version": ckpt.version,
        "config": ckpt.config,
        "optimizer": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                      "step": opt.step},
        "train_state": asdict(ckpt.train_state),
        "tensors": index,
        "blob_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    if len(raw) < pos + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[pos:pos + hlen])
    except json.JSONDecodeError:
        raise CheckpointError(f"{path}: corrupt header") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    blob = raw[pos + hlen:]
    if len(blob) != header["blob_bytes"]:
        raise CheckpointError(f"{path}: truncated data ({len(blob)} of {header['blob_bytes']} bytes)")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["tensors"]:
        kind, name = entry["name"].split("/", 1)
        chunk = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        groups[kind][name] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    o = header["optimizer"]
    opt = OptimizerState(o["lr"], o["beta1"], o["beta2"], o["eps"], o["step"],
                         groups["adam_m"], groups["adam_v"])
    return Checkpoint(groups["param"], opt, TrainState(**header["train_state"]),
                      header["config"], header["version"])


def restore(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> tuple[SeqRecModel, OptimizerState, TrainState]:
    """Rebuild the model from a checkpoint; ``cfg`` (if given) must match its shapes."""
    model_cfg = cfg or ModelConfig(**ckpt.config)
    model = SeqRecModel(model_cfg)
    named = dict(model.named_parameters())
    missing = set(named) - set(ckpt.params)
    extra = set(ckpt.params) - set(named)
    if missing or extra:
        raise CheckpointError(f"checkpoint/config parameter mismatch: missing {sorted(missing)[:3]}, "
                              f"unexpected {sorted(extra)[:3]}")
    for name, p in named.items():
        if ckpt.params[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: checkpoint {ckpt.params[name].shape}, "
                                  f"config {p.data.shape}")
        p.data[...] = ckpt.params[name]
    if ckpt.train_state.rng_state is not None:
        model.dropout_rng.bit_generator.state = ckpt.train_state.rng_state
    return model, ckpt.optimizer, ckpt.train_state
