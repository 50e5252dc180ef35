"""Finite-difference verification of the full model's gradients, per parameter group."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, finite_difference_grad, no_grad
from .backbone import ModelConfig, SeqRecModel
from .data import Batch

GROUPS = ("embedding", "attention", "norm", "dense_expert", "experts", "router", "alpha")


def group_of(name: str) -> str:
    if name.endswith("alpha_param"):
        return "alpha"
    if ".router." in name:
        return "router"
    if ".experts.shared." in name:
        return "dense_expert"
    if ".experts.experts." in name:
        return "experts"
    if "norm." in name:
        return "norm"
    if ".attn." in name:
        return "attention"
    return "embedding"


@dataclass
class GroupResult:
    group: str
    n_params: int
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    groups: list[GroupResult]
    resamples: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def lines(self) -> list[str]:
        out = [f"{g.group:<14} params={g.n_params:<6d} max_rel_err={g.max_rel_error:.3e} "
               f"{'PASS' if g.passed else 'FAIL'}" for g in self.groups]
        out += self.notes
        return out


def small_config(**overrides) -> ModelConfig:
    base = dict(n_items=12, d_model=8, max_len=6, n_layers=1, n_heads=2, n_experts=4, top_k=2,
                d_ff=16, warmup_steps=10, lb_weight=0.02, dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, batch_size: int = 3) -> Batch:
    items = rng.integers(1, cfg.n_items + 1, size=(batch_size, cfg.max_len))
    lengths = rng.integers(2, cfg.max_len + 1, size=batch_size)
    for r, n in enumerate(lengths):
        items[r, : cfg.max_len - n] = 0
    targets = rng.integers(1, cfg.n_items + 1, size=batch_size)
    return Batch(items, targets, lengths, np.arange(batch_size))


def routing_margin(model: SeqRecModel) -> float:
    """Smallest distance from a routing decision or router-ReLU kink at the last forward."""
    margin = np.inf
    for block in model.blocks():
        gate = block.last_gate
        if gate is None:
            continue
        logits = np.sort(gate.logits.data, axis=-1)[:, ::-1]
        k = block.top_k
        if k < logits.shape[1]:
            margin = min(margin, float(np.min(logits[:, k - 1] - logits[:, k])))
        if block.router.last_pre is not None:
            margin = min(margin, float(np.min(np.abs(block.router.last_pre))))
    return margin


def grad_check(cfg: ModelConfig | None = None, tolerance: float = 1e-4, eps: float = 1e-5,
               seed: int = 0, t: int | None = None, min_margin: float = 1e-3,
               max_resamples: int = 20) -> GradCheckReport:
    """Compare autodiff against central differences for every parameter of a small model.

    Points whose routing margin is below ``min_margin`` are resampled.
    """
    cfg = cfg or small_config()
    t = cfg.warmup_steps // 2 if t is None else t
    rng = np.random.default_rng(seed)
    notes: list[str] = []
    resamples = 0
    while True:
        model = SeqRecModel(cfg, seed=int(rng.integers(2**31)))
        for block in model.blocks():
            block.aef.alpha_param.data[...] = rng.normal()
        batch = random_batch(cfg, rng)
        model.eval()
        with no_grad():
            model.loss(batch, t)
        margin = routing_margin(model)
        if margin > min_margin:
            break
        resamples += 1
        notes.append(f"resampled: routing margin {margin:.2e} <= {min_margin:g}")
        if resamples >= max_resamples:
            notes.append("gave up looking for a routing-stable point")
            break

    model.zero_grad()
    backward(model.loss(batch, t).total)
    named = dict(model.named_parameters())
    analytic = {n: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for n, p in named.items()}

    errors: dict[str, list[float]] = {}
    counts: dict[str, int] = {}
    for name, p in named.items():
        numeric = finite_difference_grad(lambda _: model.loss(batch, t).total, p, eps).data
        rel = np.abs(analytic[name] - numeric) / np.maximum(1.0, np.abs(numeric))
        g = group_of(name)
        errors.setdefault(g, []).append(float(rel.max()))
        counts[g] = counts.get(g, 0) + p.data.size
    groups = []
    for g in GROUPS:
        if g in errors:
            worst = max(errors[g])
            groups.append(GroupResult(g, counts[g], worst, worst < tolerance))
    return GradCheckReport(tolerance, groups, resamples, notes)
