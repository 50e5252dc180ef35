"""Full-catalog leave-one-out ranking and HR@K / NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .autodiff import ContractViolation, no_grad
from .data import DatasetSplit, eval_batches
from .hymoe import usage_entropy

HR_CUTOFFS = (1, 5, 10)
NDCG_CUTOFFS = (5, 10)


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    users: int
    usage_entropy: float | None = None
    expert_usage: list[list[float]] = field(default_factory=list)
    ranks: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self) -> dict[str, float]:
        out = {}
        for k in sorted(self.hr):
            out[f"HR@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            out[f"NDCG@{k}"] = self.ndcg[k]
        if self.usage_entropy is not None:
            out["usage_entropy"] = self.usage_entropy
        return out

    def records(self, step: int, phase: str, epoch: int | None = None) -> list[dict]:
        base = {"step": step, "phase": phase}
        if epoch is not None:
            base["epoch"] = epoch
        return [{**base, "metric": name, "value": value} for name, value in self.as_dict().items()]

    def table(self) -> str:
        rows = [f"{'metric':<14}{'value':>10}", "-" * 24]
        rows += [f"{name:<14}{value:>10.4f}" for name, value in self.as_dict().items()]
        rows.append(f"{'users':<14}{self.users:>10d}")
        return "\n".join(rows)


def rank_target(scores, target: int, exclusions: Iterable[int] = ()) -> int:
    """1-based rank of ``target``; items tied with it are counted as ranked above."""
    scores = np.asarray(scores, dtype=np.float64)
    excl = np.zeros(scores.shape[0], dtype=bool)
    excl[list(exclusions)] = True
    if excl[target]:
        raise ContractViolation(f"rank_target: target {target} is excluded")
    beats = (scores >= scores[target]) & ~excl
    beats[target] = False
    return 1 + int(beats.sum())


def rank_targets(scores: np.ndarray, targets: np.ndarray, excluded: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_target` over rows of ``scores`` (B, N)."""
    rows = np.arange(scores.shape[0])
    if np.any(excluded[rows, targets]):
        raise ContractViolation("rank_targets: a target is excluded")
    tscore = scores[rows, targets][:, None]
    beats = (scores >= tscore) & ~excluded
    beats[rows, targets] = False
    return 1 + beats.sum(axis=1)


def hr_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0 or k < 1:
        raise ContractViolation("hr_at_k: need non-empty ranks and K >= 1")
    return float(np.mean(ranks <= k))


def ndcg_at_k(ranks, k: int) -> float:
    ranks = np.asarray(ranks)
    if ranks.size == 0 or k < 1:
        raise ContractViolation("ndcg_at_k: need non-empty ranks and K >= 1")
    gains = [1.0 / math.log2(r + 1) if r <= k else 0.0 for r in ranks.tolist()]
    # fixed user order keeps the float sum reproducible
    return math.fsum(gains) / len(gains)


def metrics_from_ranks(ranks) -> MetricsReport:
    ranks = np.asarray(ranks)
    return MetricsReport({k: hr_at_k(ranks, k) for k in HR_CUTOFFS},
                         {k: ndcg_at_k(ranks, k) for k in NDCG_CUTOFFS}, int(ranks.size), ranks=ranks)


def evaluate(model, split: DatasetSplit, phase: str, t: int, max_len: int | None = None,
             exclude_train: bool = False, batch_size: int = 256) -> MetricsReport:
    """Rank each user's held-out item against the whole catalog."""
    max_len = max_len or model.cfg.max_len
    was_training = model.training
    model.eval()
    ranks = []
    usage_sum = [np.zeros(model.cfg.n_experts) for _ in model.blocks()]
    usage_tokens = [0 for _ in model.blocks()]
    try:
        with no_grad():
            for batch in eval_batches(split, phase, max_len, batch_size):
                y, stats = model.encoder_forward(batch.items, t)
                scores = model.score_items(y).data
                excluded = np.zeros(scores.shape, dtype=bool)
                excluded[:, 0] = True
                if exclude_train:
                    for r, u in enumerate(batch.users.tolist()):
                        seen = split.train[u] + ([split.valid[u]] if phase == "test" else [])
                        excluded[r, seen] = True
                        excluded[r, batch.targets[r]] = False
                ranks.append(rank_targets(scores, batch.targets, excluded))
                for i, s in enumerate(stats):
                    if s.mean is not None:
                        usage_sum[i] += s.mean.data * s.token_count
                        usage_tokens[i] += s.token_count
    finally:
        model.training = was_training
    report = metrics_from_ranks(np.concatenate(ranks))
    if not model.cfg.uniform_pffn and any(usage_tokens):
        usage = [(u / n).tolist() for u, n in zip(usage_sum, usage_tokens) if n]
        report.expert_usage = usage
        report.usage_entropy = float(np.mean([usage_entropy(np.array(u)) for u in usage]))
    return report
