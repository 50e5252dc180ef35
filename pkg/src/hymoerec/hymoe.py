"""Hybrid dense/sparse expert block with adaptive fusion.

Every token passes through a shared feed-forward network. In parallel a
small router scores ``E`` specialised experts; the top ``K`` logits are
softmax-normalised and only those experts run. The two branches are merged
as ``y_dense + sigmoid(alpha_param) * w(t) * y_moe`` where ``w`` ramps
linearly from 0 to 1 over the warm-up window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation, Tensor, scatter_rows, topk
from .layers import FeedForward, Linear, Module


class Router(Module):
    """Two linear maps with a ReLU between them: D -> H_r -> E logits."""

    def __init__(self, d_model: int, hidden: int, n_experts: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, n_experts, rng)
        self.last_pre: np.ndarray | None = None  # hidden pre-activation of the last call

    @property
    def n_experts(self) -> int:
        return self.fc2.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return route(x, self)


class ExpertBank(Module):
    """One shared network plus ``n_experts`` specialised ones, all the same shape."""

    def __init__(self, d_model: int, d_ff: int, n_experts: int, rng: np.random.Generator):
        self.shared = FeedForward(d_model, d_ff, rng)
        self.experts = [FeedForward(d_model, d_ff, rng) for _ in range(n_experts)]

    def __len__(self) -> int:
        return len(self.experts)

    def reset_counters(self) -> None:
        self.shared.calls = 0
        for f in self.experts:
            f.calls = 0


class AEFState(Module):
    """Learnable fusion logit and the warm-up window it is scaled by."""

    def __init__(self, warmup_steps: int, init: float = 0.0, enabled: bool = True):
        if warmup_steps < 1:
            raise ContractViolation(f"T_warmup must be >= 1, got {warmup_steps}")
        self.alpha_param = Tensor(np.array(init), requires_grad=True, name="alpha_param")
        self.warmup_steps = warmup_steps
        self.enabled = enabled  # False pins the effective alpha to 0

    def schedule(self, t: int) -> float:
        return warmup_factor(t, self.warmup_steps) if self.enabled else 0.0

    def effective_alpha(self, t: int) -> float:
        a = float(self.alpha_param.data)
        return float(1.0 / (1.0 + np.exp(-a))) * self.schedule(t)


@dataclass
class GateDecision:
    """Routing outcome for a block of tokens (leading axis = token)."""

    logits: Tensor          # (..., E)
    indices: np.ndarray     # (..., K), ascending per token
    weights: Tensor         # (..., K) softmax over the retained logits
    full: Tensor            # (..., E) weights scattered back, zeros off-support


@dataclass
class GateStats:
    """Mean full gate vector over the non-padding tokens that were routed."""

    mean: Tensor | None
    token_count: int

    @property
    def usage(self) -> np.ndarray:
        return self.mean.data.copy()


def route(x: Tensor, router: Router) -> Tensor:
    if x.shape[-1] != router.fc1.d_in:
        raise ContractViolation(f"route: token width {x.shape[-1]} != router input {router.fc1.d_in}")
    pre = router.fc1(x)
    router.last_pre = pre.data
    return router.fc2(pre.relu())


def topk_gate(logits: Tensor, k: int) -> GateDecision:
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ContractViolation(f"topk_gate: K={k} outside [1, {n}]")
    kept, idx = topk(logits, k)
    weights = kept.softmax()
    onehot = np.zeros(idx.shape + (n,))
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    full = (weights.reshape(weights.shape + (1,)) * onehot).sum(axis=-2)
    return GateDecision(logits, idx, weights, full)


def moe_forward(x: Tensor, gate: GateDecision, experts: ExpertBank) -> Tensor:
    """Weighted sum of the selected experts' outputs for tokens ``x`` of shape (N, D).

    Each expert runs once on exactly the tokens that selected it.
    """
    idx = gate.indices
    if x.ndim == 1:
        out = moe_forward(x.reshape(1, -1), GateDecision(
            gate.logits, idx.reshape(1, -1), gate.weights.reshape(1, -1), gate.full), experts)
        return out.reshape(-1)
    n_tokens = x.shape[0]
    if idx.shape[0] != n_tokens:
        raise ContractViolation(f"moe_forward: gate covers {idx.shape[0]} tokens, input has {n_tokens}")
    if idx.size and (idx.min() < 0 or idx.max() >= len(experts)):
        raise ContractViolation(f"moe_forward: expert index outside [0, {len(experts)})")
    y = None
    for e, expert in enumerate(experts.experts):
        rows, slots = np.nonzero(idx == e)
        if rows.size == 0:
            continue
        contrib = expert(x[rows]) * gate.weights[rows, slots].reshape(-1, 1)
        part = scatter_rows(contrib, rows, n_tokens)
        y = part if y is None else y + part
    if y is None:
        y = Tensor(np.zeros(x.shape))
    return y


def dense_forward(x: Tensor, experts: ExpertBank) -> Tensor:
    if x.shape[-1] != experts.shared.fc1.d_in:
        raise ContractViolation(f"dense_forward: width {x.shape[-1]} != {experts.shared.fc1.d_in}")
    return experts.shared(x)


def warmup_factor(t: int, warmup_steps: int) -> float:
    if warmup_steps < 1:
        raise ContractViolation(f"T_warmup must be >= 1, got {warmup_steps}")
    if t < 0:
        raise ContractViolation(f"step must be >= 0, got {t}")
    return min(1.0, t / warmup_steps)


def aef_fuse(y_dense: Tensor, y_moe: Tensor, aef: AEFState, t: int) -> Tensor:
    if y_dense.shape != y_moe.shape:
        raise ContractViolation(f"aef_fuse: shapes {y_dense.shape} and {y_moe.shape} differ")
    w = aef.schedule(t)
    return y_dense + aef.alpha_param.sigmoid() * w * y_moe


class HyMoEBlock(Module):
    """Drop-in replacement for a position-wise feed-forward layer.

    With ``uniform=True`` the sparse branch is skipped entirely and the block
    is a plain shared FFN (the ablation baseline); no gate statistics are
    produced in that mode.
    """

    def __init__(self, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 router_hidden: int, warmup_steps: int, rng: np.random.Generator,
                 uniform: bool = False, fusion: bool = True):
        if not 1 <= top_k <= n_experts:
            raise ContractViolation(f"K={top_k} outside [1, E={n_experts}]")
        self.experts = ExpertBank(d_model, d_ff, n_experts, rng)
        self.router = Router(d_model, router_hidden, n_experts, rng)
        self.aef = AEFState(warmup_steps, enabled=fusion)
        self.top_k = top_k
        self.uniform = uniform
        self.last_gate: GateDecision | None = None

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def __call__(self, h: Tensor, mask: np.ndarray | None, t: int) -> tuple[Tensor, GateStats]:
        return hymoe_block_forward(h, self, t, mask)


def hymoe_block_forward(h: Tensor, block: HyMoEBlock, t: int,
                        mask: np.ndarray | None = None) -> tuple[Tensor, GateStats]:
    """Apply the block to ``h`` of shape (..., L, D); ``mask`` is True at real tokens."""
    d = h.shape[-1]
    lead = h.shape[:-1]
    flat = h.reshape(-1, d)
    n_tokens = flat.shape[0]
    y_dense = dense_forward(flat, block.experts)
    if block.uniform:
        return y_dense.reshape(lead + (d,)), GateStats(None, 0)
    if mask is None:
        rows = np.arange(n_tokens)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != lead:
            raise ContractViolation(f"hymoe block: mask {mask.shape} vs tokens {lead}")
        rows = np.flatnonzero(mask.reshape(-1))
    if rows.size == 0:
        block.last_gate = None
        return y_dense.reshape(lead + (d,)), GateStats(None, 0)
    x = flat[rows]
    gate = topk_gate(route(x, block.router), block.top_k)
    block.last_gate = gate
    y_moe = scatter_rows(moe_forward(x, gate, block.experts), rows, n_tokens)
    y = aef_fuse(y_dense, y_moe, block.aef, t)
    return y.reshape(lead + (d,)), GateStats(gate.full.mean(axis=0), int(rows.size))


def load_balance_loss(stats: GateStats) -> Tensor:
    """Sum of g log g over mean expert usage, with 0 log 0 taken as 0."""
    if stats.mean is None or stats.token_count < 1:
        raise ContractViolation("load_balance_loss: no routed tokens")
    g = stats.mean
    zero = g.data <= 0.0
    return (g * g.masked_fill(zero, 1.0).log()).sum()


def usage_entropy(usage: np.ndarray) -> float:
    p = np.asarray(usage, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
