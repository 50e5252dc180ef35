"""Causal self-attention encoder whose feed-forward layers are HyMoE blocks."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation, Tensor
from .hymoe import GateStats, HyMoEBlock, load_balance_loss
from .layers import LayerNorm, Linear, Module

MASK_VALUE = -1e9  # finite stand-in for -inf in masked logits


@dataclass
class ModelConfig:
    n_items: int = 0              # catalog size; vocabulary is n_items + 1 with 0 = padding
    d_model: int = 64
    max_len: int = 200
    n_layers: int = 2
    n_heads: int = 2
    n_experts: int = 4
    top_k: int = 2
    d_ff: int = 0                 # 0 -> 4 * d_model
    router_hidden: int = 0        # 0 -> d_model // 2
    warmup_steps: int = 500
    lb_weight: float = 0.02
    dropout: float = 0.2
    uniform_pffn: bool = False
    fusion: str = "adaptive"      # adaptive | frozen (alpha_param not trained) | off (alpha = 0)
    all_positions: bool = False

    def __post_init__(self) -> None:
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.router_hidden == 0:
            self.router_hidden = max(1, self.d_model // 2)
        self.validate()

    @property
    def vocab_size(self) -> int:
        return self.n_items + 1

    def validate(self) -> None:
        problems = []
        if self.n_items < 1:
            problems.append(f"n_items must be >= 1 (got {self.n_items})")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            problems.append(f"top_k={self.top_k} outside [1, n_experts={self.n_experts}]")
        if self.lb_weight < 0:
            problems.append(f"lb_weight must be >= 0 (got {self.lb_weight})")
        if self.warmup_steps < 1:
            problems.append(f"warmup_steps must be >= 1 (got {self.warmup_steps})")
        if self.n_layers < 0 or self.max_len < 1:
            problems.append("n_layers must be >= 0 and max_len >= 1")
        if self.fusion not in ("adaptive", "frozen", "off"):
            problems.append(f"fusion must be adaptive, frozen or off (got {self.fusion!r})")
        if not 0.0 <= self.dropout < 1.0:
            problems.append(f"dropout must lie in [0, 1) (got {self.dropout})")
        if problems:
            raise ContractViolation("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LossBreakdown:
    ce: Tensor
    lb: Tensor | float
    total: Tensor
    stats: list[GateStats] = field(default_factory=list)

    def as_floats(self) -> dict[str, float]:
        lb = self.lb.item() if isinstance(self.lb, Tensor) else float(self.lb)
        return {"loss_ce": self.ce.item(), "loss_lb": lb, "loss_total": self.total.item()}


class CausalSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.norm = LayerNorm(d_model)
        self.n_heads = n_heads

    def attention_mask(self, mask: np.ndarray) -> np.ndarray:
        """Boolean (B, 1, L, L): True where query i may NOT look at key j."""
        length = mask.shape[-1]
        causal = np.tril(np.ones((length, length), dtype=bool))
        allowed = causal[None] & mask[:, None, :]
        return ~allowed[:, None]

    def __call__(self, h: Tensor, mask: np.ndarray, dropout=None) -> Tensor:
        return causal_self_attention(h, mask, self, dropout)


def causal_self_attention(h: Tensor, mask: np.ndarray, attn: CausalSelfAttention,
                          dropout=None) -> Tensor:
    """Multi-head attention over the causal, non-padding prefix, then residual + LayerNorm."""
    if h.ndim != 3 or mask.shape != h.shape[:2]:
        raise ContractViolation(f"attention: hidden {h.shape} vs mask {mask.shape}")
    b, length, d = h.shape
    heads = attn.n_heads
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        return x.reshape(b, length, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(attn.q(h)), split(attn.k(h)), split(attn.v(h))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = scores.masked_fill(attn.attention_mask(mask), MASK_VALUE).softmax()
    ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    out = attn.out(ctx)
    if dropout is not None:
        out = dropout(out)
    return attn.norm(h + out)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads, rng)
        self.ffn = HyMoEBlock(cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k,
                              cfg.router_hidden, cfg.warmup_steps, rng,
                              uniform=cfg.uniform_pffn, fusion=cfg.fusion != "off")
        self.norm = LayerNorm(cfg.d_model)


class SeqRecModel(Module):
    """Next-item recommender: embeddings -> n_layers x (attention, HyMoE) -> dot-product scores.

    Scoring reuses the input item table. Positions are counted back from the
    most recent item, so left padding never shifts a real token's position.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.d_model
        table = rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.vocab_size, d))
        table[0] = 0.0
        self.item_emb = Tensor(table, requires_grad=True, name="item_emb")
        self.pos_emb = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(cfg.max_len, d)),
                              requires_grad=True, name="pos_emb")
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]
        self.training = False
        self.dropout_rng = np.random.default_rng([seed, 1])

    # -- modes -----------------------------------------------------------
    def train(self) -> "SeqRecModel":
        self.training = True
        return self

    def eval(self) -> "SeqRecModel":
        self.training = False
        return self

    def blocks(self) -> list[HyMoEBlock]:
        return [layer.ffn for layer in self.layers]

    def _dropout(self, x: Tensor) -> Tensor:
        p = self.cfg.dropout
        if not self.training or p <= 0.0:
            return x
        keep = self.dropout_rng.random(x.shape) >= p
        return x * (keep / (1.0 - p))

    # -- forward pieces --------------------------------------------------
    def embed_sequence(self, items) -> Tensor:
        ids = np.asarray(items, dtype=np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None]
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ContractViolation(f"embed: item id outside [0, {self.cfg.vocab_size})")
        length = ids.shape[1]
        if length > self.cfg.max_len:
            raise ContractViolation(f"embed: length {length} exceeds max_len {self.cfg.max_len}")
        positions = np.arange(length - 1, -1, -1)
        h = self.item_emb[ids] + self.pos_emb[positions]
        return h[0] if squeeze else h

    def encode(self, items, t: int) -> tuple[Tensor, list[GateStats]]:
        """Hidden states (B, L, D) for left-padded ids (B, L), plus per-layer gate stats."""
        ids = np.asarray(items, dtype=np.int64)
        mask = ids != 0
        h = self._dropout(self.embed_sequence(ids))
        stats = []
        for layer in self.layers:
            h = layer.attn(h, mask, self._dropout if self.training else None)
            f, s = layer.ffn(h, mask, t)
            h = layer.norm(h + self._dropout(f))
            stats.append(s)
        return h, stats

    def encoder_forward(self, items, t: int) -> tuple[Tensor, list[GateStats]]:
        """Representation at the last (most recent) position of each sequence."""
        h, stats = self.encode(items, t)
        return h[:, -1, :], stats

    def score_items(self, y: Tensor) -> Tensor:
        return score_items(y, self.item_emb)

    def loss(self, batch, t: int) -> LossBreakdown:
        if self.cfg.all_positions and batch.position_targets is not None:
            h, stats = self.encode(batch.items, t)
            tgt = np.asarray(batch.position_targets)
            rows = np.flatnonzero(tgt.reshape(-1) != 0)
            y = h.reshape(-1, self.cfg.d_model)[rows]
            ce = cross_entropy(self.score_items(y), tgt.reshape(-1)[rows])
        else:
            y, stats = self.encoder_forward(batch.items, t)
            ce = cross_entropy(self.score_items(y), batch.targets)
        return total_loss(ce, stats, 0.0 if self.cfg.uniform_pffn else self.cfg.lb_weight)


def score_items(y: Tensor, table: Tensor) -> Tensor:
    """Dot product of ``y`` with every item row; the padding column is masked out."""
    logits = y @ table.transpose()
    pad = np.zeros(table.shape[0], dtype=bool)
    pad[0] = True
    return logits.masked_fill(pad, MASK_VALUE)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax probability of ``targets`` (one per row)."""
    tgt = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any(tgt <= 0) or np.any(tgt >= logits.shape[-1]):
        raise ContractViolation("cross_entropy: target must be a non-padding item id")
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if logits.shape[0] != tgt.shape[0]:
        raise ContractViolation(f"cross_entropy: {logits.shape[0]} rows vs {tgt.shape[0]} targets")
    picked = logits.log_softmax()[np.arange(tgt.shape[0]), tgt]
    return -picked.mean()


def total_loss(ce: Tensor, stats: list[GateStats], lb_weight: float) -> LossBreakdown:
    if lb_weight < 0:
        raise ContractViolation("lb_weight must be non-negative")
    terms = [load_balance_loss(s) for s in stats if s.mean is not None]
    lb: Tensor | float = 0.0
    for term in terms:
        lb = term if isinstance(lb, float) else lb + term
    total = ce + lb_weight * lb if terms else ce + 0.0
    return LossBreakdown(ce, lb, total, list(stats))
