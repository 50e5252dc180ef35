"""Sequential recommendation with hybrid dense/sparse mixture-of-experts feed-forward blocks."""

from .autodiff import ContractViolation, NumericError, Tensor, backward, finite_difference_grad
from .backbone import LossBreakdown, ModelConfig, SeqRecModel
from .hymoe import HyMoEBlock, load_balance_loss, topk_gate, warmup_factor

__all__ = [
    "ContractViolation",
    "HyMoEBlock",
    "LossBreakdown",
    "ModelConfig",
    "NumericError",
    "SeqRecModel",
    "Tensor",
    "backward",
    "finite_difference_grad",
    "load_balance_loss",
    "topk_gate",
    "warmup_factor",
]

__version__ = "0.1.0"
