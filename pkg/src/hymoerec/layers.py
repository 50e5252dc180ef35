"""Parameter containers and the small layers the model is assembled from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import ContractViolation, Tensor


class Module:
    """Walks its attributes (in assignment order) to find parameters."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(arr: np.ndarray, name: str) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(d_in, d_out)), "weight")
        self.bias = _param(np.zeros(d_out), "bias")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ContractViolation(f"linear: input width {x.shape[-1]} != {self.d_in}")
        return x @ self.weight + self.bias


class FeedForward(Module):
    """Position-wise d -> d_ff -> d network with GELU.

    ``calls`` counts how many token rows this network has processed.
    """

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        self.calls += int(np.prod(x.shape[:-1]))
        return self.fc2(self.fc1(x).gelu())


class LayerNorm(Module):
    def __init__(self, d_model: int, eps: float = 1e-8):
        self.gamma = _param(np.ones(d_model), "gamma")
        self.beta = _param(np.zeros(d_model), "beta")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.eps) * self.gamma + self.beta
