"""Small parameterized building blocks shared by the model modules."""

from __future__ import annotations

import numpy as np

from . import numeric as nm


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear:
    """y = W^T x + b for a single vector x, with optional activation."""

    def __init__(self, in_dim: int, out_dim: int, name: str, rng: np.random.Generator,
                 activation: str | None = None, bias: bool = True):
        self.weight = nm.Parameter(glorot(rng, in_dim, out_dim), f"{name}.w")
        self.bias = nm.Parameter(np.zeros(out_dim), f"{name}.b") if bias else None
        self.activation = activation

    def __call__(self, x: nm.Tensor) -> nm.Tensor:
        return nm.affine(
            x, self.weight.tensor(),
            None if self.bias is None else self.bias.tensor(),
            self.activation)

    def parameters(self) -> list[nm.Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]
