"""Parameter containers and initializers shared by the network modules."""

from __future__ import annotations

from typing import Iterator, NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class ConvParams(NamedTuple):
    w: Tensor  # [F, C, kh, kw]
    b: Tensor  # [F]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def __call__(self, x: Tensor, padding: int = 0) -> Tensor:
        return dc.conv2d(x, self.w, self.b, 1, padding)


class DenseParams(NamedTuple):
    w: Tensor  # [d_in, d_out]
    b: Tensor  # [d_out]

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def __call__(self, x: Tensor) -> Tensor:
        return dc.dense(x, self.w, self.b)

    @property
    def d_in(self) -> int:
        return self.w.shape[0]


def he_conv(rng: np.random.Generator, f: int, c: int, k: int, dtype=np.float32) -> ConvParams:
    """Kernel ~ N(0, 2 / fan_in), zero bias."""
    fan_in = c * k * k
    w = rng.standard_normal((f, c, k, k)) * np.sqrt(2.0 / fan_in)
    return ConvParams(Tensor(w.astype(dtype), requires_grad=True),
                      Tensor(np.zeros(f, dtype=dtype), requires_grad=True))


def xavier_dense(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> DenseParams:
    """Weights ~ U(+-sqrt(6 / (fan_in + fan_out))), zero bias."""
    limit = np.sqrt(6.0 / (d_in + d_out))
    w = rng.uniform(-limit, limit, (d_in, d_out))
    return DenseParams(Tensor(w.astype(dtype), requires_grad=True),
                       Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True))


def zeros_conv(f: int, c: int, k: int, dtype=np.float64) -> ConvParams:
    return ConvParams(Tensor(np.zeros((f, c, k, k), dtype), requires_grad=True),
                      Tensor(np.zeros(f, dtype), requires_grad=True))


def zeros_dense(d_in: int, d_out: int, dtype=np.float64) -> DenseParams:
    return DenseParams(Tensor(np.zeros((d_in, d_out), dtype), requires_grad=True),
                       Tensor(np.zeros(d_out, dtype), requires_grad=True))
