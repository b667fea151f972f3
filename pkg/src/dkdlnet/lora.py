"""Low-rank adapters for conv1d and linear layers.

An adapter is a pair of small matrices: A (rank x fan_in, drawn from
N(0, sigma^2)) and B (fan_out x rank, zeros). Their product B.A is a dense
weight update applied as the same layer type as the frozen base layer,
so a fresh adapter changes nothing (B = 0) and training moves only A and B.
Merging folds B.A into the base weight for adapter-free inference.

fan_in is in_features for a linear base and C_in * K for a conv base.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as dt
from .tensor import Tensor


@dataclass
class LoraAdapter:
    A: Tensor  # (rank, fan_in)
    B: Tensor  # (fan_out, rank)
    rank: int
    sigma: float
    merged: bool = False
    scale: float = 1.0  # optional alpha/r-style multiplier; 1.0 = plain B.A

    @property
    def fan_in(self) -> int:
        return self.A.shape[1]

    @property
    def fan_out(self) -> int:
        return self.B.shape[0]

    def parameter_count(self) -> int:
        return 0 if self.merged else self.A.size + self.B.size


def init_adapter(fan_in: int, fan_out: int, rank: int, sigma: float = 0.01,
                 seed: int = 0, scale: float = 1.0) -> LoraAdapter:
    """Fresh adapter: A ~ N(0, sigma^2) from the seeded generator, B = 0."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan_in/fan_out must be positive, got {fan_in}/{fan_out}")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(0.0, sigma, size=(rank, fan_in)), requires_grad=True)
    b = Tensor(np.zeros((fan_out, rank)), requires_grad=True)
    return LoraAdapter(A=a, B=b, rank=rank, sigma=sigma, scale=scale)


def delta_weight(adapter: LoraAdapter, like_shape: tuple) -> Tensor:
    """B.A (optionally scaled) reshaped to the base weight's shape, on tape."""
    dw = dt.matmul(adapter.B, adapter.A)
    if adapter.scale != 1.0:
        dw = dt.scale(dw, adapter.scale)
    return dt.reshape(dw, like_shape)


def adapted_forward(base_weight: Tensor, base_bias: Tensor, adapter: LoraAdapter,
                    x, stride: int = 1, padding: int = 0) -> Tensor:
    """base layer output + the adapter update applied as the same layer type."""
    if adapter.merged:
        raise RuntimeError("adapter is merged; the standalone adapter path is disabled")
    if base_weight.ndim == 3:
        c_out, c_in, k = base_weight.shape
        if adapter.fan_in != c_in * k or adapter.fan_out != c_out:
            raise ValueError(
                f"adapter ({adapter.fan_out} x {adapter.rank} x {adapter.fan_in}) does not "
                f"fit conv weight {tuple(base_weight.shape)}")
        base = dt.conv1d(x, base_weight, base_bias, stride, padding)
        dw = delta_weight(adapter, (c_out, c_in, k))
        zero = Tensor(np.zeros(c_out, dtype=base_weight.dtype))
        return dt.add(base, dt.conv1d(x, dw, zero, stride, padding))
    if base_weight.ndim == 2:
        n_out, n_in = base_weight.shape
        if adapter.fan_in != n_in or adapter.fan_out != n_out:
            raise ValueError(
                f"adapter ({adapter.fan_out} x {adapter.rank} x {adapter.fan_in}) does not "
                f"fit linear weight {tuple(base_weight.shape)}")
        base = dt.linear(x, base_weight, base_bias)
        dw = delta_weight(adapter, (n_out, n_in))
        zero = Tensor(np.zeros(n_out, dtype=base_weight.dtype))
        return dt.add(base, dt.linear(x, dw, zero))
    raise ValueError(f"base weight must be 2-d or 3-d, got shape {tuple(base_weight.shape)}")


def merge(base_weight: Tensor, adapter: LoraAdapter) -> Tensor:
    """W' = W0 + reshape(B.A); marks the adapter merged. One-shot."""
    if adapter.merged:
        raise RuntimeError("adapter already merged")
    dw = (adapter.B.data @ adapter.A.data) * adapter.scale
    merged = base_weight.data + dw.reshape(base_weight.shape).astype(base_weight.dtype, copy=False)
    adapter.merged = True
    return Tensor(merged)
