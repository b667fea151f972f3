"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy array (float64 for training, float32
for the fast inference path). Operations executed while a ``Tape`` is active
append their backward rules to the tape; ``Tape.backward(loss)`` replays the
recorded list in reverse and accumulates gradients into every participating
tensor that has ``requires_grad`` set.

Conventions:
  * signal ops (conv1d, maxpool1d, batchnorm1d, linear, flatten) accept a
    single sample or an extra leading batch axis; semantics are per sample
  * softmax/log_softmax/logsumexp/gather/drop_index act on the last axis
  * there is no division op; ops that divide internally (softmax, batchnorm)
    have strictly positive denominators, so finite inputs give finite outputs
  * maxpool ties route the gradient to the lowest index
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

Array = np.ndarray
ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape currently recording on this thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense n-d array with an optional gradient buffer.

    ``data`` is contiguous and row-major. ``grad`` is lazily allocated with
    the same shape/dtype the first time a gradient is accumulated. Tensors
    are treated as immutable once created, except for ``grad`` and for
    in-place parameter updates performed by an optimizer outside any tape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)


def as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    """Coerce to a constant Tensor (no grad) unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn: Callable[[Array], None]):
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations for one backward pass.

    Creation order is a topological order of the compute graph, so the
    backward pass simply walks ``nodes`` in reverse. A tape can run backward
    exactly once; reuse raises instead of silently corrupting gradients.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _tape_stack().pop()
        return False

    def backward(self, output: Tensor) -> None:
        """Seed d(output)/d(output) = 1 and propagate through all nodes."""
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward(); record a fresh tape")
        if not self.nodes:
            raise RuntimeError("tape is empty: no operations were recorded")
        if output.size != 1:
            raise RuntimeError(f"backward() requires a scalar output, got shape {output.shape}")
        self._consumed = True
        output.grad = np.ones_like(output.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is not None:
                node.backward_fn(g)


def backward(output: Tensor, tape: Optional[Tape] = None) -> None:
    """Run the backward pass for ``output`` on ``tape`` (default: active tape)."""
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("no tape: wrap the forward computation in `with Tape() as tape:`")
    tape.backward(output)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[Array], None]) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, backward_fn))
    return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(x: ArrayLike, y: ArrayLike) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = Tensor(x.data + y.data)

    def bwd(g: Array) -> None:
        _accum(x, _unbroadcast(g, x.shape))
        _accum(y, _unbroadcast(g, y.shape))

    return _record(out, (x, y), bwd)


def mul(x: ArrayLike, y: ArrayLike) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    out = Tensor(x.data * y.data)

    def bwd(g: Array) -> None:
        _accum(x, _unbroadcast(g * y.data, x.shape))
        _accum(y, _unbroadcast(g * x.data, y.shape))

    return _record(out, (x, y), bwd)


def scale(x: ArrayLike, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    out = Tensor(x.data * factor)

    def bwd(g: Array) -> None:
        _accum(x, g * factor)

    return _record(out, (x,), bwd)


def tensor_sum(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def bwd(g: Array) -> None:
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _record(out, (x,), bwd)


def tensor_mean(x: ArrayLike, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis), 1.0 / n)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g: Array) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def reshape(x: ArrayLike, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g: Array) -> None:
        _accum(x, g.reshape(x.shape))

    return _record(out, (x,), bwd)


def flatten(x: ArrayLike, start_axis: int = 0) -> Tensor:
    """Collapse all axes from ``start_axis`` on into one."""
    x = as_tensor(x)
    lead = x.shape[:start_axis]
    return reshape(x, lead + (-1,))


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g: Array) -> None:
        _accum(x, g * (x.data > 0))

    return _record(out, (x,), bwd)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    # split by sign for stability; both branches have denominators >= 1
    pos = x.data >= 0
    z = np.empty_like(x.data)
    z[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    z[~pos] = ez / (1.0 + ez)
    out = Tensor(z)

    def bwd(g: Array) -> None:
        _accum(x, g * z * (1.0 - z))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax family (last axis)


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    return temperature


def softmax(x: ArrayLike, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    t = _check_temperature(temperature)
    z = x.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g: Array) -> None:
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accum(x, (g - inner) * p / t)

    return _record(out, (x,), bwd)


def log_softmax(x: ArrayLike, temperature: float = 1.0) -> Tensor:
    x = as_tensor(x)
    t = _check_temperature(temperature)
    z = x.data / t
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    ls = z - lse
    out = Tensor(ls)

    def bwd(g: Array) -> None:
        p = np.exp(ls)
        _accum(x, (g - p * g.sum(axis=-1, keepdims=True)) / t)

    return _record(out, (x,), bwd)


def logsumexp(x: ArrayLike) -> Tensor:
    """log(sum(exp(x))) along the last axis."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    y = (m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))).squeeze(-1)
    out = Tensor(y)

    def bwd(g: Array) -> None:
        p = np.exp(x.data - np.expand_dims(y, -1))
        _accum(x, p * np.expand_dims(g, -1))

    return _record(out, (x,), bwd)


def _rows_index(index, rows: int) -> Array:
    idx = np.asarray(index)
    if idx.ndim == 0:
        idx = idx.reshape(1)
    if idx.shape != (rows,):
        raise ValueError(f"index shape {idx.shape} does not match {rows} rows")
    return idx.astype(np.int64)


def gather(x: ArrayLike, index) -> Tensor:
    """Pick one entry along the last axis per row: out[b] = x[b, index[b]]."""
    x = as_tensor(x)
    squeeze = x.ndim == 1
    data = x.data[None, :] if squeeze else x.data
    if data.ndim != 2:
        raise ValueError(f"gather expects a 1-d or 2-d tensor, got shape {x.shape}")
    rows, cols = data.shape
    idx = _rows_index(index, rows)
    if idx.min() < 0 or idx.max() >= cols:
        raise ValueError(f"gather index out of range [0, {cols})")
    picked = data[np.arange(rows), idx]
    out = Tensor(picked[0] if squeeze else picked)

    def bwd(g: Array) -> None:
        full = np.zeros_like(data)
        full[np.arange(rows), idx] = np.atleast_1d(g)
        _accum(x, full[0] if squeeze else full)

    return _record(out, (x,), bwd)


def drop_index(x: ArrayLike, index) -> Tensor:
    """Remove one entry along the last axis per row, preserving order."""
    x = as_tensor(x)
    squeeze = x.ndim == 1
    data = x.data[None, :] if squeeze else x.data
    if data.ndim != 2:
        raise ValueError(f"drop_index expects a 1-d or 2-d tensor, got shape {x.shape}")
    rows, cols = data.shape
    if cols < 2:
        raise ValueError("drop_index needs at least two columns")
    idx = _rows_index(index, rows)
    keep = np.arange(cols)[None, :] != idx[:, None]
    kept = data[keep].reshape(rows, cols - 1)
    out = Tensor(kept[0] if squeeze else kept)

    def bwd(g: Array) -> None:
        full = np.zeros_like(data)
        full[keep] = np.atleast_2d(g).reshape(-1)
        _accum(x, full[0] if squeeze else full)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# signal ops


def _as_batched(x: Tensor, name: str) -> tuple[Array, bool]:
    """Normalize (C, L) / (B, C, L) input to a 3-d array."""
    if x.ndim == 2:
        return x.data[None], True
    if x.ndim == 3:
        return x.data, False
    raise ValueError(f"{name} expects a (C, L) or (B, C, L) tensor, got shape {x.shape}")


def conv1d(x: ArrayLike, weight: ArrayLike, bias: ArrayLike,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along the last axis with zero padding at both ends."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be (C_out, C_in, K), got {weight.shape}")
    c_out, c_in, k = weight.shape
    if bias.shape != (c_out,):
        raise ValueError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv1d needs stride >= 1 and padding >= 0, got {stride}/{padding}")
    xb, squeeze = _as_batched(x, "conv1d")
    if xb.shape[1] != c_in:
        raise ValueError(
            f"conv1d channel mismatch: input has shape {tuple(xb.shape[1:])} "
            f"({xb.shape[1]} channels) but weight {tuple(weight.shape)} expects {c_in}")
    l_in = xb.shape[2]
    l_out = (l_in + 2 * padding - k) // stride + 1
    if l_in + 2 * padding < k or l_out < 1:
        raise ValueError(
            f"conv1d output would be empty: L_in={l_in}, padding={padding}, K={k}, stride={stride}")

    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding))) if padding else xb
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]
    y = np.einsum("bclk,ock->bol", windows, weight.data, optimize=True) + bias.data[:, None]
    out = Tensor(y[0] if squeeze else y)

    def bwd(g: Array) -> None:
        gb = g[None] if squeeze else g
        _accum(bias, gb.sum(axis=(0, 2)))
        _accum(weight, np.einsum("bol,bclk->ock", gb, windows, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for kk in range(k):
                # window position l touches padded index l*stride + kk
                contrib = np.einsum("bol,oc->bcl", gb, weight.data[:, :, kk], optimize=True)
                dxp[:, :, kk:kk + stride * l_out:stride] += contrib
            dx = dxp[:, :, padding:padding + l_in] if padding else dxp
            _accum(x, dx[0] if squeeze else dx)

    return _record(out, (x, weight, bias), bwd)


def _pool_windows(x: Tensor, window: int, stride: int, name: str):
    if window < 1 or stride < 1:
        raise ValueError(f"{name} needs window >= 1 and stride >= 1, got {window}/{stride}")
    orig_ndim = x.ndim
    xb = x.data[None, None] if orig_ndim == 1 else (x.data[None] if orig_ndim == 2 else x.data)
    if xb.ndim != 3:
        raise ValueError(f"{name} expects at most 3 axes, got shape {x.shape}")
    l_in = xb.shape[2]
    if window > l_in:
        raise ValueError(f"{name} window {window} exceeds input length {l_in}")
    views = np.lib.stride_tricks.sliding_window_view(xb, window, axis=-1)[:, :, ::stride, :]
    return xb, views, orig_ndim


def _pool_restore(arr: Array, orig_ndim: int) -> Array:
    if orig_ndim == 1:
        return arr[0, 0]
    if orig_ndim == 2:
        return arr[0]
    return arr


def maxpool1d(x: ArrayLike, window: int, stride: int) -> Tensor:
    x = as_tensor(x)
    xb, views, orig_ndim = _pool_windows(x, window, stride, "maxpool1d")
    am = views.argmax(axis=-1)  # first occurrence wins ties
    out = Tensor(_pool_restore(np.take_along_axis(views, am[..., None], axis=-1)[..., 0], orig_ndim))

    def bwd(g: Array) -> None:
        b, c, l_out = am.shape
        gb = np.asarray(g).reshape(b, c, l_out)
        dxb = np.zeros_like(xb)
        src = np.arange(l_out) * stride + am  # absolute argmax positions
        bi, ci = np.meshgrid(np.arange(b), np.arange(c), indexing="ij")
        # add.at because overlapping windows may share an argmax element
        np.add.at(dxb, (bi[..., None], ci[..., None], src), gb)
        _accum(x, _pool_restore(dxb, orig_ndim))

    return _record(out, (x,), bwd)


def avgpool1d(x: ArrayLike, window: int, stride: int) -> Tensor:
    x = as_tensor(x)
    xb, views, orig_ndim = _pool_windows(x, window, stride, "avgpool1d")
    out = Tensor(_pool_restore(views.mean(axis=-1), orig_ndim))

    def bwd(g: Array) -> None:
        b, c, l_out = views.shape[:3]
        gb = np.asarray(g).reshape(b, c, l_out) / window
        dxb = np.zeros_like(xb)
        for kk in range(window):
            dxb[:, :, kk:kk + stride * l_out:stride] += gb
        _accum(x, _pool_restore(dxb, orig_ndim))

    return _record(out, (x,), bwd)


def linear(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """Affine map: weight @ x + bias (per sample)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be 2-d (N_out, N_in), got {weight.shape}")
    n_out, n_in = weight.shape
    if bias.shape != (n_out,):
        raise ValueError(f"linear bias must have shape ({n_out},), got {bias.shape}")
    squeeze = x.ndim == 1
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 2 or xb.shape[1] != n_in:
        raise ValueError(
            f"linear input shape {x.shape} incompatible with weight {tuple(weight.shape)} "
            f"(expected last dim {n_in})")
    y = xb @ weight.data.T + bias.data
    out = Tensor(y[0] if squeeze else y)

    def bwd(g: Array) -> None:
        gb = g[None] if squeeze else g
        _accum(bias, gb.sum(axis=0))
        _accum(weight, gb.T @ xb)
        if x.requires_grad:
            dx = gb @ weight.data
            _accum(x, dx[0] if squeeze else dx)

    return _record(out, (x, weight, bias), bwd)


def batchnorm1d(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike,
                running_mean: Array, running_var: Array, train: bool,
                momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over batch and length axes.

    ``running_mean`` / ``running_var`` are plain arrays owned by the caller
    and updated in place during train mode (unbiased variance, standard
    exponential update with ``momentum``).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xb, squeeze = _as_batched(x, "batchnorm1d")
    c = xb.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm1d gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")

    if train:
        n = xb.shape[0] * xb.shape[2]
        if n < 2:
            raise ValueError("batchnorm1d train mode needs at least 2 values per channel")
        mean = xb.mean(axis=(0, 2))
        var = xb.var(axis=(0, 2))  # biased, used for normalization
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mean = running_mean.astype(xb.dtype, copy=False)
        var = running_var.astype(xb.dtype, copy=False)

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (xb - mean[:, None]) * ivar[:, None]
    y = gamma.data[:, None] * xhat + beta.data[:, None]
    out = Tensor(y[0] if squeeze else y)

    def bwd(g: Array) -> None:
        gb = g[None] if squeeze else g
        _accum(beta, gb.sum(axis=(0, 2)))
        _accum(gamma, (gb * xhat).sum(axis=(0, 2)))
        if x.requires_grad:
            dxhat = gb * gamma.data[:, None]
            if train:
                n = xb.shape[0] * xb.shape[2]
                s1 = dxhat.sum(axis=(0, 2))[:, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2))[:, None]
                dx = (ivar[:, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * ivar[:, None]
            _accum(x, dx[0] if squeeze else dx)

    return _record(out, (x, gamma, beta), bwd)
