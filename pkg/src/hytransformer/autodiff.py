"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small define-by-run substrate: each operation records a
backward closure on the output tensor, and ``Tensor.backward()`` walks the
tape in reverse topological order.  The op set is exactly what the
statement encoder needs (matmul, broadcasting add/mul, layer norm,
dropout, softmax, GELU/ReLU, sigmoid, gathers) plus the reductions used by
the loss.

Floats default to 32-bit; ``set_default_dtype("float64")`` switches new
tensors to 64-bit for tight gradient-check tolerances.  Debug mode adds a
NaN poison check after every forward op.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special as _special

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32
_debug = False


def set_default_dtype(dtype: str | np.dtype) -> None:
    global _default_dtype
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; use 'float32' or 'float64'")
        _default_dtype = _DTYPES[dtype]
    else:
        dt = np.dtype(dtype)
        if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported dtype {dt}")
        _default_dtype = dt.type


def default_dtype() -> type:
    return _default_dtype


@contextmanager
def using_dtype(dtype: str | np.dtype):
    saved = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(saved)


def set_debug(flag: bool) -> None:
    """Enable NaN poison checks after every forward op."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    """A dense array plus the tape bookkeeping for reverse mode.

    ``grad`` is lazily allocated and only meaningful on tensors with
    ``requires_grad`` (leaves) or on interior nodes during a backward
    sweep.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable | None = None,
        name: str | None = None,
    ):
        if isinstance(values, Tensor):
            raise TypeError("Tensor(values) expects array-like, not Tensor")
        arr = np.asarray(values)
        # An explicit float ndarray or numpy float scalar (what 0-d ops and
        # full reductions produce) keeps its precision; anything else (lists,
        # python scalars, integer arrays) adopts the session default.
        if not (isinstance(values, (np.ndarray, np.floating)) and arr.dtype in (np.float32, np.float64)):
            if arr.dtype != _default_dtype:
                arr = arr.astype(_default_dtype)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype}{tag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    # -- tape traversal ------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded tape."""
        if self.values.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # interior grads are not reused once propagated
                node.grad = None if node is not self else node.grad

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other)

    def __rsub__(self, other):
        return add(-self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported; divide by a scalar")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=_default_dtype), requires_grad=requires_grad, name=name)


def normal(shape, std: float, rng: np.random.Generator, requires_grad: bool = False, name: str | None = None) -> Tensor:
    vals = (rng.standard_normal(shape) * std).astype(_default_dtype)
    return Tensor(vals, requires_grad=requires_grad, name=name)


# -- op plumbing ---------------------------------------------------------------


def _make(out_values: np.ndarray, parents: tuple[Tensor, ...], backward: Callable | None) -> Tensor:
    if _debug and np.isnan(out_values).any():
        names = [p.name or "<anon>" for p in parents]
        raise FloatingPointError(f"NaN produced by op with inputs {names}")
    needs = any(p.requires_grad or p._parents for p in parents)
    if not needs:
        return Tensor(out_values)
    return Tensor(out_values, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_array(x, like: np.ndarray) -> np.ndarray:
    """Coerce a python scalar to the dtype of ``like``."""
    return np.asarray(x, dtype=like.dtype)


# -- arithmetic ------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bv = _as_array(b, a.values)
        out = a.values + bv

        def bw(g):
            a._accumulate(_unbroadcast(g, a.shape))

        return _make(out, (a,), bw)

    out = a.values + b.values

    def bw(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bv = _as_array(b, a.values)
        out = a.values * bv

        def bw(g):
            a._accumulate(_unbroadcast(g * bv, a.shape))

        return _make(out, (a,), bw)

    out = a.values * b.values

    def bw(g):
        a._accumulate(_unbroadcast(g * b.values, a.shape))
        b._accumulate(_unbroadcast(g * a.values, b.shape))

    return _make(out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-D."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    out = a.values @ b.values

    def bw(g):
        ga = g @ np.swapaxes(b.values, -1, -2)
        gb = np.swapaxes(a.values, -1, -2) @ g
        a._accumulate(_unbroadcast(ga, a.shape))
        b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


# -- shape ops -------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.values.reshape(shape)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _make(out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.values.transpose(axes))

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _make(out, (x,), bw)


# -- indexing --------------------------------------------------------------------


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``table[idx]``; ``idx`` may have any shape.

    Backward scatter-adds (``np.add.at``), so repeated indices accumulate
    deterministically.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"gather index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.values[idx]

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.values)
        np.add.at(table.grad, idx, g)

    return _make(out, (table,), bw)


def select_positions(x: Tensor, pos: np.ndarray) -> Tensor:
    """Pick one row per batch element: ``x[i, pos[i]]`` for ``x`` of shape (B, T, ...)."""
    pos = np.asarray(pos)
    b = np.arange(x.shape[0])
    out = x.values[b, pos]

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.values)
        x.grad[b, pos] += g

    return _make(out, (x,), bw)


# -- reductions ------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy() if np.ndim(g) else np.full_like(x.values, g))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accumulate(np.broadcast_to(gg, x.shape))

    return _make(np.asarray(out), (x,), bw)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= x.shape[ax]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- nonlinearities ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.values, 0)

    def bw(g):
        x._accumulate(g * (x.values > 0))

    return _make(out, (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + _special.erf(x.values * _INV_SQRT2))
    out = x.values * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.values * x.values) * _INV_SQRT2PI
        x._accumulate(g * (cdf + x.values * pdf))

    return _make(out.astype(x.values.dtype, copy=False), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = _special.expit(x.values)

    def bw(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out.astype(x.values.dtype, copy=False), (x,), bw)


def log(x: Tensor) -> Tensor:
    out = np.log(x.values)

    def bw(g):
        x._accumulate(g / x.values)

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through only where no clamping occurred."""
    out = np.clip(x.values, lo, hi)

    def bw(g):
        x._accumulate(g * ((x.values > lo) & (x.values < hi)))

    return _make(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; tolerates -inf entries (they get weight 0)."""
    m = np.max(x.values, axis=axis, keepdims=True)
    e = np.exp(x.values - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        x._accumulate(out * (g - dot))

    return _make(out, (x,), bw)


# -- normalization and regularization ---------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row re-centering/re-scaling over the last axis, then affine gain/bias."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ValueError("layer_norm needs a non-empty last dimension")
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + bias.values

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gain._accumulate((g * xhat).sum(axis=lead))
        bias._accumulate(g.sum(axis=lead))
        dxhat = g * gain.values
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: train mode zeroes with prob ``rate`` and rescales
    survivors by 1/(1-rate); eval mode is the identity (same tensor back).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng stream")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out = x.values * keep * scale

    def bw(g):
        x._accumulate(g * keep * scale)

    return _make(out, (x,), bw)
