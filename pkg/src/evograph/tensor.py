"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is exactly what the forecasting architecture needs:
matrix products (with stacked leading batch dimensions), causal dilated
1-D convolution, pointwise nonlinearities, reductions, concatenation,
slicing/reshaping, dropout, layer normalisation and a row-normalisation
primitive for adjacency matrices.

Gradients are recorded on an explicit :class:`Tape`. Each operation
appends one record holding the output tensor, its parents and a backward
closure; because records are appended in execution order the tape is
already topologically sorted, and :meth:`Tape.backward` simply replays it
in reverse. Outside an active tape (or under :func:`no_grad`) operations
compute forward values only.

Design constraints: float64 everywhere; no implicit broadcasting between
tensors (scalar * tensor excepted) — shape adaptation happens through
explicit ops (``bias_add``, ``broadcast_leading``, ``gather``) so every
backward rule stays auditable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, SequenceTooShortError

Array = np.ndarray

# ---------------------------------------------------------------------------
# Tape machinery

_TAPE_STACK: list["Tape"] = []
_GRAD_ENABLED: bool = True


class Tape:
    """Ordered record of differentiable operations.

    Usage::

        with Tape() as tape:
            loss = ...   # ops executed here are recorded
        tape.backward(loss)
    """

    __slots__ = ("_records",)

    def __init__(self) -> None:
        # each record: (output, parents tuple, backward closure)
        self._records: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self._records.append((out, parents, fn))

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` for every requires_grad leaf on this tape.

        Leaves reachable from ``loss`` receive d(loss)/d(leaf); recorded
        requires_grad leaves that do not influence ``loss`` get a zero
        gradient buffer.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        produced = {id(out) for out, _, _ in self._records}
        if id(loss) not in produced and not loss.requires_grad:
            raise ContractError("loss tensor is not on this tape")

        # reset gradients of everything the tape touches, then seed the loss
        leaves: list[Tensor] = []
        seen: set[int] = set()
        for out, parents, _ in self._records:
            out.grad = None
            for p in parents:
                if p.requires_grad and id(p) not in produced and id(p) not in seen:
                    seen.add(id(p))
                    p.grad = None
                    leaves.append(p)
        loss.grad = np.ones_like(loss.data)

        for out, _, fn in reversed(self._records):
            if out.grad is None:
                continue
            fn(out.grad)

        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def _active_tape() -> Tape | None:
    if _GRAD_ENABLED and _TAPE_STACK:
        return _TAPE_STACK[-1]
    return None


@contextmanager
def no_grad():
    """Disable gradient recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


# ---------------------------------------------------------------------------
# Tensor

class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _accumulate(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy views so later in-place accumulation cannot alias another buffer
        t.grad = g.copy() if g.base is not None else g
    else:
        t.grad = t.grad + g


def _make(data: Array, parents: tuple[Tensor, ...], fn: Callable | None) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        assert fn is not None
        tape._record(out, parents, fn)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (inverse of leading-dim broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise operations

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = float(b)
        av = a

        def back_scalar(g, av=av):
            _accumulate(av, g)

        return _make(a.data + b, (a,), back_scalar)
    _check_same_shape(a, b, "add")

    def back(g, a=a, b=b):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = float(b)

        def back_scalar(g, a=a):
            _accumulate(a, g)

        return _make(a.data - b, (a,), back_scalar)
    _check_same_shape(a, b, "sub")

    def back(g, a=a, b=b):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def back_scalar(g, a=a, s=s):
            _accumulate(a, g * s)

        return _make(a.data * s, (a,), back_scalar)
    _check_same_shape(a, b, "mul")

    def back(g, a=a, b=b):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), back)


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable split avoids overflow in exp for large |x|
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g, x=x, out=out):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g, x=x, out=out):
        _accumulate(x, g * (1.0 - out * out))

    return _make(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def back(g, x=x):
        _accumulate(x, g * (x.data > 0))

    return _make(out, (x,), back)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def back(g, x=x):
        _accumulate(x, g * np.sign(x.data))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, numpy stacking rules.

    Leading axes follow broadcast semantics (a 2-D weight against a
    batched operand is the common case); gradients for the broadcast side
    are summed over the replicated leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner extents {a.shape[-1]} and {b.shape[-2]} differ"
        )
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul: incompatible stack shapes {a.shape} x {b.shape}") from exc

    def back(g, a=a, b=b):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        _accumulate(a, _unbroadcast(ga, a.shape))
        if b.ndim == 2 and g.ndim > 2:
            # plain weight against a batched operand: one flat GEMM beats
            # a batched product followed by a leading-axis reduction
            flat_a = a.data.reshape(-1, a.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            _accumulate(b, flat_a.T @ flat_g)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out, (a, b), back)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match last axis of {x.shape}")

    def back(g, x=x, b=b):
        _accumulate(x, g)
        _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(x.data + b.data, (x, b), back)


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1, stride: int = 1) -> Tensor:
    """Causal valid 1-D convolution.

    ``x`` has shape (..., C_in, T); ``kernel`` has shape (C_out, C_in, k).
    Output time extent is ``(T - (k-1)*dilation - 1) // stride + 1``; with
    stride 1 that is exactly ``T - (k-1)*dilation``. Tap 0 of the kernel
    aligns with the most recent sample, so output step j sees inputs at
    positions ``j*stride + (k-1)*dilation - dilation*tau``.
    """
    if dilation < 1 or stride < 1:
        raise DimensionError("conv1d: dilation and stride must be >= 1")
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be 3-D, got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if x.ndim < 2:
        raise DimensionError(f"conv1d: input must be at least 2-D, got {x.shape}")
    if x.shape[-2] != c_in:
        raise DimensionError(
            f"conv1d: input channels {x.shape[-2]} != kernel channels {c_in}"
        )
    t = x.shape[-1]
    span = (k - 1) * dilation
    if t <= span:
        raise SequenceTooShortError(
            f"conv1d: input length {t} too short for kernel {k} with dilation {dilation}"
            f" (needs > {span})"
        )
    t_out = (t - span - 1) // stride + 1
    out = np.zeros(x.shape[:-2] + (c_out, t_out), dtype=np.float64)
    win = (t_out - 1) * stride + 1
    for tau in range(k):
        off = span - dilation * tau
        xs = x.data[..., :, off : off + win : stride]
        # (c_out, c_in) stacked against (..., c_in, t_out)
        out += np.matmul(kernel.data[:, :, tau], xs)

    def back(g, x=x, kernel=kernel, span=span, win=win, stride=stride, dilation=dilation, k=k):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gk = np.zeros_like(kernel.data) if kernel.requires_grad else None
        sum_axes = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
        for tau in range(k):
            off = span - dilation * tau
            xs = x.data[..., :, off : off + win : stride]
            if gk is not None:
                # contract batch and time axes: (..., o, t) × (..., c, t) -> (o, c)
                gk[:, :, tau] = np.tensordot(g, xs, axes=(sum_axes, sum_axes))
            if gx is not None:
                gx[..., :, off : off + win : stride] += np.matmul(
                    kernel.data[:, :, tau].T, g
                )
        if gx is not None:
            _accumulate(x, gx)
        if gk is not None:
            _accumulate(kernel, gk)

    return _make(out, (x, kernel), back)


# ---------------------------------------------------------------------------
# Reductions and shape ops

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for ndim {ndim}")
        axes.append(a % ndim)
    if len(set(axes)) != len(axes):
        raise DimensionError(f"duplicate axes in {axis}")
    return tuple(sorted(axes))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g, x=x, axes=axes, keepdims=keepdims):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(out, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g, x=x, axes=axes, keepdims=keepdims, n=n):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(x, np.broadcast_to(g, x.shape) / n)

    return _make(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for ndim {ndim}")
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            i != ax and t.shape[i] != ref[i] for i in range(ndim)
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    extents = [t.shape[ax] for t in tensors]

    def back(g, tensors=tensors, extents=extents, ax=ax):
        start = 0
        for t, e in zip(tensors, extents):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(start, start + e)
            _accumulate(t, g[tuple(idx)])
            start += e

    return _make(out, tuple(tensors), back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    ax = axis % x.ndim
    if start < 0 or length < 0 or start + length > x.shape[ax]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of bounds for extent {x.shape[ax]}"
        )
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)

    def back(g, x=x, idx=idx):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        _accumulate(x, gx)

    return _make(x.data[idx].copy(), (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def back(g, x=x):
        _accumulate(x, g.reshape(x.shape))

    return _make(out, (x,), back)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for ndim {x.ndim}")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))
    out = x.data.transpose(axes)

    def back(g, x=x, inv=inv):
        _accumulate(x, g.transpose(inv))

    return _make(out, (x,), back)


def gather(x: Tensor, indices, axis: int) -> Tensor:
    """Select rows along ``axis`` by an integer index vector (with repeats)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError("gather: indices must be 1-D")
    ax = axis % x.ndim
    out = np.take(x.data, idx, axis=ax)

    def back(g, x=x, idx=idx, ax=ax):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        _accumulate(x, gx)

    return _make(out, (x,), back)


def broadcast_leading(x: Tensor, n: int) -> Tensor:
    """Materialise ``n`` copies of ``x`` along a new leading axis."""
    out = np.broadcast_to(x.data, (n,) + x.shape).copy()

    def back(g, x=x):
        _accumulate(x, g.sum(axis=0))

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# Regularisation / normalisation

def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        def back_id(g, x=x):
            _accumulate(x, g)

        return _make(x.data.copy(), (x,), back_id)
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)

    def back(g, x=x, keep=keep):
        _accumulate(x, g * keep)

    return _make(x.data * keep, (x,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise to zero mean / unit variance along the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out = xhat * gain.data + bias.data

    def back(g, x=x, gain=gain, bias=bias, xhat=xhat, inv_std=inv_std, d=d):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        gd = g * gain.data
        m1 = gd.mean(axis=-1, keepdims=True)
        m2 = (gd * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv_std * (gd - m1 - xhat * m2))

    return _make(out, (x, gain, bias), back)


def row_normalize(x: Tensor) -> Tensor:
    """Divide each row (last axis) by its sum; all-zero rows pass through."""
    r = x.data.sum(axis=-1, keepdims=True)
    pos = r > 0
    safe_r = np.where(pos, r, 1.0)
    out = np.where(pos, x.data / safe_r, x.data)

    def back(g, x=x, out=out, safe_r=safe_r, pos=pos):
        inner = (g * out).sum(axis=-1, keepdims=True)
        gx = np.where(pos, (g - inner) / safe_r, g)
        _accumulate(x, gx)

    return _make(out, (x,), back)


# ---------------------------------------------------------------------------
# Convenience losses

def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "mae_loss")
    return reduce_mean(absolute(sub(pred, target)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "mse_loss")
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Array:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
