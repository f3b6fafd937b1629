"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a row-major numpy array (float32 or float64). Primitives
applied while a `Tape` is active record themselves onto it; `backward(loss)`
replays the tape once in reverse execution order (a valid reverse topological
order, since every operand precedes its consumer) and accumulates gradients
into `requires_grad` leaves and `retain_grad` intermediates.

Design notes:

* GELU uses the tanh approximation, so its gradient is smooth everywhere.
* max reductions route the gradient to the first maximal element in
  row-major order.
* matmul performs no implicit broadcasting on the contraction extents;
  leading batch extents broadcast like numpy.
* One tape serves one backward pass; replaying a consumed tape is an error.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, NumericError, ShapeError, TapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

# Debug switch: scan every primitive output for NaN/Inf. Off by default
# (training-speed path); the gradient-check battery turns it on.
CHECK_FINITE = False

# Test-only seam: op names whose recorded backward is deliberately perturbed,
# so a corrupted-gradient negative control can be exercised end to end.
_CORRUPT_BACKWARD: set[str] = set()

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _np_dtype(dtype):
    if isinstance(dtype, str):
        try:
            return DTYPES[dtype]
        except KeyError:
            raise ShapeError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}") from None
    return np.dtype(dtype).type


class Tensor:
    """N-dimensional numeric array, optionally participating in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=_np_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr if arr.ndim == 0 else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.retain_grad = False
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


class _Node:
    __slots__ = ("name", "out", "backward")

    def __init__(self, name: str, out: Tensor, backward: Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]]):
        self.name = name
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of primitive applications; single-owner, one backward pass."""

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        Tape._active = self._prev
        return False

    def clear(self):
        """Drop every recorded node, freeing the saved intermediates."""
        self.nodes.clear()
        self.consumed = False


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _check_dtypes(a: Tensor, b: Tensor, op: str):
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype.name} and {b.dtype.name}")


def _finite_or_raise(arr: np.ndarray, op: str):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _record(name: str, out: Tensor, inputs: Sequence[Tensor], backward):
    _finite_or_raise(out.data, name)
    tape = Tape._active
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    if name in _CORRUPT_BACKWARD:
        clean = backward

        def backward(g, _clean=clean):
            return [(t, gt * 1.01) for t, gt in _clean(g)]

    out.requires_grad = True
    out._tape = tape
    tape.nodes.append(_Node(name, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Populate gradients of every `requires_grad` leaf reachable from `loss`.

    `loss` must be a scalar recorded on a live tape. Each leaf's `.grad`
    receives (or accumulates onto) the full gradient; intermediates keep
    theirs only when `retain_grad` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on a tape (no grad to compute)")
    if tape.consumed:
        raise TapeError("tape already consumed; build a new tape before backward")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(n.out) for n in tape.nodes}

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if node.out.retain_grad:
            out = node.out
            out.grad = g if out.grad is None else out.grad + g
        for t, gt in node.backward(g):
            if not isinstance(t, Tensor) or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gt
            else:
                grads[key] = gt
                holders[key] = t

    for key, g in grads.items():
        t = holders[key]
        if key not in produced or t.retain_grad:
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise primitives


def _broadcast_shapes(a: Tensor, b: Tensor, op: str):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "add")
    _broadcast_shapes(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record("add", out, (a, b), lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))])


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "sub")
    _broadcast_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record("sub", out, (a, b), lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))])


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "mul")
    _broadcast_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def grad(g):
        return [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))]

    return _record("mul", out, (a, b), grad)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _check_dtypes(a, b, "div")
    _broadcast_shapes(a, b, "div")
    try:
        with np.errstate(divide="raise", invalid="raise"):
            out = Tensor(a.data / b.data)
    except FloatingPointError:
        raise DomainError("div: division by zero") from None

    def grad(g):
        return [
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * out.data / b.data, b.shape)),
        ]

    return _record("div", out, (a, b), grad)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return _record("relu", out, (a,), lambda g: [(a, g * (a.data > 0))])


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def grad(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return [(a, g * d)]

    return _record("gelu", out, (a,), grad)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _record("sigmoid", out, (a,), lambda g: [(a, g * y * (1.0 - y))])


def exp(a: Tensor) -> Tensor:
    try:
        with np.errstate(over="raise"):
            out = Tensor(np.exp(a.data))
    except FloatingPointError:
        raise DomainError("exp: overflow") from None
    return _record("exp", out, (a,), lambda g: [(a, g * out.data)])


def log(a: Tensor) -> Tensor:
    try:
        with np.errstate(divide="raise", invalid="raise"):
            out = Tensor(np.log(a.data))
    except FloatingPointError:
        raise DomainError("log: argument outside (0, inf)") from None
    return _record("log", out, (a,), lambda g: [(a, g / a.data)])


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only through unclipped points."""
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record("clip", out, (a,), lambda g: [(a, g * inside)])


# ---------------------------------------------------------------------------
# linear algebra & convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        b = _coerce(b, a)
    _check_dtypes(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    try:
        out = Tensor(np.matmul(a.data, b.data))
    except ValueError:
        raise ShapeError(f"matmul: batch extents do not broadcast, {a.shape} x {b.shape}") from None

    def grad(g):
        swap_b = np.swapaxes(b.data, -1, -2)
        swap_a = np.swapaxes(a.data, -1, -2)
        return [
            (a, _unbroadcast(np.matmul(g, swap_b), a.shape)),
            (b, _unbroadcast(np.matmul(swap_a, g), b.shape)),
        ]

    return _record("matmul", out, (a, b), grad)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (C_in,H,W) or (B,C_in,H,W) with w (C_out,C_in,k,k)."""
    _check_dtypes(x, w, "conv2d")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected (B,C,H,W) and (Co,Ci,k,k), got {x.shape} and {w.shape}")
    b, ci, h, wd = xd.shape
    co, ci_w, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd extent, got {w.shape}")
    if ci != ci_w:
        raise ShapeError(f"conv2d: input channels {ci} != weight channels {ci_w} ({x.shape} vs {w.shape})")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent for input {x.shape}, k={k}, stride={stride}, padding={padding}")

    y = kernels.conv2d_forward(xd, w.data, stride, padding)
    out = Tensor(y[0] if squeeze else y)

    def grad(g):
        gd = np.ascontiguousarray(g[None] if squeeze else g)
        dx = kernels.conv2d_grad_input(gd, w.data, stride, padding, h, wd)
        dw = kernels.conv2d_grad_weight(xd, gd, k, stride, padding)
        return [(x, dx[0] if squeeze else dx), (w, dw)]

    return _record("conv2d", out, (x, w), grad)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; slices sum to 1."""
    axis = _norm_axis(x, axis)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def grad(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return [(x, y * (g - dot))]

    return _record("softmax", out, (x,), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError(f"layer_norm: eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data)

    def grad(g):
        lead = tuple(range(x.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead)
        dbias = np.sum(g, axis=lead)
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return [(x, dx), (gain, dgain), (bias, dbias)]

    return _record("layer_norm", out, (x, gain, bias), grad)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _check_reduce(x: Tensor, axis):
    if axis is None:
        if x.size == 0:
            raise ShapeError("reduction over an empty tensor")
        return None
    axis = _norm_axis(x, axis)
    if x.shape[axis] == 0:
        raise ShapeError(f"reduction over empty axis {axis} of shape {x.shape}")
    return axis


def _restore(g: np.ndarray, shape, axis, keepdims):
    if keepdims or axis is None and g.ndim == len(shape):
        return np.broadcast_to(g, shape)
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def reduce_sum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _check_reduce(x, axis)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    return _record("sum", out, (x,), lambda g: [(x, np.ascontiguousarray(_restore(g, x.shape, axis, keepdims)))])


def reduce_mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _check_reduce(x, axis)
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    return _record("mean", out, (x,), lambda g: [(x, np.ascontiguousarray(_restore(g, x.shape, axis, keepdims)) / n)])


def reduce_max(x: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; backward routes to the first maximal element (row-major)."""
    axis = _check_reduce(x, axis)
    out_data = np.max(x.data, axis=axis, keepdims=keepdims)
    out = Tensor(out_data)

    def grad(g):
        dx = np.zeros_like(x.data)
        if axis is None:
            idx = np.unravel_index(np.argmax(x.data), x.shape)
            dx[idx] = g.reshape(())
        else:
            arg = np.argmax(x.data, axis=axis)  # first occurrence on ties
            ge = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(dx, np.expand_dims(arg, axis), ge, axis=axis)
        return [(x, dx)]

    return _record("max", out, (x,), grad)


# ---------------------------------------------------------------------------
# structural primitives


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _record("reshape", out, (x,), lambda g: [(x, g.reshape(x.shape))])


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    return _record("transpose", out, (x,), lambda g: [(x, np.ascontiguousarray(np.transpose(g, inv)))])


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = Tensor(np.broadcast_to(x.data, shape).copy())
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    return _record("broadcast", out, (x,), lambda g: [(x, _unbroadcast(g, x.shape))])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = _norm_axis(parts[0], axis)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def grad(g):
        contributions = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            contributions.append((p, np.ascontiguousarray(g[tuple(sl)])))
        return contributions

    return _record("concat", out, tuple(parts), grad)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = _norm_axis(x, axis)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(np.ascontiguousarray(x.data[sl]))

    def grad(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return [(x, dx)]

    return _record("slice", out, (x,), grad)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the last two axes by an integer factor."""
    f = int(factor)
    out = Tensor(np.ascontiguousarray(np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)))

    def grad(g):
        shape = g.shape[:-2] + (x.shape[-2], f, x.shape[-1], f)
        return [(x, g.reshape(shape).sum(axis=(-3, -1)))]

    return _record("upsample", out, (x,), grad)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0. Mask drawn from `rng`."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    out = Tensor(x.data * mask)
    return _record("dropout", out, (x,), lambda g: [(x, g * mask)])


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x: Tensor, eps: float = 1e-5, skip: np.ndarray | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor built from tape primitives. Each
    coordinate of `x` is perturbed by +/- eps; relative error uses
    |a - n| / max(|a|, |n|, 1e-12). Coordinates where `skip` is True are
    excluded -- callers mask kink neighborhoods (e.g. |x| < 1e-3 for relu)
    where central differences straddle the non-differentiable point.
    Non-finite values anywhere are raised, never swallowed.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ShapeError(f"grad_check eps must lie in [1e-6, 1e-4], got {eps}")
    probe = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
        backward(y)
    tape.clear()
    if probe.grad is None:
        analytic = np.zeros_like(probe.data)
    else:
        analytic = probe.grad
    if not np.all(np.isfinite(analytic)):
        raise NumericError("grad_check: non-finite analytic gradient")

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        hi = f(Tensor(probe.data)).item()
        flat[i] = keep - eps
        lo = f(Tensor(probe.data)).item()
        flat[i] = keep
        numeric[i] = (hi - lo) / (2.0 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NumericError("grad_check: non-finite finite-difference value")

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    if skip is not None:
        rel = rel[~skip.reshape(-1)]
    return float(rel.max()) if rel.size else 0.0
