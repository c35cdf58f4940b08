"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tape` records operations executed inside its ``with`` block.  Ops
append nodes in execution order, so walking the node list backwards is a
reverse topological traversal.  Tensors are never mutated by ops; gradients
live in a :class:`GradMap` returned by ``Tape.backward`` rather than on the
tensors themselves, so the same parameter tensors can be reused across many
tapes (and across threads, one tape per thread).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import lfilter as _lfilter


class TensorError(ValueError):
    """Shape, dtype or tape misuse."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    return arr


class Tensor:
    """Immutable dense array, optionally participating in gradient tapes.

    ``requires_grad`` marks a *leaf*: backward will report a gradient for it.
    Results of ops never require grad themselves; their tape membership is
    tracked by the tape that recorded them.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)

    # -- basic introspection -------------------------------------------------
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
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut from every tape; never receives gradient."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    # -- method sugar ----------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def std(self, axis=None, keepdims=False):
        return std(self, axis, keepdims)

    def var(self, axis=None, keepdims=False):
        return var(self, axis, keepdims)

    def abs(self):
        return abs_(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)


class Param(Tensor):
    """Named leaf tensor used as a trainable parameter."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def assign(self, data: np.ndarray) -> None:
        """Replace the buffer (optimizer step). Requires exclusive access."""
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise TensorError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data = arr

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("inputs", "outputs", "vjp")

    def __init__(self, inputs, outputs, vjp):
        self.inputs = inputs    # tuple[Tensor]
        self.outputs = outputs  # tuple[Tensor]
        self.vjp = vjp          # list[grad|None] -> tuple[grad|None]


class GradMap:
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._refs: dict[int, Tensor] = {}

    def _put(self, t: Tensor, g: np.ndarray) -> None:
        k = id(t)
        if k in self._grads:
            self._grads[k] = self._grads[k] + g
        else:
            self._grads[k] = g
            self._refs[k] = t

    def get(self, t: Tensor):
        """Gradient array for ``t`` or None if it received none."""
        return self._grads.get(id(t))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> Iterable[Tensor]:
        return self._refs.values()

    def merge(self, other: "GradMap") -> "GradMap":
        """Sum of two gradient maps (for independent parallel tapes)."""
        out = GradMap()
        for gm in (self, other):
            for k, g in gm._grads.items():
                out._put(gm._refs[k], g)
        return out


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered op record; single-threaded, one backward per recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._live: set[int] = set()
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TensorError("tape stack corrupted")
        stack.pop()
        return False

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._live

    def _record(self, inputs, outputs, vjp) -> None:
        if self._consumed:
            raise TensorError("tape already consumed by backward; re-record first")
        self.nodes.append(_Node(inputs, outputs, vjp))
        for out in outputs:
            self._live.add(id(out))

    def backward(self, loss: Tensor) -> GradMap:
        """Gradients of a scalar loss w.r.t. every requires_grad leaf."""
        if self._consumed:
            raise TensorError("backward called twice on the same tape")
        self._consumed = True
        if loss.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        out = GradMap()
        if id(loss) not in self._live:
            # loss depends only on detached values: nothing to propagate
            return out
        interm: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            outs_g = [interm.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in outs_g):
                continue
            ins_g = node.vjp(outs_g)
            for t, g in zip(node.inputs, ins_g):
                if g is None:
                    continue
                if t.requires_grad:
                    out._put(t, g)
                elif id(t) in self._live:
                    k = id(t)
                    if k in interm:
                        interm[k] = interm[k] + g
                    else:
                        interm[k] = g
        return out


# ---------------------------------------------------------------------------
# op machinery


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _first_tensor(args) -> Tensor:
    for a in args:
        if isinstance(a, Tensor):
            return a
    raise TensorError("op needs at least one Tensor argument")


def _fast_tensor(arr) -> Tensor:
    # internal fast path: arr is already a float ndarray / numpy scalar
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(arr)
    t.requires_grad = False
    return t


def _emit(inputs: Sequence[Tensor], out_data, vjp: Callable):
    """Create output tensor(s), recording on the active tape if needed."""
    single = isinstance(out_data, (np.ndarray, np.generic))
    outs = (_fast_tensor(out_data),) if single else tuple(_fast_tensor(d) for d in out_data)
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        live = tape._live
        for t in inputs:
            if t.requires_grad or id(t) in live:
                tape._record(tuple(inputs), outs, vjp)
                break
    return outs[0] if single else outs


def _check_same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d0:
            raise TensorError(f"dtype mismatch: {d0} vs {t.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient of a broadcast result back to the operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / broadcast arithmetic


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if type(a) is not Tensor or type(b) is not Tensor:
        if not isinstance(a, Tensor):
            a = _coerce(a, _first_tensor((a, b)))
        if not isinstance(b, Tensor):
            b = _coerce(b, _first_tensor((a, b)))
    if a.data.dtype != b.data.dtype:
        raise TensorError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(gs):
        (g,) = gs
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit((a, b), out, vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(gs):
        (g,) = gs
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit((a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(gs):
        (g,) = gs
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit((a, b), out, vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(gs):
        (g,) = gs
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _emit((a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    out = -a.data

    def vjp(gs):
        (g,) = gs
        return (-g,)

    return _emit((a,), out, vjp)


def _unary(a: Tensor, fwd, dydx) -> Tensor:
    y = fwd(a.data)

    def vjp(gs):
        (g,) = gs
        return (g * dydx(a.data, y),)

    return _emit((a,), y, vjp)


def exp(a: Tensor) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a: Tensor) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def log1p(a: Tensor) -> Tensor:
    return _unary(a, np.log1p, lambda x, y: 1.0 / (1.0 + x))


def sqrt(a: Tensor) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a: Tensor) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a: Tensor) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def tanh(a: Tensor) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def abs_(a: Tensor) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def sigmoid(a: Tensor) -> Tensor:
    def fwd(x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, lambda x, y: y * (1.0 - y))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""

    def fwd(x):
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def dydx(x, y):
        # d softplus = sigmoid(x)
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(a, fwd, dydx)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    lo = float(lo)
    y = np.maximum(a.data, lo)

    def vjp(gs):
        (g,) = gs
        return (g * (a.data > lo),)

    return _emit((a,), y, vjp)


def relu(a: Tensor) -> Tensor:
    return clamp_min(a, 0.0)


def silu(a: Tensor) -> Tensor:
    return mul(a, sigmoid(a))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    return add(mul(relu(a), 1.0 - slope), mul(a, slope))


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise TensorError(f"cannot reshape {a.shape} to {shape}") from e

    def vjp(gs):
        (g,) = gs
        return (g.reshape(a.shape),)

    return _emit((a,), out, vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(gs):
        (g,) = gs
        return (np.transpose(g, inv),)

    return _emit((a,), out, vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise TensorError("concat of zero tensors")
    _check_same_dtype(*parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(gs):
        (g,) = gs
        return tuple(np.split(g, splits, axis=axis))

    return _emit(parts, out, vjp)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype)

    def vjp(gs):
        (g,) = gs
        gi = np.zeros_like(a.data)
        gi[key] = g
        return (gi,)

    return _emit((a,), out, vjp)


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Fancy indexing of axis 0 with an integer array of any shape."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TensorError("gather index must be integer")
    out = a.data[idx]

    def vjp(gs):
        (g,) = gs
        gi = np.zeros_like(a.data)
        np.add.at(gi, idx, g)
        return (gi,)

    return _emit((a,), out, vjp)


def pad_zeros(a: Tensor, before: int, after: int, axis: int = -1) -> Tensor:
    """Zero padding along one axis (composite: concat with constants)."""
    axis = axis % a.ndim
    parts = []
    if before:
        shp = list(a.shape)
        shp[axis] = before
        parts.append(Tensor(np.zeros(shp, dtype=a.dtype)))
    parts.append(a)
    if after:
        shp = list(a.shape)
        shp[axis] = after
        parts.append(Tensor(np.zeros(shp, dtype=a.dtype)))
    return concat(parts, axis=axis) if len(parts) > 1 else a


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.dtype)

    def vjp(gs):
        (g,) = gs
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit((a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    if axis is None:
        count = a.size
    else:
        count = int(np.prod([a.shape[i] for i in axis]))

    def vjp(gs):
        (g,) = gs
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit((a,), out, vjp)


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (biased) variance; composite so gradient is automatic."""
    mu = mean(a, axis, keepdims=True)
    d = sub(a, mu)
    v = mean(mul(d, d), axis, keepdims)
    return v


def std(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation."""
    return sqrt(var(a, axis, keepdims))


# ---------------------------------------------------------------------------
# linear algebra / attention


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul needs tensors of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(gs):
        (g,) = gs
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit((a, b), out, vjp)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with an optional additive mask.

    The mask is a plain array of 0 / -inf entries (not differentiated);
    -inf positions get exactly zero weight.
    """
    x = a.data
    if mask is not None:
        if isinstance(mask, Tensor):
            mask = mask.data
        x = x + mask.astype(a.dtype)
    shift = np.max(x, axis=-1, keepdims=True)
    # rows that are fully masked would produce nan; forbid them
    if not np.all(np.isfinite(shift)):
        raise TensorError("softmax row with every position masked")
    e = np.exp(x - shift)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(gs):
        (g,) = gs
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _emit((a,), y, vjp)


# ---------------------------------------------------------------------------
# signal primitives


def rfft(a: Tensor):
    """Real FFT along the last axis -> (real, imag) tensor pair."""
    n = a.shape[-1]
    spec = np.fft.rfft(a.data, axis=-1)
    re = np.ascontiguousarray(spec.real).astype(a.dtype)
    im = np.ascontiguousarray(spec.imag).astype(a.dtype)

    def vjp(gs):
        g_re, g_im = gs
        if g_re is None:
            g_re = np.zeros_like(re)
        if g_im is None:
            g_im = np.zeros_like(im)
        G = g_re.astype(np.float64) + 1j * g_im.astype(np.float64)
        # adjoint of the one-sided DFT: halve the doubled interior bins
        if n % 2 == 0:
            G[..., 1:-1] *= 0.5
        else:
            G[..., 1:] *= 0.5
        gx = n * np.fft.irfft(G, n=n, axis=-1)
        return (gx.astype(a.dtype),)

    return _emit((a,), (re, im), vjp)


def iir_filter(a: Tensor, sos: np.ndarray) -> Tensor:
    """Cascade of second-order IIR sections along the last axis.

    ``sos`` has shape (n_sections, 6) = [b0 b1 b2 a0 a1 a2], zero initial
    state.  Filtering is linear in the input, so the adjoint is the same
    cascade run on the time-reversed gradient.
    """
    sos = np.asarray(sos, dtype=np.float64)
    if sos.ndim != 2 or sos.shape[1] != 6:
        raise TensorError("sos must have shape (n_sections, 6)")

    def run(x):
        y = x.astype(np.float64)
        for sec in sos:
            y = _lfilter(sec[:3], sec[3:], y, axis=-1)
        return y

    out = run(a.data).astype(a.dtype)

    def vjp(gs):
        (g,) = gs
        gx = run(g[..., ::-1])[..., ::-1]
        return (np.ascontiguousarray(gx).astype(a.dtype),)

    return _emit((a,), out, vjp)


# ---------------------------------------------------------------------------
# verification oracle


def finite_diff_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic gradient of ``f`` and central
    differences at ``x``.

    ``f`` maps a tensor to a scalar tensor and must be deterministic.
    ``x`` should be float64 for meaningful tolerances.
    """
    if x.dtype != np.float64:
        raise TensorError("finite_diff_check requires a float64 input")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    tape = Tape()
    with tape:
        y = f(leaf)
    grads = tape.backward(y)
    g = grads.get(leaf)
    if g is None:
        g = np.zeros_like(x.data)

    num = np.zeros_like(x.data)
    flat = num.reshape(-1)
    base = x.data.copy()
    for i in range(base.size):
        xp = base.copy().reshape(-1)
        xm = base.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(base.shape))).item()
        fm = f(Tensor(xm.reshape(base.shape))).item()
        flat[i] = (fp - fm) / (2.0 * h)

    denom = np.abs(g) + np.abs(num) + 1e-12
    return float(np.max(np.abs(g - num) / denom))
