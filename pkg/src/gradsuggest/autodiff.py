"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Usage::

    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape() as tape:
        loss = ad.mean(ad.square(x))
    tape.backward(loss)
    x.grad

A fresh :class:`Tape` is opened for every forward pass. Primitives applied
while a tape is active are recorded on it whenever one of their inputs
requires a gradient; outside a tape nothing is recorded and the same calls
act as plain numpy arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import (
    ContractViolation,
    DimensionError,
    StaleTapeError,
    UnsupportedOpError,
)

__all__ = [
    "Tensor",
    "Tape",
    "apply_primitive",
    "backward",
    "grad_check",
    "PRIMITIVES",
    "add", "sub", "mul", "div", "scale", "matmul", "conv2d",
    "conv_transpose2d", "relu", "sigmoid", "exp", "log", "square", "sum",
    "mean", "reshape", "concat", "max_pool2d", "upsample2d",
]


class Tensor:
    """Immutable float64 array with an optional gradient slot.

    ``values`` is read-only. ``grad`` is populated on leaves by
    :meth:`Tape.backward`.
    """

    __slots__ = ("values", "requires_grad", "grad", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)  # always copies
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.flags.writeable = False
        t.values = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def numpy(self) -> np.ndarray:
        return np.array(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


_ACTIVE: list = []


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._producer: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, node: Node) -> None:
        self._producer[id(node.output)] = len(self.nodes)
        self.nodes.append(node)

    def leaves(self) -> list:
        """Inputs requiring grad that no recorded node produced, in first-use order."""
        seen, out = set(), []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in self._producer and id(t) not in seen:
                    seen.add(id(t))
                    out.append(t)
        return out

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def backward(tape: Tape, loss: Tensor) -> dict:
    """Propagate d(loss) back through ``tape``.

    Sets ``.grad`` on every leaf of the tape (zeros for leaves the loss does
    not depend on) and returns ``{id(leaf): grad}``.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    pos = tape._producer.get(id(loss))
    if pos is None or tape.nodes[pos].output is not loss:
        raise StaleTapeError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes[: pos + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result = {}
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        leaf.grad = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        result[id(leaf)] = leaf.grad
    return result


# --------------------------------------------------------------------------
# primitive kernels
#
# Each kernel takes raw arrays plus attrs and returns (out, vjp); vjp maps the
# output cotangent to one cotangent per input.


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _k_add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _k_sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _k_mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _k_div(a, b):
    _broadcast_shape("div", a, b)
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


def _k_scale(a, factor):
    return a * factor, lambda g: (g * factor,)


def _k_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _k_relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), lambda g: (g * mask,)


_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - np.finfo(np.float64).epsneg


def _k_sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the range open: float64 rounds sigmoid(z) to 1.0 (or 0.0) for large |z|
    np.clip(out, _SIGMOID_LO, _SIGMOID_HI, out=out)
    return out, lambda g: (g * out * (1.0 - out),)


def _k_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _k_log(a):
    if np.any(a <= 0):
        raise ContractViolation("log: input must be strictly positive")
    return np.log(a), lambda g: (g / a,)


def _k_square(a):
    return a * a, lambda g: (2.0 * g * a,)


def _norm_axis(a, axis):
    if axis is None:
        return tuple(range(a.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    try:
        return tuple(sorted(ax % a.ndim for ax in axes))
    except ZeroDivisionError:
        raise DimensionError("reduction over a 0-d tensor") from None


def _k_sum(a, axis=None):
    axes = _norm_axis(a, axis)
    if any(ax >= a.ndim for ax in axes):
        raise DimensionError(f"sum: axis {axis} out of range for shape {a.shape}")
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    out = a.sum(axis=axes)
    return out, lambda g: (np.broadcast_to(g.reshape(kept), a.shape).copy(),)


def _k_mean(a, axis=None):
    axes = _norm_axis(a, axis)
    count = math.prod(a.shape[ax] for ax in axes)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    out = a.mean(axis=axes)
    return out, lambda g: (np.broadcast_to(g.reshape(kept) / count, a.shape).copy(),)


def _k_reshape(a, shape):
    shape = tuple(shape)
    if math.prod(shape) != a.size or any(n <= 0 for n in shape):
        raise DimensionError(f"reshape: cannot reshape {a.shape} to {shape}")
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


def _k_concat(*arrays, axis=1):
    ref = arrays[0]
    for arr in arrays[1:]:
        if arr.ndim != ref.ndim or any(
            arr.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {[x.shape for x in arrays]} differ off axis {axis}"
            )
    bounds = np.cumsum([0] + [x.shape[axis] for x in arrays])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(arrays))
        )

    return np.concatenate(arrays, axis=axis), vjp


def _out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N, C, Hp, Wp) -> (C*kh*kw, N*Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols, n, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`_im2col`: scatter-add patches back onto (N, C, Hp, Wp)."""
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((c, n, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x, p):
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _check_conv(op, x, w, b, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"{op}: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if int(stride) < 1 or int(padding) < 0:
        raise DimensionError(f"{op}: invalid stride={stride} padding={padding}")
    if b is not None and b.shape != (w.shape[1] if op == "conv_transpose2d" else w.shape[0],):
        raise DimensionError(f"{op}: bias shape {b.shape} does not match weight {w.shape}")


def _k_conv2d(x, w, b=None, *, stride=1, padding=0):
    _check_conv("conv2d", x, w, b, stride, padding)
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    ho, wo = _out_size(h, kh, stride, padding), _out_size(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = _pad(x, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.reshape(o, -1)
    out = wmat @ cols
    if b is not None:
        out += b[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def vjp(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        if stride == 1 and padding <= min(kh, kw) - 1 and kh == kw:
            # stride-1 input gradient is a full correlation with the flipped kernel
            gcols = _im2col(_pad(g, kh - 1 - padding), kh, kw, 1, h, wd)
            wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = (wflip @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        else:
            gx = _col2im(wmat.T @ gmat, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        if b is not None:
            return gx, gw, gmat.sum(axis=1)
        return gx, gw

    return out, vjp


def _k_conv_transpose2d(x, w, b=None, *, stride=1, padding=0):
    # weight layout (C_in, C_out, kh, kw); out = (n - 1) * s - 2p + k
    _check_conv("conv_transpose2d", x, w, b, stride, padding)
    n, c, h, wd = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError("conv_transpose2d: padding removes the whole output")
    xmat = x.transpose(1, 0, 2, 3).reshape(c, -1)
    wmat = w.reshape(c, -1)
    full = _col2im(wmat.T @ xmat, n, o, hf, wf, kh, kw, stride, h, wd)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)

    def vjp(g):
        gcols = _im2col(_pad(g, padding), kh, kw, stride, h, wd)
        gx = (wmat @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        gw = (xmat @ gcols.T).reshape(w.shape)
        if b is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return out, vjp


def _k_max_pool2d(x, *, kernel=2):
    # non-overlapping windows (stride == kernel); ties go to the first maximum in scan order
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    k = int(kernel)
    if h % k or w % k:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by {k}")
    blocks = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return out, vjp


def _k_upsample2d(x, *, factor=2):
    if x.ndim != 4:
        raise DimensionError(f"upsample2d: expected 4-d input, got {x.shape}")
    f = int(factor)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x, f, axis=2), f, axis=3)
    return out, lambda g: (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


PRIMITIVES = {
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "div": _k_div,
    "scale": _k_scale,
    "matmul": _k_matmul,
    "conv2d": _k_conv2d,
    "conv_transpose2d": _k_conv_transpose2d,
    "relu": _k_relu,
    "sigmoid": _k_sigmoid,
    "exp": _k_exp,
    "log": _k_log,
    "square": _k_square,
    "sum": _k_sum,
    "mean": _k_mean,
    "reshape": _k_reshape,
    "concat": _k_concat,
    "max_pool2d": _k_max_pool2d,
    "upsample2d": _k_upsample2d,
}


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``op`` and record it on the active tape if needed."""
    try:
        kernel = PRIMITIVES[op]
    except KeyError:
        raise UnsupportedOpError(f"unsupported primitive {op!r}") from None
    inputs = tuple(inputs)
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{op}: inputs must be Tensors, got {type(t).__name__}")
    out_arr, vjp = kernel(*(t.values for t in inputs), **attrs)
    needs_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    record = needs_grad and tape is not None
    out = Tensor._wrap(out_arr, requires_grad=record)
    if record:
        tape.record(Node(op, inputs, out, vjp))
    return out


# --------------------------------------------------------------------------
# functional wrappers


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def scale(a, factor: float):
    return apply_primitive("scale", (a,), factor=float(factor))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv2d", inputs, stride=stride, padding=padding)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0):
    inputs = (x, w) if b is None else (x, w, b)
    return apply_primitive("conv_transpose2d", inputs, stride=stride, padding=padding)


def relu(x):
    return apply_primitive("relu", (x,))


def sigmoid(x):
    return apply_primitive("sigmoid", (x,))


def exp(x):
    return apply_primitive("exp", (x,))


def log(x):
    return apply_primitive("log", (x,))


def square(x):
    return apply_primitive("square", (x,))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    return apply_primitive("sum", (x,), axis=axis)


def mean(x, axis=None):
    return apply_primitive("mean", (x,), axis=axis)


def reshape(x, shape):
    return apply_primitive("reshape", (x,), shape=tuple(shape))


def concat(tensors, axis: int = 1):
    return apply_primitive("concat", tuple(tensors), axis=axis)


def max_pool2d(x, kernel: int = 2):
    return apply_primitive("max_pool2d", (x,), kernel=kernel)


def upsample2d(x, factor: int = 2):
    return apply_primitive("upsample2d", (x,), factor=factor)


# --------------------------------------------------------------------------


def value_and_grad(f: Callable[[Tensor], Tensor], x) -> tuple:
    """Return ``(f(x), df/dx)`` for a scalar-valued ``f``."""
    leaf = Tensor(x.values if isinstance(x, Tensor) else x, requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if out.size != 1:
        raise ContractViolation(f"function must be scalar-valued, got shape {out.shape}")
    if not out.requires_grad:
        return out.item(), np.zeros(leaf.shape)
    tape.backward(out)
    return out.item(), leaf.grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max elementwise relative error between tape gradient and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-12)``.
    """
    if h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    _, analytic = value_and_grad(f, base)

    def f_at(arr):
        out = f(Tensor(arr))
        if out.size != 1:
            raise ContractViolation(f"function must be scalar-valued, got shape {out.shape}")
        return out.item()

    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f_at(base)
        flat[i] = orig - h
        fm = f_at(base)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    analytic = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
