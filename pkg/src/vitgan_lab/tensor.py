"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` on the active :class:`Tape`
when at least one input requires gradients.  A node carries two closures:

* ``backward(g)`` -- vector-Jacobian product, returns one gradient per input
  (``None`` for inputs that receive nothing);
* ``jvp(ts)`` -- Jacobian-vector product given one tangent per input
  (``None`` meaning zero tangent).

Replaying the tape in reverse gives gradients; replaying it forward with
tangents gives directional derivatives.  Both are exact, no finite
differences involved.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "tensor",
    "no_grad",
    "current_tape",
    "backward",
    "gradcheck",
    "GradcheckReport",
    "set_default_dtype",
    "get_default_dtype",
]

_DEFAULT_DTYPE = np.dtype(np.float32)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


# ---------------------------------------------------------------------------
# tape


class Node:
    __slots__ = ("kind", "inputs", "out", "backward", "jvp")

    def __init__(self, kind, inputs, out, backward, jvp):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.jvp = jvp


class Tape:
    """Append-only record of differentiable ops.

    Use as a context manager to make it the active tape; leaving the
    context clears it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self
        self.clear()
        return False

    def backward(self, loss: "Tensor", upstream=None, wrt: Iterable["Tensor"] | None = None):
        """Gradients of ``loss`` w.r.t. every leaf reachable on this tape.

        ``upstream`` defaults to 1 and must be given for non-scalar ``loss``
        (that makes this a general vector-Jacobian product).  Returns a dict
        keyed by leaf tensor.  Leaves that appear on the tape (or in ``wrt``)
        but do not influence ``loss`` get zero arrays.
        """
        if upstream is None:
            if loss.data.size != 1:
                raise ShapeError("backward of non-scalar loss", loss.shape)
            upstream = np.ones_like(loss.data)
        else:
            upstream = np.asarray(upstream, dtype=loss.data.dtype)
            if upstream.shape != loss.shape:
                raise ShapeError("backward upstream", upstream.shape, loss.shape)
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tracked tensor")

        grads: dict[int, np.ndarray] = {id(loss): upstream}
        owners: dict[int, Tensor] = {id(loss): loss}
        seen_leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            owners.pop(id(node.out), None)
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if not inp.requires_grad:
                    continue
                if ig is None:
                    if inp._node is None:
                        seen_leaves.setdefault(id(inp), inp)
                    continue
                key = id(inp)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = ig
                    owners[key] = inp
                else:
                    grads[key] = prev + ig
        out = {owners[k]: g for k, g in grads.items()}
        extra = list(seen_leaves.values()) + list(wrt or [])
        for leaf in extra:
            if leaf not in out:
                out[leaf] = np.zeros_like(leaf.data)
        # leaves recorded on the tape but never reached
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._node is None and inp not in out:
                    out[inp] = np.zeros_like(inp.data)
        return out

    def jvp(self, tangents: dict["Tensor", np.ndarray], outputs: Sequence["Tensor"]):
        """Forward replay: directional derivative of ``outputs`` along ``tangents``."""
        tan: dict[int, np.ndarray] = {id(t): np.asarray(v, dtype=t.data.dtype) for t, v in tangents.items()}
        for node in self.nodes:
            ins = [tan.get(id(i)) for i in node.inputs]
            if all(t is None for t in ins):
                continue
            tan[id(node.out)] = node.jvp(ins)
        return [tan.get(id(o), np.zeros_like(o.data)) for o in outputs]


_TAPES: list[Tape] = [Tape()]
_RECORDING = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    _RECORDING.append(False)
    try:
        yield
    finally:
        _RECORDING.pop()


def backward(loss, upstream=None, wrt=None):
    return current_tape().backward(loss, upstream, wrt)


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if keep else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._node = None

    # -- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms
    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(kind, data, inputs, bwd, jvp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._node = None
    out.requires_grad = False
    if _RECORDING[-1]:
        for inp in inputs:
            if inp.requires_grad:
                out.requires_grad = True
                node = Node(kind, inputs, out, bwd, jvp)
                out._node = node
                _TAPES[-1].nodes.append(node)
                break
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead and g.shape[nlead:] == tuple(shape):
        # common bias case: collapse leading axes into one reduction
        return g.reshape((-1,) + tuple(shape)).sum(axis=0)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    def jvp(ts):
        ta, tb = ts
        r = np.zeros(out.shape, out.dtype)
        if ta is not None:
            r = r + ta
        if tb is not None:
            r = r + tb
        return r

    out = _emit("add", a.data + b.data, (a, b), bwd, jvp)
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    def jvp(ts):
        ta, tb = ts
        r = np.zeros(out.shape, out.dtype)
        if ta is not None:
            r = r + ta
        if tb is not None:
            r = r - tb
        return r

    out = _emit("sub", a.data - b.data, (a, b), bwd, jvp)
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _bshape("mul", a, b)
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    def jvp(ts):
        ta, tb = ts
        r = np.zeros(out.shape, out.dtype)
        if ta is not None:
            r = r + ta * bd
        if tb is not None:
            r = r + ad * tb
        return r

    out = _emit("mul", ad * bd, (a, b), bwd, jvp)
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    _bshape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        res = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * res / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    def jvp(ts):
        ta, tb = ts
        r = np.zeros(out.shape, out.dtype)
        if ta is not None:
            r = r + ta / bd
        if tb is not None:
            r = r - tb * res / bd
        return r

    out = _emit("div", res, (a, b), bwd, jvp)
    return out


# ---------------------------------------------------------------------------
# elementwise unary


def _unary(kind, x, fwd, deriv):
    """Elementwise op whose derivative is ``deriv(x_data, y_data)``."""
    x = _lift(x)
    y = fwd(x.data)
    cache = []

    def d():
        if not cache:
            cache.append(deriv(x.data, y))
        return cache[0]

    def bwd(g):
        return (g * d(),)

    def jvp(ts):
        return ts[0] * d()

    return _emit(kind, y, (x,), bwd, jvp)


def neg(x):
    x = _lift(x)
    return _emit("neg", -x.data, (x,), lambda g: (-g,), lambda ts: -ts[0])


def scale(x, c: float):
    """Multiply by a Python constant (no gradient w.r.t. ``c``)."""
    x = _lift(x)
    c = float(c)
    return _emit("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,), lambda ts: ts[0] * c)


def exp(x):
    return _unary("exp", x, np.exp, lambda a, y: y)


def log(x):
    def f(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a)

    return _unary("log", x, f, lambda a, y: 1.0 / a)


def sin(x):
    return _unary("sin", x, np.sin, lambda a, y: np.cos(a))


def cos(x):
    return _unary("cos", x, np.cos, lambda a, y: -np.sin(a))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda a, y: 1.0 - y * y)


def relu(x):
    return _unary("relu", x, lambda a: np.maximum(a, 0), lambda a, y: (a > 0).astype(a.dtype))


_GELU_C = math.sqrt(2.0 / math.pi)


# numpy's a**3 is ~100x slower than a*a*a on float32


def _gelu_f(a):
    return 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * (a * a * a))))


def _gelu_d(a, y):
    a2 = a * a
    th = np.tanh(_GELU_C * (a + 0.044715 * a2 * a))
    return 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * a2)


def gelu(x):
    """GELU, tanh approximation."""
    x = _lift(x)
    a = x.data
    a2 = a * a
    th = np.tanh(_GELU_C * (a + 0.044715 * a2 * a))
    y = 0.5 * a * (1.0 + th)
    cache = []

    def d():
        if not cache:
            cache.append(0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * a2))
        return cache[0]

    return _emit("gelu", y, (x,), lambda g: (g * d(),), lambda ts: ts[0] * d())


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def softplus(x):
    return _unary("softplus", x, lambda a: np.logaddexp(0, a).astype(a.dtype), lambda a, y: _sigmoid(a))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda a, y: y * (1 - y))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda a, y: 0.5 / y)


def power(x, p: float):
    p = float(p)
    if p == -0.5:
        return _unary("pow", x, lambda a: 1.0 / np.sqrt(a), lambda a, y: -0.5 * y * y * y)
    if p == 2.0:
        return square(x)
    return _unary("pow", x, lambda a: np.power(a, p), lambda a, y: p * np.power(a, p - 1))


def square(x):
    return _unary("square", x, lambda a: a * a, lambda a, y: 2 * a)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sin": sin,
    "tanh": tanh,
    "relu": relu,
    "gelu": gelu,
    "softplus": softplus,
    "scale": scale,
}


def elementwise(op_kind: str, a, b=None):
    """Dispatch by name; ``scale`` takes the constant as ``b``."""
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("add", "sub", "mul", "div", "scale"):
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return fn(a, b)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    def jvp(ts):
        ta, tb = ts
        r = 0
        if ta is not None:
            r = r + ta @ bd
        if tb is not None:
            r = r + ad @ tb
        return np.broadcast_to(r, out.shape).copy() if np.shape(r) != out.shape else r

    out = _emit("matmul", ad @ bd, (a, b), bwd, jvp)
    return out


def softmax(x, axis=-1) -> Tensor:
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis}", x.shape)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def lin(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _emit("softmax", s, (x,), lambda g: (lin(g),), lambda ts: lin(ts[0]))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"reduce axis {a}", (ndim,))
        out.append(a % ndim)
    return tuple(sorted(out))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    ax = _norm_axis(axis, x.ndim)
    shape = x.shape
    kshape = tuple(1 if i in ax else n for i, n in enumerate(shape))

    def lin_b(g):
        return np.broadcast_to(g.reshape(kshape), shape).copy()

    def lin_f(t):
        return t.sum(axis=ax, keepdims=keepdims)

    return _emit("sum", x.data.sum(axis=ax, keepdims=keepdims), (x,), lambda g: (lin_b(g),), lambda ts: lin_f(ts[0]))


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = _lift(x)
    ax = _norm_axis(axis, x.ndim)
    n = 1
    for i in ax:
        n *= x.shape[i]
    return scale(reduce_sum(x, ax, keepdims), 1.0 / n)


def reduce_max(x, axis=None, keepdims=False) -> Tensor:
    """Max reduction; gradient routes to the lowest index among ties."""
    x = _lift(x)
    if axis is None:
        flat = x.data.reshape(-1)
        i = int(np.argmax(flat))
        shape = x.shape

        def bwd(g):
            r = np.zeros(flat.shape, x.dtype)
            r[i] = g.reshape(-1)[0]
            return (r.reshape(shape),)

        def jvp(ts):
            v = ts[0].reshape(-1)[i]
            return np.asarray(v, x.dtype).reshape(out.shape)

        out = _emit("max", flat[i].reshape((1,) * x.ndim if keepdims else ()), (x,), bwd, jvp)
        return out
    if not isinstance(axis, int):
        raise ValueError("reduce_max supports a single axis or None")
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    val = np.take_along_axis(x.data, idx, ax)

    def bwd(g):
        r = np.zeros_like(x.data)
        np.put_along_axis(r, idx, g.reshape(val.shape), ax)
        return (r,)

    def jvp(ts):
        t = np.take_along_axis(ts[0], idx, ax)
        return t if keepdims else t.squeeze(ax)

    return _emit("max", val if keepdims else val.squeeze(ax), (x,), bwd, jvp)


REDUCTIONS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(x, kind: str, axis=None, keepdims=False) -> Tensor:
    try:
        fn = REDUCTIONS[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None
    return fn(x, axis, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, shape) from None
    return _emit("reshape", y, (x,), lambda g: (g.reshape(src),), lambda ts: ts[0].reshape(y.shape))


def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(
        "transpose",
        x.data.transpose(axes),
        (x,),
        lambda g: (g.transpose(inv),),
        lambda ts: ts[0].transpose(axes),
    )


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Tensor:
    x = _lift(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    basic = _is_basic(idx)
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        r = np.zeros(shape, dtype)
        if basic:
            r[idx] = g
        else:
            np.add.at(r, idx, g)
        return (r,)

    return _emit("getitem", x.data[idx], (x,), bwd, lambda ts: ts[0][idx])


def take(x, idx, axis=-1) -> Tensor:
    """Gather along the last axis: ``x[..., idx]`` with any index shape."""
    x = _lift(x)
    if axis % x.ndim != x.ndim - 1:
        raise ValueError("take only gathers along the last axis")
    idx = np.asarray(idx, dtype=np.intp)
    flat = idx.reshape(-1)
    n = x.shape[-1]
    lead = x.shape[:-1]
    unique = np.unique(flat).size == flat.size

    def bwd(g):
        g2 = g.reshape(lead + (flat.size,))
        if unique:
            r = np.zeros(x.shape, x.dtype)
            r[..., flat] = g2
            return (r,)
        r = np.zeros((n,) + lead, x.dtype)
        np.add.at(r, flat, np.moveaxis(g2, -1, 0))
        return (np.moveaxis(r, 0, -1),)

    return _emit("take", x.data[..., idx], (x,), bwd, lambda ts: ts[0][..., idx])


def concat(xs: Sequence, axis=0) -> Tensor:
    xs = [_lift(x) for x in xs]
    ref = xs[0]
    nd = ref.ndim
    ax = axis % nd
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != ref.shape[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", ref.shape, x.shape)
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, sizes, axis=ax))

    def jvp(ts):
        return np.concatenate([t if t is not None else np.zeros_like(x.data) for t, x in zip(ts, xs)], axis=ax)

    return _emit("concat", np.concatenate([x.data for x in xs], axis=ax), tuple(xs), bwd, jvp)


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    src = x.shape
    try:
        y = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", src, shape) from None

    def jvp(ts):
        return np.broadcast_to(ts[0], shape).copy()

    return _emit("broadcast", y.copy(), (x,), lambda g: (_unbroadcast(g, src),), jvp)


# ---------------------------------------------------------------------------
# fused normalization


def standardize(x, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis, population variance."""
    x = _lift(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    y = xc * r

    # the Jacobian is symmetric, so one map serves both directions
    def lin(g):
        return r * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))

    return _emit("standardize", y, (x,), lambda g: (lin(g),), lambda ts: lin(ts[0]))


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_err: float
    max_abs_err: float
    tol: float
    rel_errs: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


def _as_list(x):
    if isinstance(x, Tensor):
        return [x], True
    return list(x), False


def gradcheck(f: Callable, x, h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-8) -> GradcheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is a tensor or a sequence of tensors (passed positionally).  The
    error per coordinate is relative, falling back to absolute when both
    values are below ``floor`` in magnitude.
    """
    xs, single = _as_list(x)
    leaves = [Tensor(np.array(t.data, copy=True), requires_grad=True) for t in xs]

    with Tape() as tape:
        y = f(*leaves)
        if not isinstance(y, Tensor) or y.size != 1:
            raise ShapeError("gradcheck needs scalar f", getattr(y, "shape", ()))
        grads = tape.backward(y, wrt=leaves)
    analytic = [grads[leaf] for leaf in leaves]

    rel_errs, abs_errs = [], []
    with no_grad():
        for leaf, ga in zip(leaves, analytic):
            flat = leaf.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*leaves).data.reshape(-1)[0])
                flat[i] = orig - h
                fm = float(f(*leaves).data.reshape(-1)[0])
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = float(gflat[i])
                diff = abs(a - num)
                mag = max(abs(a), abs(num))
                rel_errs.append(diff / mag if mag > floor else diff)
                abs_errs.append(diff)
    max_rel = max(rel_errs) if rel_errs else 0.0
    max_abs = max(abs_errs) if abs_errs else 0.0
    ok = bool(np.isfinite(max_rel) and max_rel <= tol)
    return GradcheckReport(ok, max_rel, max_abs, tol, rel_errs)
