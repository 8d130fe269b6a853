"""Dense N-d arrays with reverse-mode differentiation.

A deliberately small autograd: numpy arrays carry the values, each derived
tensor remembers its parents and a closure mapping the output gradient to
parent gradients. ``backward`` orders the recorded graph into a tape and
walks it once in reverse.
"""
from __future__ import annotations

import builtins
import contextlib
import os

import numpy as np

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "create", "tensor", "elementwise",
    "add", "sub", "mul", "div", "neg", "scale", "leaky_relu", "sigmoid",
    "exp", "log", "matmul", "softmax", "log_softmax", "reduce", "sum", "mean",
    "amax", "reshape", "transpose", "concat", "global_average_pool",
    "backward", "finite_difference_check", "no_grad", "set_debug",
    "broadcast_shape", "ravel_index", "unravel_index",
]

DIV_EPS = 1e-30


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_state = {
    "debug": os.environ.get("ODSEG_DEBUG", "") not in ("", "0"),
    "grad": True,
}


def set_debug(flag: bool) -> None:
    """Toggle the NaN/Inf scan run after every operation."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce("mean", self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def transpose(self, axes=None):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def create(shape, fill=None, data=None, dtype=np.float32, requires_grad=False) -> Tensor:
    """Build a tensor from a fill value or a flat row-major sequence."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ValueError("shape must have at least one extent")
    if any(s <= 0 for s in shape):
        raise ValueError(f"extents must be positive, got {shape}")
    if data is not None:
        flat = np.asarray(data, dtype=dtype).reshape(-1)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"data length {flat.size} does not match shape {shape}")
        return Tensor(flat.reshape(shape), requires_grad=requires_grad)
    return Tensor(np.full(shape, 0.0 if fill is None else fill, dtype=dtype),
                  requires_grad=requires_grad)


def _lift(value, like):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like.dtype)
    if arr.ndim == 0:
        arr = np.full((1,) * like.ndim, arr, dtype=like.dtype)
    return Tensor(arr)


def _check(arr, op):
    if _state["debug"] and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def from_op(data, parents, backward_fn, op="op") -> Tensor:
    """Wrap an op result; ``backward_fn(g)`` returns one gradient per parent (or None)."""
    _check(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.op = op
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- indexing

def _strides(shape):
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return strides


def ravel_index(coord, shape) -> int:
    """Row-major linear offset of a coordinate."""
    if len(coord) != len(shape) or any(not 0 <= c < s for c, s in zip(coord, shape)):
        raise IndexError(f"coordinate {coord} out of range for {shape}")
    return builtins.sum(c * s for c, s in zip(coord, _strides(shape)))


def unravel_index(index, shape) -> tuple:
    if not 0 <= index < int(np.prod(shape)):
        raise IndexError(f"index {index} out of range for {shape}")
    coord = []
    for s in _strides(shape):
        coord.append(index // s)
        index %= s
    return tuple(coord)


# ------------------------------------------------------------- elementwise

def broadcast_shape(a, b):
    """Result shape for two equal-rank shapes where mismatched extents are 1."""
    if len(a) != len(b):
        raise ValueError(f"rank mismatch {a} vs {b} (no rank promotion)")
    out = []
    for x, y in zip(a, b):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"incompatible shapes {a} and {b}")
        out.append(max(x, y))
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return from_op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return from_op(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    if np.any(np.abs(b.data) < DIV_EPS):
        raise ZeroDivisionError("divisor magnitude below 1e-30")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return from_op(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = a.dtype.type(slope)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope)
    return from_op(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "leaky_relu": leaky_relu, "scale": scale,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None, **params) -> Tensor:
    """Dispatch by name: add, sub, mul, div, leaky_relu(slope), sigmoid, scale(c)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("add", "sub", "mul", "div"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn(a, b)
    if op == "scale":
        return fn(a, params["c"])
    if op == "leaky_relu":
        return fn(a, params.get("slope", 0.01))
    return fn(a)


# ----------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return from_op(a.data @ b.data, (a, b), bw, "matmul")


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = x.data / x.dtype.type(temperature)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner) / x.dtype.type(temperature),)
    return from_op(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return from_op(out, (x,), bw, "log_softmax")


def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"repeated axes {axes}")
    return tuple(sorted(norm))


def reduce(op: str, x: Tensor, axes=None, keepdims=False) -> Tensor:
    """Sum, mean or max over ``axes``; an empty axis set returns ``x`` unchanged."""
    axes = _norm_axes(axes, x.ndim)
    if not axes:
        return x
    if op == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(g, x.shape).copy(),)
    elif op == "mean":
        count = int(np.prod([x.shape[a] for a in axes]))
        out = x.data.sum(axis=axes, keepdims=keepdims) / x.dtype.type(count)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(g / x.dtype.type(count), x.shape).copy(),)
    elif op == "max":
        kept = x.data.max(axis=axes, keepdims=True)
        out = kept if keepdims else kept.reshape([s for i, s in enumerate(x.shape) if i not in axes])

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            hit = x.data == kept
            # ties share the gradient
            return (hit * g / hit.sum(axis=axes, keepdims=True),)
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return from_op(np.asarray(out, dtype=x.dtype), (x,), bw, op)


def sum(x, axes=None, keepdims=False):  # noqa: A001
    return reduce("sum", x, axes, keepdims)


def mean(x, axes=None, keepdims=False):
    return reduce("mean", x, axes, keepdims)


def amax(x, axes=None, keepdims=False):
    return reduce("max", x, axes, keepdims)


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of a ``(c, d, h, w)`` tensor."""
    if x.ndim != 4:
        raise ValueError("global_average_pool expects (c, d, h, w)")
    return reduce("mean", x, (1, 2, 3))


# ----------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    return from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return from_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),), "transpose")


def concat(xs, axis: int = 0) -> Tensor:
    xs = list(xs)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(xs)))
    return from_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


# ---------------------------------------------------------------- backward

class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    def __init__(self, nodes):
        self.nodes = list(nodes)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order, state = [], {}
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise RuntimeError("cycle in recorded graph")
            state[key] = 1
            stack.append((node, True))
            for p in node._parents:
                if state.get(id(p)) != 2:
                    if state.get(id(p)) == 1:
                        raise RuntimeError("cycle in recorded graph")
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if root.size != 1:
        raise ValueError("backward needs a scalar root")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root) if tape is None else tape
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def finite_difference_check(f, x: Tensor, h: float = 1e-5, n_samples: int | None = 100,
                            rng=None, floor: float = 1e-8, return_errors: bool = False):
    """Compare ``x.grad`` from ``backward(f(x))`` with central differences.

    Returns ``(max_rel, median_rel)`` over the sampled coordinates, or the raw
    per-coordinate errors with ``return_errors``. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    if x.dtype != np.float64:
        raise TypeError("finite-difference checks need double precision")
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    if n_samples is None or n_samples >= flat.size:
        idx = np.arange(flat.size)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(flat.size, size=n_samples, replace=False)
    errs = []
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            errs.append(abs(a - num) / max(abs(a), abs(num), floor))
    errs = np.asarray(errs)
    if return_errors:
        return errs
    return float(errs.max()), float(np.median(errs))
