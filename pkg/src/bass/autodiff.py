"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a node on a thread-local tape when at
least one of its inputs requires a gradient. :func:`backward` walks the tape
in exact reverse creation order, accumulates gradients into leaf tensors and
clears the tape.

Broadcasting is deliberately limited to scalars; alignment of shapes is
explicit through :func:`concat`, :func:`slice`, :func:`reshape` and
:func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "make_tensor",
    "as_tensor",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "clear_tape",
    "tape_size",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "relu",
    "exp",
    "log",
    "matmul",
    "transpose",
    "reshape",
    "softmax",
    "log_softmax",
    "concat",
    "slice",
    "sum",
    "mean",
    "add_bias",
    "embedding",
    "layer_norm_op",
    "backward",
    "finite_difference_grad",
]


class TapeError(RuntimeError):
    """Raised when backward is misused (empty tape, non-scalar loss)."""


class _State(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (e.g. to float64 for gradient checks)."""
    old = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    old = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


def clear_tape() -> None:
    _state.nodes.clear()


def tape_size() -> int:
    return len(_state.nodes)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tensor:
    """N-dimensional real array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            keep = isinstance(data, np.ndarray) and arr.dtype in (np.float32, np.float64)
            dtype = arr.dtype if keep else _state.dtype
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant copy with no tape linkage."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def make_tensor(shape: Sequence[int], values, requires_grad: bool = False, dtype=None) -> Tensor:
    """Build a tensor from a shape and flat row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError(f"shape extents must be positive, got {list(shape)}")
    flat = np.asarray(values).reshape(-1)
    expected = int(np.prod(shape)) if shape else 1
    if flat.size != expected:
        raise ValueError(
            f"shape {list(shape)} needs {expected} values but {flat.size} were given"
        )
    dtype = _state.dtype if dtype is None else dtype
    return Tensor(flat.reshape(shape), requires_grad=requires_grad, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _wrap(op: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        node = _Node(op, inputs, out, backward)
        out._node = node
        _state.nodes.append(node)
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = a.data.dtype.type(b)
        return _wrap("add", a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same("add", a, b)
    return _wrap("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        c = a.data.dtype.type(b)
        return _wrap("sub", a.data - c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same("sub", a, b)
    return _wrap("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _wrap("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s) -> Tensor:
    """Multiply by a constant; ``s`` may also be a one-element tensor (learned scalar)."""
    a = as_tensor(a)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ValueError(f"scale: expected a one-element tensor, got shape {list(s.shape)}")
        ad, sv = a.data, s.data.reshape(-1)[0]

        def bw(g):
            return g * sv, np.array([np.sum(g * ad)], dtype=s.dtype).reshape(s.shape)

        return _wrap("scale", ad * sv, (a, s), bw)
    c = a.data.dtype.type(s)
    return _wrap("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _wrap("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _wrap("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: domain error, input contains non-positive values")
    ad = a.data
    return _wrap("log", np.log(ad), (a,), lambda g: (g / ad,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch to one of add, sub, mul, scale, relu, exp, log."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("relu", "exp", "log"):
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} needs a second operand")
    return fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    """``[m,k] @ [k,n]``, batched ``[h,m,k] @ [h,k,n]``, or ``[h,m,k] @ [k,n]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 2 and b.ndim == 3):
        raise ValueError(f"matmul: unsupported ranks {list(a.shape)} @ {list(b.shape)}")
    if a.shape[-1] != b.shape[-2] or (b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ValueError(f"matmul: dimension mismatch {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 3 and bd.ndim == 2:
            gb = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _wrap("matmul", ad @ bd, (a, b), bw)


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _wrap(
        "transpose",
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _wrap("reshape", a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(old),))


def _check_finite(op: str, x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise FloatingPointError(f"{op}: NaN in input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _wrap("softmax", s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite("log_softmax", x.data)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _wrap("log_softmax", out, (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ValueError(
                f"concat: incompatible shapes {list(ref.shape)} and {list(t.shape)} on axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        idx = [np.s_[:]] * g.ndim
        out = []
        for i in range(len(tensors)):
            idx[ax] = np.s_[bounds[i] : bounds[i + 1]]
            out.append(g[tuple(idx)])
        return tuple(out)

    return _wrap("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def slice(x, axis: int, start: int, end: int, step: int = 1) -> Tensor:  # noqa: A001
    """Take ``x[start:end:step]`` along ``axis``; bounds must lie within the extent."""
    x = as_tensor(x)
    ax = axis % x.ndim
    n = x.shape[ax]
    if not (0 <= start < end <= n) or step < 1:
        raise IndexError(f"slice [{start}:{end}:{step}] out of bounds for extent {n} on axis {axis}")
    idx = [np.s_[:]] * x.ndim
    idx[ax] = np.s_[start:end:step]
    idx = tuple(idx)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _wrap("slice", np.ascontiguousarray(x.data[idx]), (x,), bw)


def sum(x) -> Tensor:  # noqa: A001
    """Sum of all entries, shape ``[1]``."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    out = np.array([x.data.sum()], dtype=dtype)
    return _wrap("sum", out, (x,), lambda g: (np.full(shape, g[0], dtype=dtype),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    return scale(sum(x), 1.0 / x.size)


def add_bias(x, b) -> Tensor:
    """Add a ``[d]`` vector to every row of ``[..., d]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ValueError(f"add_bias: bias {list(b.shape)} does not match rows of {list(x.shape)}")
    lead = tuple(range(x.ndim - 1))
    return _wrap("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


def embedding(weight, ids) -> Tensor:
    """Gather rows of ``weight`` by integer ids."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ValueError("embedding: ids must be one-dimensional")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {weight.shape[0]})")
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _wrap("embedding", weight.data[ids], (weight,), bw)


def layer_norm_op(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization over the last axis followed by an affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape [{d}]")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _wrap("layer_norm", xhat * gd + beta.data, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> dict:
    """Backpropagate from a one-element loss.

    Gradients accumulate (``+=``) into ``.grad`` of every leaf tensor that
    requires one; leaves recorded on the tape but not reachable from ``loss``
    receive a zero gradient. The tape is cleared afterwards, so a second call
    without a new forward pass raises :class:`TapeError`.

    Returns a mapping from leaf tensor to its accumulated gradient.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    nodes = _state.nodes
    if not nodes or loss._node is None:
        raise TapeError("tape is empty; run a forward pass before calling backward")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    try:
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                for t in node.inputs:
                    if t.requires_grad and t._node is None:
                        leaves.setdefault(id(t), t)
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if not t.requires_grad:
                    continue
                if t._node is None:
                    leaves.setdefault(id(t), t)
                    t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    finally:
        nodes.clear()
    for t in leaves.values():
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return {t: t.grad for t in leaves.values()}


def finite_difference_grad(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, computed in float64."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    with precision(np.float64), no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(base.shape)

