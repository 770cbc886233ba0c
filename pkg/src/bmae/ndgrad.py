"""Minimal dense-tensor engine with reverse-mode differentiation.

Only the operations the probe heads need are provided. Values are float64
numpy arrays of at most four axes; gradients are accumulated into leaves
that were created with ``requires_grad=True``.

Operands of ``add``/``sub``/``mul`` must have identical shapes (a python
scalar is also accepted). Any other alignment goes through the explicit
:func:`broadcast_to` op, so shape mistakes surface as :class:`ShapeError`
instead of silently broadcasting.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from . import kernels

MAX_AXES = 4

_counter = itertools.count()


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class GraphError(RuntimeError):
    """Backward was called on something it cannot run on."""


def _shape_error(op: str, a, b) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_consumed", "argmax")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"tensor has {arr.ndim} axes, at most {MAX_AXES} supported")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)
        self._consumed = False
        self.argmax = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        if data.ndim > MAX_AXES:
            raise ShapeError(f"result has {data.ndim} axes, at most {MAX_AXES} supported")
        out.data = data
        out._parents = tuple(p for p in parents if p.requires_grad)
        out.requires_grad = bool(out._parents)
        out.grad = None
        out._backward = backward if out.requires_grad else None
        out._id = next(_counter)
        out._consumed = False
        out.argmax = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that is not attached to any graph")

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(node._parents)

        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        # Creation order is a valid topological order, so descending ids
        # visit every consumer before its producers.
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node.is_leaf():
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg
            node._consumed = True

        # Free the graph; leaves keep their accumulated grads.
        for node in nodes.values():
            if not node.is_leaf():
                node._parents = ()
                node._backward = None
                node.requires_grad = False
                node._consumed = True


def _as_tensor(x, like_shape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like_shape, float(x)) if like_shape is not None else x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _shape_error(op, a.shape, b.shape)


def _grads_for(parents_all: Sequence[Tensor], grads: Sequence[np.ndarray | None]):
    """Keep only the gradients of parents that participate in the graph."""
    return [g for p, g in zip(parents_all, grads) if p.requires_grad]


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_add(a, float(b))
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: _grads_for((a, b), (g, g)))


def _scalar_add(a: Tensor, c: float) -> Tensor:
    return Tensor._from_op(a.data + c, (a,), lambda g: (g,))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _scalar_add(a, -float(b))
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: _grads_for((a, b), (g, -g)))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape("mul", a, b)
    return Tensor._from_op(
        a.data * b.data, (a, b), lambda g: _grads_for((a, b), (g * b.data, g * a.data))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return Tensor._from_op(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so neither branch overflows exp.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log. With ``floor > 0`` inputs are clamped from below first
    and the clamped entries receive zero gradient."""
    x = a.data
    if floor > 0.0:
        live = x > floor
        xc = np.maximum(x, floor)  # NaN stays NaN
        return Tensor._from_op(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),))
    with np.errstate(divide="ignore"):
        out = np.log(x)
    return Tensor._from_op(out, (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._from_op(x * x, (a,), lambda g: (2.0 * g * x,))


def power(a: Tensor, exponent: float) -> Tensor:
    """``a ** exponent`` for a constant exponent; inputs must be >= 0 unless
    the exponent is integral."""
    p = float(exponent)
    x = a.data
    if p == 0.0:
        return Tensor._from_op(np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))
    out = x**p
    if p == 1.0:
        return Tensor._from_op(out.copy(), (a,), lambda g: (g,))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * x ** (p - 1.0)
        if p > 1.0:
            d = np.where(x == 0.0, 0.0, d)
        return (g * d,)

    return Tensor._from_op(out, (a,), back)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-axis tensor")
    return axis % ndim


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        shape = a.shape
        return Tensor._from_op(
            np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
        )
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    return Tensor._from_op(
        a.data.sum(axis=ax),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[_norm_axis(axis, a.ndim)]
    return scale(sum(a, axis), 1.0 / n)


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001 - mirrors numpy
    """Max over ``axis``; the result carries ``argmax`` (lowest index on ties)
    and the whole gradient is routed to that element."""
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = shape[ax]
    pre = int(np.prod(shape[:ax], dtype=np.int64))
    post = int(np.prod(shape[ax + 1 :], dtype=np.int64))
    out_shape = shape[:ax] + shape[ax + 1 :]
    vals, idx = kernels.argmax_mid(a.data.reshape(pre, n, post))

    def back(g):
        return (kernels.scatter_mid(idx, np.asarray(g).reshape(pre, post), n).reshape(shape),)

    res = Tensor._from_op(vals.reshape(out_shape), (a,), back)
    res.argmax = idx.reshape(out_shape)
    return res


def normalize(a: Tensor) -> Tensor:
    """Unit vectors along the last axis; the zero vector maps to zero.

    No additive epsilon, so the result is invariant to positive rescaling.
    """
    y, n = kernels.unit_rows(a.data)
    inv = np.divide(1.0, n, out=np.zeros_like(n), where=n > 0)

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) * inv,)

    return Tensor._from_op(y, (a,), back)


def l2norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis (gradient 0 at the zero vector)."""
    y, n = kernels.unit_rows(a.data)
    return Tensor._from_op(n[..., 0], (a,), lambda g: (np.expand_dims(g, -1) * y,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return Tensor._from_op(y, (a,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),))


# -- structure ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy matmul over 1-4 axis operands with matching inner dims.
    Leading (batch) axes must be equal, or ``b`` must be a plain matrix."""
    if a.ndim < 1 or b.ndim < 1:
        raise _shape_error("matmul", a.shape, b.shape)
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise _shape_error("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    A, B = a.data, b.data

    def back(g):
        if B.ndim == 1:
            ga = np.multiply.outer(g, B) if A.ndim > 1 else g * B
            gb = (A * g[..., None]).reshape(-1, k_a).sum(axis=0) if A.ndim > 1 else g * A
            return _grads_for((a, b), (ga, gb))
        if A.ndim == 1:
            ga = (B * g[..., None, :]).sum(axis=-1)
            gb = np.multiply.outer(A, g)
            return _grads_for((a, b), (ga, gb))
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if B.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *B.shape).sum(axis=0)
        return _grads_for((a, b), (ga, gb))

    return Tensor._from_op(np.matmul(A, B), (a, b), back)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 axes, got shape {a.shape}")
    return Tensor._from_op(np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise _shape_error("reshape", src, shape) from None
    return Tensor._from_op(out.copy(), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ax = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise _shape_error("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return _grads_for(tensors, np.split(g, cuts, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` over new leading axes and/or size-1 axes (numpy rules)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise _shape_error("broadcast_to", a.shape, shape) from None
    src = a.shape
    lead = len(shape) - len(src)
    keep = tuple(i for i, s in enumerate(src) if s == 1 and shape[lead + i] != 1)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g.reshape(src),)

    return Tensor._from_op(out.copy(), (a,), back)


FORWARD_OPS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "sigmoid",
    "log",
    "square",
    "power",
    "sum",
    "mean",
    "max",
    "l2norm",
    "normalize",
    "softmax",
    "concat",
    "broadcast_to",
    "transpose",
    "reshape",
)


def forward_ops() -> tuple[str, ...]:
    return FORWARD_OPS


def cosine(p: Tensor, h: Tensor) -> Tensor:
    """Cosine similarity along the last axis (0 against a zero vector)."""
    return sum(mul(normalize(p), normalize(h)), axis=-1)


def grad_check(fn: Callable[[Tensor], Tensor], input: Tensor | np.ndarray, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    x0 = np.array(input.data if isinstance(input, Tensor) else input, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = fn(leaf)
    out.backward()
    analytic = leaf.grad.reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    if np.any(np.isnan(err)):
        return float("nan")
    return float(err.max()) if err.size else 0.0
