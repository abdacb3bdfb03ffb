"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent. A graph is
built fresh on every forward pass and discarded after
:func:`compute_gradients` walks it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import ConsistencyError, DimensionError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters; everything
    else is either a constant or an intermediate result.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        _parents: tuple["Tensor", ...] = (),
        _backward: BackwardFn | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        other = _wrap(other)
        if other.ndim_is_scalar():
            return scale(self, float(other.data))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def ndim_is_scalar(self) -> bool:
        return self.data.ndim == 0 and not self.requires_grad and self.is_leaf

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def dropout(a: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity in eval mode, ``mask / (1 - rate)`` in training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


# ------------------------------------------------------------------ reductions


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        return _node(
            np.asarray(a.data.mean()),
            (a,),
            lambda g: (np.full(a.shape, float(g) / n),),
        )
    n = a.shape[axis]

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _node(a.data.mean(axis=axis), (a,), back)


def sum_squares(a: Tensor) -> Tensor:
    return _node(np.asarray(np.sum(a.data * a.data)), (a,), lambda g: (2.0 * g * a.data,))


# --------------------------------------------------------------------- linear


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not chain")
    out = a.data @ b.data

    def back(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=axis)
    return _node(out, parts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def broadcast_rows(v: Tensor, rows: int) -> Tensor:
    """Repeat a 1-D tensor as ``rows`` identical rows."""
    out = np.broadcast_to(v.data, (rows,) + v.shape).copy()
    return _node(out, (v,), lambda g: (g.sum(axis=0),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate their gradients."""
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0 or a.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), back)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot shapes differ: {a.shape} vs {b.shape}")
    return _node(
        (a.data * b.data).sum(axis=-1),
        (a, b),
        lambda g: (g[..., None] * b.data, g[..., None] * a.data),
    )


def binary_cross_entropy(prob: Tensor, labels, eps: float = 1e-12) -> Tensor:
    """Mean of ``-[y log p + (1-y) log(1-p)]`` with ``p`` clamped to ``[eps, 1-eps]``.

    The backward pass uses the clamped probability, so saturated predictions
    still receive a finite corrective gradient.
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != prob.shape:
        raise ValueError(f"labels of shape {y.shape} do not match predictions {prob.shape}")
    n = y.size
    p = np.clip(prob.data, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return _node(
        np.asarray(loss),
        (prob,),
        lambda g: (float(g) * (p - y) / (p * (1.0 - p)) / n,),
    )


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def compute_gradients(
    loss: Tensor, params: Mapping[str, Tensor] | Iterable
) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to each named parameter.

    ``params`` is a name -> Tensor map or an iterable of objects with a
    ``tensors`` map (param groups). Parameters the loss does not depend on
    receive exact zeros.
    """
    if not isinstance(params, Mapping):
        merged: dict[str, Tensor] = {}
        for group in params:
            merged.update(group.tensors)
        params = merged
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss {float(loss.data)!r}; step aborted")

    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)

    result = {}
    for name, tensor in params.items():
        if not isinstance(tensor, Tensor):
            raise ConsistencyError(f"parameter {name!r} is not a Tensor")
        g = grads.get(id(tensor))
        result[name] = np.zeros_like(tensor.data) if g is None else g.reshape(tensor.shape)
    return result
