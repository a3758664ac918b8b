"""Small define-by-run reverse-mode autodiff on top of numpy.

Every value is a :class:`DiffNode` holding float64 ``data`` and a ``grad``
buffer of the same shape.  Operations build the graph as they run; calling
:func:`backward` on a scalar node walks it in reverse topological order.

Batching follows numpy: matmul broadcasts over leading dimensions and the
elementwise ops broadcast, with gradients summed back to the input shape.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateError, DivergenceError, EmptyInputError, RankError, ShapeError

EPS_NORM = 1e-8

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class DiffNode:
    __slots__ = ("data", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad: np.ndarray | None = None
        self.parents: tuple[DiffNode, ...] = ()
        self._backward: BackwardFn | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["DiffNode"], backward_fn: BackwardFn) -> "DiffNode":
        """Create an interior node; ``backward_fn`` maps the output gradient to one gradient per parent."""
        node = cls.__new__(cls)
        node.data = np.asarray(data, dtype=np.float64)
        node._grad = None
        node.requires_grad = any(p.requires_grad for p in parents)
        node.parents = tuple(parents) if node.requires_grad else ()
        node._backward = backward_fn if node.requires_grad else None
        node.name = None
        return node

    @property
    def grad(self) -> np.ndarray:
        # allocated on first access; most interior nodes never need a buffer
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ShapeError(f"grad shape {value.shape} does not match data shape {self.data.shape}")
        self._grad = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"DiffNode{label}(shape={self.shape})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def constant(data) -> DiffNode:
    return DiffNode(data, requires_grad=False)


def as_node(x) -> DiffNode:
    if isinstance(x, DiffNode):
        return x
    return constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            if a.ndim == 2 and b.ndim == 3:
                # shared weight against a batch: one BLAS call instead of B
                ga = np.tensordot(g, b.data, axes=([0, 2], [0, 2]))
            else:
                ga = _unbroadcast(np.matmul(g, _swap(b.data)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim == 3:
                gb = np.tensordot(a.data, g, axes=([0, 1], [0, 1]))
            else:
                gb = _unbroadcast(np.matmul(_swap(a.data), g), b.shape)
        return ga, gb

    return DiffNode.from_op(out, (a, b), backward_fn)


def transpose(a) -> DiffNode:
    """Swap the last two axes."""
    a = as_node(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {a.shape}")
    return DiffNode.from_op(_swap(a.data).copy(), (a,), lambda g: (_swap(g),))


def swapaxes(a, axis1: int, axis2: int) -> DiffNode:
    a = as_node(a)
    out = np.ascontiguousarray(np.swapaxes(a.data, axis1, axis2))
    return DiffNode.from_op(out, (a,), lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape) -> DiffNode:
    a = as_node(a)
    old = a.shape
    return DiffNode.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx) -> DiffNode:
    """Basic (non-fancy) indexing."""
    a = as_node(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return DiffNode.from_op(a.data[idx].copy(), (a,), backward_fn)


def concat(nodes: Sequence, axis: int = 0) -> DiffNode:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise EmptyInputError("concat of an empty list")
    out = np.concatenate([n.data for n in nodes], axis=axis)
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def backward_fn(g):
        return np.split(g, bounds, axis=axis)

    return DiffNode.from_op(out, nodes, backward_fn)


def stack(nodes: Sequence, axis: int = 0) -> DiffNode:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise EmptyInputError("stack of an empty list")
    out = np.stack([n.data for n in nodes], axis=axis)

    def backward_fn(g):
        return [np.take(g, i, axis=axis) for i in range(len(nodes))]

    return DiffNode.from_op(out, nodes, backward_fn)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    out = a.data + b.data
    return DiffNode.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    out = a.data - b.data
    return DiffNode.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    out = a.data * b.data

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return DiffNode.from_op(out, (a, b), backward_fn)


def scale(a, c: float) -> DiffNode:
    a = as_node(a)
    c = float(c)
    return DiffNode.from_op(a.data * c, (a,), lambda g: (g * c,))


def square(a) -> DiffNode:
    a = as_node(a)
    return DiffNode.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> DiffNode:
    a = as_node(a)
    out = np.sqrt(a.data)
    return DiffNode.from_op(out, (a,), lambda g: (0.5 * g / out,))


def relu(a) -> DiffNode:
    a = as_node(a)
    out = np.maximum(a.data, 0.0)
    return DiffNode.from_op(out, (a,), lambda g: (g * (out > 0),))


# ----------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> DiffNode:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return DiffNode.from_op(out, (a,), backward_fn)


def mean(a, axis=None, keepdims: bool = False) -> DiffNode:
    a = as_node(a)
    if a.data.size == 0:
        raise EmptyInputError("mean of an empty array")
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_over_points(a) -> DiffNode:
    """Max over the last (point) axis: ``(..., F, N) -> (..., F)``.

    The gradient of each feature goes to its arg-max point only; ties resolve
    to the first index.
    """
    a = as_node(a)
    if a.ndim < 1 or a.shape[-1] == 0:
        raise EmptyInputError(f"max_over_points needs at least one point, got shape {a.shape}")
    idx = np.argmax(a.data, axis=-1)[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return DiffNode.from_op(out, (a,), backward_fn)


# ----------------------------------------------------------------------------
# 3-vector helpers (last axis has length 3)


def cross3(a, b) -> DiffNode:
    a, b = as_node(a), as_node(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross3 needs 3-vectors, got {a.shape} and {b.shape}")
    out = np.cross(a.data, b.data)

    def backward_fn(g):
        ga = _unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None
        return ga, gb

    return DiffNode.from_op(out, (a, b), backward_fn)


def normalize3(a, eps: float = EPS_NORM) -> DiffNode:
    a = as_node(a)
    if a.shape[-1] != 3:
        raise ShapeError(f"normalize3 needs 3-vectors, got {a.shape}")
    norm = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateError(f"cannot normalize a vector with norm {float(norm.min()):.3g}")
    out = a.data / norm

    def backward_fn(g):
        return ((g - out * np.sum(out * g, axis=-1, keepdims=True)) / norm,)

    return DiffNode.from_op(out, (a,), backward_fn)


# ----------------------------------------------------------------------------
# graph traversal


def _topological_order(root: DiffNode) -> list[DiffNode]:
    order: list[DiffNode] = []
    seen: set[int] = set()
    stack_: list[tuple[DiffNode, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: DiffNode) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node."""
    if root.data.size != 1:
        raise RankError(f"backward needs a scalar root, got shape {root.shape}")
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        # out-of-place: g may be shared with sibling parents
        node._grad = g if node._grad is None else node._grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


# ----------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class Parameter:
    name: str
    node: DiffNode
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0

    def __post_init__(self):
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.node.data)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.node.data)

    @classmethod
    def create(cls, name: str, value) -> "Parameter":
        return cls(name, DiffNode(value, requires_grad=True, name=name))

    @property
    def data(self) -> np.ndarray:
        return self.node.data

    @property
    def grad(self) -> np.ndarray:
        return self.node.grad


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.node.zero_grad()


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place, then zero the gradients."""
    for p in params:
        if not np.all(np.isfinite(p.node.grad)):
            raise DivergenceError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        g = p.node.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1**t)
        v_hat = p.adam_v / (1.0 - beta2**t)
        p.node.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.node.zero_grad()


# ----------------------------------------------------------------------------
# checkpoint container
#
# An uncompressed numpy .npz archive.  Entries:
#   param/<name>    float64 parameter array (shape is carried by the array)
#   adam_m/<name>   first-moment state
#   adam_v/<name>   second-moment state
#   step/<name>     int64 scalar optimizer step count
#   __meta__        0-d unicode array holding a JSON object (format version,
#                   parameter order, caller-supplied metadata)

CHECKPOINT_FORMAT = 1


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_parameters(path, params: Sequence[Parameter], meta: dict | None = None) -> None:
    import io

    arrays: dict[str, np.ndarray] = {}
    for p in params:
        arrays[f"param/{p.name}"] = p.node.data
        arrays[f"adam_m/{p.name}"] = p.adam_m
        arrays[f"adam_v/{p.name}"] = p.adam_v
        arrays[f"step/{p.name}"] = np.array(p.step_count, dtype=np.int64)
    header = {"format": CHECKPOINT_FORMAT, "order": [p.name for p in params], "meta": meta or {}}
    arrays["__meta__"] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_parameters(path) -> tuple[list[Parameter], dict]:
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["__meta__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ShapeError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params = []
        for name in header["order"]:
            p = Parameter.create(name, archive[f"param/{name}"])
            p.adam_m = archive[f"adam_m/{name}"].copy()
            p.adam_v = archive[f"adam_v/{name}"].copy()
            p.step_count = int(archive[f"step/{name}"])
            params.append(p)
    return params, header["meta"]
