"""Continuous 6D rotation representation.

A 6-vector ``(a1, a2)`` maps to the rotation whose columns are
``b1 = a1/|a1|``, ``b2 = normalize(a2 - (a2.b1) b1)`` and ``b3 = b1 x b2``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DegenerateError, ShapeError
from .tensor import EPS_NORM


def identity_offset() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def _check(v_shape) -> None:
    if v_shape[-1] != 6:
        raise ShapeError(f"6D representation needs a trailing dimension of 6, got {v_shape}")


def rot6d_to_matrix(v):
    """Gram-Schmidt map from ``(..., 6)`` to ``(..., 3, 3)``.

    Accepts a numpy array (returns an array) or a :class:`DiffNode`
    (returns a differentiable node).  Raises :class:`DegenerateError` when
    either half collapses below the ``1e-8`` norm threshold.
    """
    if isinstance(v, T.DiffNode):
        return _rot6d_to_matrix_node(v)
    v = np.asarray(v, dtype=float)
    _check(v.shape)
    a1, a2 = v[..., :3], v[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= EPS_NORM):
        raise DegenerateError("first 6D half is (near) zero")
    b1 = a1 / n1
    u = a2 - np.sum(a2 * b1, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n2 <= EPS_NORM):
        raise DegenerateError("6D halves are (near) parallel")
    b2 = u / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def _rot6d_to_matrix_node(v: T.DiffNode) -> T.DiffNode:
    _check(v.shape)
    a1 = T.getitem(v, (..., slice(0, 3)))
    a2 = T.getitem(v, (..., slice(3, 6)))
    try:
        b1 = T.normalize3(a1)
    except DegenerateError:
        raise DegenerateError("first 6D half is (near) zero") from None
    dot = T.sum(T.mul(a2, b1), axis=-1, keepdims=True)
    try:
        b2 = T.normalize3(T.sub(a2, T.mul(dot, b1)))
    except DegenerateError:
        raise DegenerateError("6D halves are (near) parallel") from None
    b3 = T.cross3(b1, b2)
    return T.stack([b1, b2, b3], axis=-1)
