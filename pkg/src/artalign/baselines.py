"""Non-learned aligners: identity and principal-axis (PCA) alignment."""

from __future__ import annotations

import warnings
from enum import Enum
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

EIGEN_GAP_TOL = 1e-6
SKEW_TOL = 1e-9


class BaselineKind(str, Enum):
    IDENTITY = "identity"
    PCA = "pca"


class AmbiguousAxesWarning(UserWarning):
    pass


class PcaAlignment(NamedTuple):
    rotation: np.ndarray
    eigenvalues: np.ndarray  # descending
    ambiguous: bool


def pca_frame(x) -> PcaAlignment:
    x = np.asarray(x, dtype=float)
    x = x - x.mean(axis=1, keepdims=True)
    cov = x @ x.T / x.shape[1]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    axes = evecs[:, order].T  # rows are principal axes

    for k in range(2):
        proj = axes[k] @ x
        skew = np.mean(proj**3)
        if abs(skew) > SKEW_TOL:
            sign = np.sign(skew)
        else:
            sign = 1.0 if axes[k][0] >= 0 else -1.0
        axes[k] = axes[k] * sign
    axes[2] = np.cross(axes[0], axes[1])

    scale = max(evals[0], np.finfo(float).tiny)
    gaps = np.abs(np.diff(evals)) / scale
    return PcaAlignment(axes, evals, bool(np.any(gaps < EIGEN_GAP_TOL)))


def pca_align(x) -> np.ndarray:
    """Rotation whose rows are the principal axes of ``x`` (largest variance first).

    Each of the first two axes is oriented so the third central moment of the
    projection is positive (falling back to a non-negative first coordinate
    when the skew vanishes); the last row is their cross product, so the
    result is always a proper rotation.  Near-equal eigenvalues emit an
    :class:`AmbiguousAxesWarning`.
    """
    frame = pca_frame(x)
    if frame.ambiguous:
        warnings.warn(
            f"principal axes are ambiguous (eigenvalues {frame.eigenvalues})",
            AmbiguousAxesWarning,
            stacklevel=2,
        )
    return frame.rotation


def align_with_baseline(kind: BaselineKind | str, x) -> np.ndarray:
    kind = BaselineKind(kind)
    if kind is BaselineKind.IDENTITY:
        return np.eye(3)
    return pca_align(x)


def align_batch(kind: BaselineKind | str, clouds) -> np.ndarray:
    """Aligning rotations for a ``(B, 3, N)`` stack; ambiguity warnings are suppressed."""
    try:
        kind = BaselineKind(kind)
    except ValueError:
        raise ConfigurationError(f"unknown baseline {kind!r}") from None
    clouds = np.asarray(clouds, dtype=float)
    if kind is BaselineKind.IDENTITY:
        return np.broadcast_to(np.eye(3), (len(clouds), 3, 3)).copy()
    return np.stack([pca_frame(c).rotation for c in clouds])
