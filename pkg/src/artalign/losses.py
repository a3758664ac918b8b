"""Adjoint reconstruction loss and the two rotation-equivariance losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .geometry import Azimuthal, FullSO3, RotationMode, chamfer_distance_diff
from .network import ArtModel, Downstream, autoencode, iterative_refine
from .tensor import DiffNode


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.02
    lambda2: float = 0.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError(f"loss weights must be non-negative, got {self}")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    rot_matrix: float
    rot_chamfer: float
    total: float


def adjoint_forward(model: ArtModel, x, downstream: Downstream = autoencode) -> tuple[DiffNode, DiffNode]:
    """Rotate in, run the downstream network, rotate back.

    Returns ``(output, r)`` where ``output = r^T downstream(r x)`` lives in
    the input's frame and ``r`` is the refined predicted rotation.
    """
    x = T.as_node(x)
    r = iterative_refine(model, x)
    canonical_out = downstream(model, T.matmul(r, x))
    return T.matmul(T.transpose(r), canonical_out), r


def _reduce(per_item: DiffNode) -> DiffNode:
    return T.mean(per_item) if per_item.ndim else per_item


def recon_loss(model: ArtModel, x, downstream: Downstream = autoencode) -> DiffNode:
    """Chamfer distance between ``x`` and its adjoint reconstruction (batch mean)."""
    out, _ = adjoint_forward(model, x, downstream)
    return _reduce(chamfer_distance_diff(out, np.asarray(T.as_node(x).data)))


def rot_matrix_loss(r1, r2, r_tilde) -> DiffNode:
    """Squared Frobenius norm of ``r_tilde - r2^T r1`` (batch mean).

    ``r_tilde`` is a sampled constant; gradients flow into ``r1`` and ``r2``.
    """
    r_tilde = np.asarray(r_tilde.data if isinstance(r_tilde, DiffNode) else r_tilde, dtype=float)
    diff = T.sub(r_tilde, T.matmul(T.transpose(r2), r1))
    per_item = T.sum(T.square(diff), axis=(-2, -1))
    return _reduce(per_item)


def rot_chamfer_loss(x_tilde, x, r1, r2) -> DiffNode:
    """Chamfer distance between ``x_tilde`` and ``r2^T r1 x`` (batch mean)."""
    x_tilde = np.asarray(x_tilde.data if isinstance(x_tilde, DiffNode) else x_tilde, dtype=float)
    mapped = T.matmul(T.matmul(T.transpose(r2), r1), x)
    return _reduce(chamfer_distance_diff(mapped, x_tilde))


def rotations_per_step(mode: RotationMode) -> int:
    if isinstance(mode, Azimuthal):
        return 1
    if isinstance(mode, FullSO3):
        return 3
    raise ConfigurationError(f"unknown rotation mode {mode!r}")


def art_loss(
    model: ArtModel,
    x,
    rotations: Sequence,
    w: LossWeights,
    mode: RotationMode | None = None,
    downstream: Downstream = autoencode,
) -> tuple[LossBreakdown, DiffNode]:
    """Reconstruction loss plus the weighted equivariance terms.

    ``rotations`` holds the sampled R-tilde values, each either one ``(3, 3)``
    matrix or a ``(B, 3, 3)`` stack with one rotation per shape.  The
    equivariance terms are averaged over the samples.  When ``mode`` is given
    the sample count must be 1 (azimuthal) or 3 (full SO(3)).
    """
    if mode is not None and len(rotations) != rotations_per_step(mode):
        raise ConfigurationError(
            f"{mode.name} mode needs {rotations_per_step(mode)} sampled rotations, got {len(rotations)}"
        )
    x = T.as_node(x)
    out, r1 = adjoint_forward(model, x, downstream)
    recon = _reduce(chamfer_distance_diff(out, x.data))
    if not rotations:
        return LossBreakdown(recon.item(), 0.0, 0.0, recon.item()), recon

    rm_terms, rc_terms = [], []
    for r_tilde in rotations:
        r_tilde = np.asarray(r_tilde, dtype=float)
        x_tilde = r_tilde @ x.data
        r2 = iterative_refine(model, x_tilde)
        # a zero-weighted term is still reported but kept out of the graph
        if w.lambda1 > 0:
            rm_terms.append(rot_matrix_loss(r1, r2, r_tilde))
        else:
            rm_terms.append(rot_matrix_loss(r1.data, T.constant(r2.data), r_tilde))
        if w.lambda2 > 0:
            rc_terms.append(rot_chamfer_loss(x_tilde, x, r1, r2))
        else:
            rc_terms.append(rot_chamfer_loss(x_tilde, x.data, r1.data, T.constant(r2.data)))
    rot_matrix = T.mean(T.stack(rm_terms))
    rot_chamfer = T.mean(T.stack(rc_terms))
    total = T.add(recon, T.add(T.scale(rot_matrix, w.lambda1), T.scale(rot_chamfer, w.lambda2)))
    breakdown = LossBreakdown(recon.item(), rot_matrix.item(), rot_chamfer.item(), total.item())
    return breakdown, total
