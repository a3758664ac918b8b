"""Point clouds, SO(3) helpers, Chamfer distance and point-cloud text I/O.

Point clouds are plain ``(3, N)`` float64 arrays (batched: ``(B, 3, N)``);
rotations are ``(3, 3)`` arrays acting on column vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .errors import DegenerateError, EmptyInputError, ParseError, ShapeError

UP = np.array([0.0, 0.0, 1.0])
DEGENERATE_SCALE = 1e-9


@dataclass(frozen=True)
class Azimuthal:
    """Rotations about a fixed up axis (the "2D" setting)."""

    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if n < 1e-12:
            raise DegenerateError("azimuthal axis must be non-zero")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / n))

    @property
    def name(self) -> str:
        return "azimuthal"


@dataclass(frozen=True)
class FullSO3:
    @property
    def name(self) -> str:
        return "so3"


RotationMode = Union[Azimuthal, FullSO3]


def parse_mode(name: str) -> RotationMode:
    from .errors import ConfigurationError

    key = name.strip().lower()
    if key in ("azimuthal", "2d", "z"):
        return Azimuthal()
    if key in ("so3", "full", "3d"):
        return FullSO3()
    raise ConfigurationError(f"unknown rotation mode {name!r} (expected azimuthal or so3)")


def as_cloud(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != 3:
        raise ShapeError(f"point cloud must have shape (3, N), got {x.shape}")
    if x.shape[1] == 0:
        raise EmptyInputError("point cloud has no points")
    if not np.all(np.isfinite(x)):
        raise ValueError("point cloud contains non-finite coordinates")
    return x


def is_rotation(r, tol: float = 1e-6) -> bool:
    r = np.asarray(r, dtype=float)
    if r.shape[-2:] != (3, 3):
        return False
    eye = np.eye(3)
    ortho = np.linalg.norm(np.swapaxes(r, -1, -2) @ r - eye, axis=(-2, -1))
    det = np.linalg.det(r)
    return bool(np.all(ortho < tol) and np.all(np.abs(det - 1.0) <= tol))


# ----------------------------------------------------------------------------
# normalisation and rigid motion


def center_and_normalize(x) -> tuple[np.ndarray, np.ndarray, float]:
    """Center at the centroid and scale so the farthest point has norm 1.

    Returns the normalised cloud, the original centroid and the scale
    (original max distance from the centroid), so that
    ``x == out * scale + centroid[:, None]``.
    """
    x = as_cloud(x)
    centroid = x.mean(axis=1)
    centered = x - centroid[:, None]
    scale = float(np.sqrt((centered**2).sum(axis=0)).max())
    if scale < DEGENERATE_SCALE:
        raise DegenerateError("all points coincide; cannot normalise")
    return centered / scale, centroid, scale


def apply_rotation(r, x) -> np.ndarray:
    return np.asarray(r, dtype=float) @ np.asarray(x, dtype=float)


def compose(r1, r2) -> np.ndarray:
    """``r1 @ r2``: apply ``r2`` first."""
    return np.asarray(r1, dtype=float) @ np.asarray(r2, dtype=float)


def transpose(r) -> np.ndarray:
    return np.swapaxes(np.asarray(r, dtype=float), -1, -2).copy()


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues formula for a rotation of ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rot_z(degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quaternion_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w),
            2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def sample_rotation(mode: RotationMode, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw rotation(s): Haar-uniform for ``FullSO3``, uniform angle about the axis for ``Azimuthal``.

    ``size`` may be an int or a shape tuple; the result has shape ``size + (3, 3)``.
    """
    shape = () if size is None else (size,) if np.ndim(size) == 0 else tuple(size)
    n = int(np.prod(shape, dtype=int))
    if isinstance(mode, FullSO3):
        out = quaternion_to_matrix(rng.standard_normal((n, 4)))
    elif isinstance(mode, Azimuthal):
        angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
        out = np.stack([axis_angle(mode.axis, a) for a in angles])
    else:
        raise TypeError(f"unknown rotation mode {mode!r}")
    return out.reshape(shape + (3, 3))


def angular_distance(r1, r2) -> np.ndarray | float:
    """Geodesic angle in degrees between rotations (broadcasts over leading dims)."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    tr = np.einsum("...ij,...ij->...", r1, r2)  # trace(r1^T r2)
    ang = np.degrees(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))
    return float(ang) if np.ndim(ang) == 0 else ang


# ----------------------------------------------------------------------------
# Chamfer distance


def _nearest(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour indices a->b ``(..., N)`` and b->a ``(..., M)``.

    The search uses the expanded form |p|^2 + |q|^2 - 2 p.q; callers recompute
    distances from explicit differences of the selected pairs.
    """
    aa = np.einsum("...ki,...ki->...i", a, a)
    bb = np.einsum("...ki,...ki->...i", b, b)
    d = aa[..., :, None] + bb[..., None, :] - 2.0 * (np.swapaxes(a, -1, -2) @ b)
    return np.argmin(d, axis=-1), np.argmin(d, axis=-2)


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(x, np.broadcast_to(idx[..., None, :], x.shape[:-1] + idx.shape[-1:]), axis=-1)


def _check_nonempty(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] == 0 or b.shape[-1] == 0:
        raise EmptyInputError("chamfer distance of an empty point cloud")
    if a.shape[-2] != 3 or b.shape[-2] != 3:
        raise ShapeError(f"chamfer expects (..., 3, N) clouds, got {a.shape} and {b.shape}")


def chamfer_distance(a, b) -> float | np.ndarray:
    """Symmetric Chamfer distance with squared distances and per-direction means.

    Batched inputs ``(B, 3, N)`` give a length-B array.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_nonempty(a, b)
    nn_ab, nn_ba = _nearest(a, b)
    d_ab = ((a - _gather(b, nn_ab)) ** 2).sum(axis=-2)
    d_ba = ((_gather(a, nn_ba) - b) ** 2).sum(axis=-2)
    out = d_ab.mean(axis=-1) + d_ba.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def chamfer_distance_diff(a, b) -> T.DiffNode:
    """Differentiable Chamfer distance; gradient flows into ``a`` only.

    ``a`` is a node of shape ``(3, N)`` or ``(B, 3, N)``; ``b`` is a constant
    cloud of matching batch shape.  Nearest-neighbour assignments are fixed
    at forward time.  Batched input gives a ``(B,)`` node.
    """
    a = T.as_node(a)
    b = np.asarray(b.data if isinstance(b, T.DiffNode) else b, dtype=float)
    _check_nonempty(a.data, b)
    ad = a.data
    nn_ab, nn_ba = _nearest(ad, b)
    n, m = ad.shape[-1], b.shape[-1]
    diff_ab = ad - _gather(b, nn_ab)  # (..., 3, N)
    diff_ba = _gather(ad, nn_ba) - b  # (..., 3, M)
    value = (diff_ab**2).sum(axis=-2).mean(axis=-1) + (diff_ba**2).sum(axis=-2).mean(axis=-1)

    def backward_fn(g):
        g = np.asarray(g)[..., None, None]
        grad = 2.0 * diff_ab / n
        scatter = 2.0 * diff_ba / m
        if grad.ndim == 2:
            np.add.at(grad.T, nn_ba, scatter.T)
        else:
            for i in range(grad.shape[0]):
                np.add.at(grad[i].T, nn_ba[i], scatter[i].T)
        return (grad * g,)

    return T.DiffNode.from_op(value, (a,), backward_fn)


# ----------------------------------------------------------------------------
# text format: one "v x y z" line per point


def load_cloud(path) -> np.ndarray:
    path = Path(path)
    pts = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields or fields[0] != "v":
                continue
            if len(fields) < 4:
                raise ParseError(path, lineno, f"expected 'v x y z', got {line.strip()!r}")
            try:
                xyz = [float(v) for v in fields[1:4]]
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric coordinate in {line.strip()!r}") from None
            if not all(np.isfinite(xyz)):
                raise ParseError(path, lineno, "non-finite coordinate")
            pts.append(xyz)
    if not pts:
        raise EmptyInputError(f"{path}: no 'v' lines")
    return np.array(pts, dtype=np.float64).T


def format_cloud(x) -> str:
    x = as_cloud(x)
    return "".join(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n" for p in x.T)


def save_cloud(path, x) -> None:
    T.atomic_write_bytes(path, format_cloud(x).encode("utf-8"))
