"""Synthetic shape families, corpus files, rotation perturbation and splits.

Generated shapes live in a fixed per-family frame: up is +z and gliders
point their nose along +x.  ``perturb`` rotates each shape independently and
keeps the applied rotation for evaluation; training code only ever receives a
:class:`TrainingView`, which carries the perturbed clouds and split indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Union

import numpy as np

from . import geometry as G
from .errors import ConfigurationError, EmptyInputError, ParseError
from .geometry import RotationMode

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.85, 0.05, 0.10)


@dataclass(frozen=True)
class Glider:
    name: str = "glider"


@dataclass(frozen=True)
class QuadTable:
    name: str = "quadtable"


@dataclass(frozen=True)
class FileCorpus:
    path: str
    name: str = "files"


ShapeFamily = Union[Glider, QuadTable, FileCorpus]


def family_from_name(name: str) -> ShapeFamily:
    key = name.strip().lower()
    if key == "glider":
        return Glider()
    if key in ("quadtable", "table"):
        return QuadTable()
    raise ConfigurationError(f"unknown shape family {name!r} (expected glider or quadtable)")


def symmetry_group(family) -> np.ndarray | None:
    """Rotations about +z under which every instance of the family is invariant (None if trivial)."""
    name = family if isinstance(family, str) else getattr(family, "name", "")
    if name == "quadtable":
        return np.stack([G.rot_z(a) for a in (0.0, 90.0, 180.0, 270.0)])
    return None


# ----------------------------------------------------------------------------
# surface sampling of boxes


def _box_faces(center, half):
    """Six faces as (origin, edge_u, edge_v) triples."""
    c = np.asarray(center, float)
    h = np.asarray(half, float)
    faces = []
    for axis in range(3):
        u_axis, v_axis = [a for a in range(3) if a != axis]
        eu = np.zeros(3)
        ev = np.zeros(3)
        eu[u_axis] = 2 * h[u_axis]
        ev[v_axis] = 2 * h[v_axis]
        for sign in (-1.0, 1.0):
            origin = c - h
            origin = origin.copy()
            origin[axis] = c[axis] + sign * h[axis]
            faces.append((origin, eu, ev))
    return faces


def sample_boxes(boxes, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the union of box surfaces, shape ``(3, n)``."""
    faces = [f for center, half in boxes for f in _box_faces(center, half)]
    areas = np.array([np.linalg.norm(np.cross(eu, ev)) for _, eu, ev in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    origins = np.array([faces[i][0] for i in which])
    eus = np.array([faces[i][1] for i in which])
    evs = np.array([faces[i][2] for i in which])
    return (origins + uv[:, :1] * eus + uv[:, 1:] * evs).T


def glider_boxes(rng: np.random.Generator):
    """Fuselage, two unequal wings and a tail fin; six random parameters."""
    length = rng.uniform(1.6, 2.2)
    body = rng.uniform(0.12, 0.2)
    left_span = rng.uniform(0.7, 1.0)
    right_ratio = rng.uniform(0.45, 0.65)
    wing_pos = rng.uniform(0.35, 0.55) * length / 2
    fin_height = rng.uniform(0.35, 0.55)

    chord, thick = 0.35, 0.04
    hb = body / 2
    tail_x = -length / 2 + 0.15
    right_span = left_span * right_ratio
    return [
        ((0.0, 0.0, 0.0), (length / 2, hb, hb)),
        ((wing_pos, hb + left_span / 2, 0.0), (chord / 2, left_span / 2, thick / 2)),
        ((wing_pos, -hb - right_span / 2, 0.0), (chord / 2, right_span / 2, thick / 2)),
        ((tail_x, 0.0, hb + fin_height / 2), (0.15, 0.015, fin_height / 2)),
    ]


def quadtable_boxes(rng: np.random.Generator):
    """Square top on four corner legs; three random parameters."""
    top = rng.uniform(0.6, 1.0)
    leg_height = rng.uniform(0.5, 1.0)
    leg = rng.uniform(0.06, 0.14)

    top_thick = 0.06
    boxes = [((0.0, 0.0, leg_height + top_thick / 2), (top, top, top_thick / 2))]
    inset = top - leg / 2 - 0.02
    for sx, sy in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        boxes.append(((sx * inset, sy * inset, leg_height / 2), (leg / 2, leg / 2, leg_height / 2)))
    return boxes


def _sample_glider(n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_boxes(glider_boxes(rng), n, rng)


def _sample_quadtable(n: int, rng: np.random.Generator) -> np.ndarray:
    # orbit a uniform sample under the 4-fold group so the point set itself is symmetric
    boxes = quadtable_boxes(rng)
    base = sample_boxes(boxes, n // 4, rng)
    parts = [G.rot_z(a) @ base for a in (0.0, 90.0, 180.0, 270.0)]
    if n % 4:
        parts.append(sample_boxes(boxes, n % 4, rng))
    return np.concatenate(parts, axis=1)


def generate(family: ShapeFamily | str, count: int, points_per_shape: int, seed: int) -> np.ndarray:
    """Sample ``count`` normalised shapes, returned as a ``(count, 3, points)`` array."""
    if isinstance(family, str):
        family = family_from_name(family)
    if count < 1:
        raise ConfigurationError("count must be at least 1")
    if points_per_shape < 64:
        raise ConfigurationError("points_per_shape must be at least 64")
    if isinstance(family, Glider):
        sampler = _sample_glider
    elif isinstance(family, QuadTable):
        sampler = _sample_quadtable
    elif isinstance(family, FileCorpus):
        return np.stack(load_corpus(family.path))
    else:
        raise ConfigurationError(f"unknown shape family {family!r}")
    streams = np.random.SeedSequence(seed).spawn(count)
    out = np.empty((count, 3, points_per_shape))
    for i, ss in enumerate(streams):
        out[i] = G.center_and_normalize(sampler(points_per_shape, np.random.default_rng(ss)))[0]
    return out


# ----------------------------------------------------------------------------
# datasets


def split_indices(count: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n_train = int(round(SPLIT_FRACTIONS[0] * count))
    n_val = int(round(SPLIT_FRACTIONS[1] * count))
    perm = rng.permutation(count)
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


@dataclass(frozen=True)
class TrainingView:
    """What the training loop may see: perturbed clouds and split indices, nothing else."""

    clouds: np.ndarray
    split: dict[str, np.ndarray]

    def subset(self, name: str) -> np.ndarray:
        return self.clouds[self.split[name]]


@dataclass
class Dataset:
    """Perturbed shapes together with the (evaluation-only) applied rotations.

    ``canonical[i]`` is shape i in the generator frame and
    ``clouds[i] = rotations[i] @ canonical[i]``.  ``rotations`` is ``None``
    for corpora loaded without ground truth.
    """

    clouds: np.ndarray
    split: dict[str, np.ndarray]
    mode: RotationMode | None = None
    seed: int = 0
    family: str = "glider"
    rotations: np.ndarray | None = field(default=None, repr=False)
    names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.clouds)

    @property
    def canonical(self) -> np.ndarray:
        if self.rotations is None:
            raise ConfigurationError("dataset has no ground-truth rotations")
        return np.swapaxes(self.rotations, -1, -2) @ self.clouds

    def training_view(self) -> TrainingView:
        return TrainingView(self.clouds, self.split)

    def prealigned(self, kind: str) -> "Dataset":
        """Dataset with every cloud pre-rotated by a fixed aligner.

        ``"groundtruth"`` undoes the perturbation (oracle alignment); ``"pca"``
        applies :func:`artalign.baselines.pca_align`; ``"identity"`` is a no-op.
        The stored ground truth is updated so residuals stay meaningful.
        """
        from .baselines import align_batch

        if kind == "identity":
            return self
        if kind == "groundtruth":
            aligners = np.swapaxes(self.rotations, -1, -2)
        else:
            aligners = align_batch(kind, self.clouds)
        rotations = None if self.rotations is None else aligners @ self.rotations
        return replace(self, clouds=aligners @ self.clouds, rotations=rotations)


def perturb(
    shapes: np.ndarray,
    mode: RotationMode | None,
    seed: int,
    family: str = "glider",
) -> Dataset:
    """Rotate each shape by an independent sample and split 85/5/10.

    ``mode=None`` leaves shapes in their generator orientation (identity
    ground truth), which gives the pre-aligned reference setting.
    """
    shapes = np.asarray(shapes, dtype=float)
    if shapes.ndim != 3 or shapes.shape[1] != 3:
        raise ConfigurationError(f"expected shapes of shape (count, 3, N), got {shapes.shape}")
    # distinct entropy from generate(), which spawns directly from `seed`
    rot_ss, split_ss = np.random.SeedSequence([seed, 0x5EED]).spawn(2)
    count = len(shapes)
    if mode is None:
        rotations = np.broadcast_to(np.eye(3), (count, 3, 3)).copy()
    else:
        rotations = G.sample_rotation(mode, np.random.default_rng(rot_ss), size=count)
    clouds = rotations @ shapes
    split = split_indices(count, np.random.default_rng(split_ss))
    return Dataset(clouds, split, mode, seed, family, rotations)


# ----------------------------------------------------------------------------
# files


def load_corpus(path) -> list[np.ndarray]:
    """Load every ``*.obj``/``*.xyz``/``*.txt`` point file in a directory, sorted by name."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigurationError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix in (".obj", ".txt", ".xyz") and p.is_file())
    if not files:
        raise EmptyInputError(f"{root}: no point-cloud files")
    return [G.center_and_normalize(G.load_cloud(f))[0] for f in files]


MANIFEST = "manifest.txt"
GROUNDTRUTH = "groundtruth.txt"


def write_corpus(root, dataset: Dataset, points: int) -> None:
    """Write ``<root>/<family>/<index>.obj`` plus the manifest and ground-truth files."""
    root = Path(root)
    fam_dir = root / dataset.family
    width = max(4, len(str(len(dataset) - 1)))
    split_of = {int(i): name for name in SPLITS for i in dataset.split[name]}
    mode = "none" if dataset.mode is None else dataset.mode.name
    header = f"# family={dataset.family} mode={mode} seed={dataset.seed} count={len(dataset)} points={points}\n"
    manifest = [header]
    truth = [header]
    for i, cloud in enumerate(dataset.clouds):
        rel = f"{dataset.family}/{i:0{width}d}.obj"
        G.save_cloud(fam_dir / f"{i:0{width}d}.obj", cloud)
        manifest.append(f"{rel} {split_of[i]}\n")
        if dataset.rotations is not None:
            vals = " ".join(f"{v:.17g}" for v in dataset.rotations[i].ravel())
            truth.append(f"{rel} {vals}\n")
    from .tensor import atomic_write_bytes

    atomic_write_bytes(root / MANIFEST, "".join(manifest).encode())
    if dataset.rotations is not None:
        atomic_write_bytes(root / GROUNDTRUTH, "".join(truth).encode())


def _read_header(path: Path) -> dict[str, str]:
    with path.open() as fh:
        first = fh.readline()
    if not first.startswith("#"):
        return {}
    return dict(tok.split("=", 1) for tok in first[1:].split() if "=" in tok)


def load_dataset(root, with_groundtruth: bool = True) -> Dataset:
    """Read a corpus written by :func:`write_corpus`.

    Ground truth is only read when ``with_groundtruth`` is set and the file exists.
    """
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise ConfigurationError(f"{root}: missing {MANIFEST}")
    header = _read_header(manifest)
    files, splits = [], []
    with manifest.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in SPLITS:
                raise ParseError(manifest, lineno, f"expected '<file> <split>', got {line!r}")
            files.append(parts[0])
            splits.append(parts[1])
    if not files:
        raise EmptyInputError(f"{manifest}: no entries")
    clouds = np.stack([G.center_and_normalize(G.load_cloud(root / f))[0] for f in files])
    split = {name: np.array([i for i, s in enumerate(splits) if s == name], dtype=int) for name in SPLITS}

    rotations = None
    truth_path = root / GROUNDTRUTH
    if with_groundtruth and truth_path.exists():
        table = {}
        with truth_path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) != 10:
                    raise ParseError(truth_path, lineno, "expected a file name and 9 reals")
                try:
                    table[parts[0]] = np.array([float(v) for v in parts[1:]]).reshape(3, 3)
                except ValueError:
                    raise ParseError(truth_path, lineno, "non-numeric rotation entry") from None
        missing = [f for f in files if f not in table]
        if missing:
            raise ConfigurationError(f"{truth_path}: no rotation for {missing[0]}")
        rotations = np.stack([table[f] for f in files])

    mode_name = header.get("mode", "none")
    mode = None if mode_name == "none" else G.parse_mode(mode_name)
    return Dataset(
        clouds,
        split,
        mode,
        int(header.get("seed", 0)),
        header.get("family", "files"),
        rotations,
        names=files,
    )
