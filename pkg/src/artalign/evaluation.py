"""Alignment metrics: residual orientations, pairwise angular CDFs, method comparison."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import geometry as G
from .baselines import align_batch
from .data import Dataset, symmetry_group
from .errors import ConfigurationError, InsufficientDataError
from .network import ArtModel, iterative_refine
from .training import TrainConfig, TrainLog, reconstruction_errors, train

DEFAULT_THRESHOLDS = np.arange(5.0, 180.0 + 1e-9, 5.0)


@dataclass
class AlignmentReport:
    method: str
    distances: np.ndarray  # all-pairs angular distances in degrees
    thresholds: np.ndarray
    cdf: np.ndarray
    median_pairwise: float

    def fraction_below(self, degrees: float) -> float:
        return float(np.mean(self.distances <= degrees))


@dataclass
class Method:
    """An aligner under evaluation.

    ``kind`` is ``"identity"``, ``"pca"`` or ``"art"``.  ``model`` is the
    ART model for ``"art"`` and, optionally, the auto-encoder trained on the
    baseline-aligned data for the other kinds (used for the reconstruction
    column).
    """

    label: str
    kind: str
    model: ArtModel | None = None

    def predict(self, clouds: np.ndarray, batch_size: int = 32) -> np.ndarray:
        if self.kind == "art":
            if self.model is None:
                raise ConfigurationError(f"method {self.label!r} needs a trained checkpoint")
            return predict_rotations(self.model, clouds, batch_size)
        if self.kind in ("identity", "pca"):
            return align_batch(self.kind, clouds)
        raise ConfigurationError(f"unknown method kind {self.kind!r}")


def predict_rotations(model: ArtModel, clouds: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = [iterative_refine(model, clouds[lo : lo + batch_size]).data for lo in range(0, len(clouds), batch_size)]
    return np.concatenate(out)


def canonical_orientation_residual(r_pred, r_gt) -> np.ndarray:
    """``Q = r_pred @ r_gt``: generator frame to the method's canonical frame (broadcasts)."""
    if r_gt is None:
        raise ConfigurationError("alignment evaluation needs ground-truth rotations")
    return np.asarray(r_pred, float) @ np.asarray(r_gt, float)


def pairwise_distances(residuals: np.ndarray, symmetry: np.ndarray | None = None) -> np.ndarray:
    """Angular distance for every unordered pair ``i < j``.

    With a symmetry group the distance is ``min_S angle(Q_i, Q_j S)``.
    """
    q = np.asarray(residuals, float)
    i, j = np.triu_indices(len(q), k=1)
    if symmetry is None:
        return np.asarray(G.angular_distance(q[i], q[j]), dtype=float).reshape(-1)
    per_s = [np.asarray(G.angular_distance(q[i], q[j] @ s)).reshape(-1) for s in symmetry]
    return np.min(per_s, axis=0)


def pairwise_cdf(
    residuals: Sequence,
    thresholds=DEFAULT_THRESHOLDS,
    symmetry: np.ndarray | None = None,
    method: str = "",
) -> AlignmentReport:
    q = np.asarray(residuals, float)
    if q.ndim != 3 or len(q) < 2:
        raise InsufficientDataError("pairwise CDF needs at least two residual rotations")
    d = pairwise_distances(q, symmetry)
    thr = np.asarray(thresholds, float)
    cdf = np.array([np.mean(d <= t) for t in thr])
    return AlignmentReport(method, d, thr, cdf, float(np.median(d)))


def alignment_report(method: Method, dataset: Dataset, split: str = "test", quotient: bool = True) -> AlignmentReport:
    if dataset.rotations is None:
        raise ConfigurationError("alignment evaluation needs ground-truth rotations")
    idx = dataset.split[split]
    pred = method.predict(dataset.clouds[idx])
    q = canonical_orientation_residual(pred, dataset.rotations[idx])
    sym = symmetry_group(dataset.family) if quotient else None
    return pairwise_cdf(q, symmetry=sym, method=method.label)


@dataclass
class Comparison:
    reports: list[AlignmentReport]
    chamfer: dict[str, float]

    def report(self, label: str) -> AlignmentReport:
        for r in self.reports:
            if r.method == label:
                return r
        raise KeyError(label)

    def cdf_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "threshold_deg", "fraction"])
        for r in self.reports:
            for t, f in zip(r.thresholds, r.cdf):
                w.writerow([r.method, f"{t:g}", f"{f:.10g}"])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "median_pairwise_deg", "mean_test_chamfer"])
        for r in self.reports:
            w.writerow([r.method, f"{r.median_pairwise:.10g}", f"{self.chamfer[r.method]:.10g}"])
        return buf.getvalue()


def method_chamfer(method: Method, dataset: Dataset, split: str = "test") -> float:
    """Mean test Chamfer of the method's auto-encoder (NaN when it has none)."""
    if method.model is None:
        return float("nan")
    clouds = dataset.clouds[dataset.split[split]]
    if method.kind != "art":
        clouds = align_batch(method.kind, clouds) @ clouds
    return float(np.mean(reconstruction_errors(method.model, clouds)))


def run_comparison(dataset: Dataset, methods: Sequence[Method], split: str = "test", quotient: bool = True) -> Comparison:
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"duplicate method labels in {labels}")
    reports = [alignment_report(m, dataset, split, quotient) for m in methods]
    chamfer = {m.label: method_chamfer(m, dataset, split) for m in methods}
    return Comparison(reports, chamfer)


@dataclass
class AblationResult:
    art: ArtModel
    ablated: ArtModel
    art_log: TrainLog
    ablated_log: TrainLog
    comparison: Comparison


def run_ablation(config: TrainConfig, dataset: Dataset, progress=None) -> AblationResult:
    """Train ART with and without the equivariance losses on the same data and seed."""
    art_cfg = replace(config, art_enabled=True, equivariance_enabled=True, prealign="identity")
    abl_cfg = replace(art_cfg, equivariance_enabled=False)
    art, art_log = train(art_cfg, dataset, progress=progress)
    abl, abl_log = train(abl_cfg, dataset, progress=progress)
    methods = [Method("art", "art", art), Method("art-noeq", "art", abl)]
    return AblationResult(art, abl, art_log, abl_log, run_comparison(dataset, methods))
