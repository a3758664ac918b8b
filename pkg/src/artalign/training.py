"""Training loop for the ART auto-encoder and the plain auto-encoder baseline."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import geometry as G
from . import tensor as T
from .data import Dataset, TrainingView
from .errors import ConfigurationError, DivergenceError
from .geometry import Azimuthal, RotationMode
from .losses import LossBreakdown, LossWeights, adjoint_forward, art_loss, rotations_per_step
from .network import ArtModel, NetConfig, autoencode

log = logging.getLogger(__name__)

FAMILY_LAMBDA2 = {"quadtable": 0.05}
PREALIGN_CHOICES = ("identity", "pca", "groundtruth")


@dataclass(frozen=True)
class TrainConfig:
    family: str = "glider"
    mode: RotationMode = field(default_factory=Azimuthal)
    lambda1: float = 0.02
    lambda2: float | None = None  # None: 0.05 for quadtable, 0 otherwise
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 16
    refine_steps: int = 2
    latent: int = 64
    num_out: int = 256
    seed: int = 0
    art_enabled: bool = True
    equivariance_enabled: bool = True
    prealign: str = "identity"
    point_widths: tuple[int, ...] = (64, 128, 256)
    rot_head_widths: tuple[int, ...] = (128,)
    decoder_widths: tuple[int, ...] = (256, 512)

    def __post_init__(self):
        for name in ("epochs", "batch_size", "refine_steps", "latent", "num_out"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.lambda1 < 0 or (self.lambda2 is not None and self.lambda2 < 0):
            raise ConfigurationError("loss weights must be non-negative")
        if self.prealign not in PREALIGN_CHOICES:
            raise ConfigurationError(f"prealign must be one of {PREALIGN_CHOICES}")
        if self.art_enabled and self.prealign != "identity":
            raise ConfigurationError("prealign is only meaningful for the plain auto-encoder")

    @property
    def weights(self) -> LossWeights:
        """Effective weights; the ablation switch zeroes both."""
        if not (self.art_enabled and self.equivariance_enabled):
            return LossWeights(0.0, 0.0)
        lam2 = FAMILY_LAMBDA2.get(self.family, 0.0) if self.lambda2 is None else self.lambda2
        return LossWeights(self.lambda1, lam2)

    @property
    def net(self) -> NetConfig:
        return NetConfig(
            point_widths=self.point_widths,
            rot_head_widths=self.rot_head_widths,
            latent=self.latent,
            decoder_widths=self.decoder_widths,
            num_out=self.num_out,
            refine_steps=self.refine_steps,
        )

    @property
    def aligner(self) -> str:
        return "art" if self.art_enabled else self.prealign

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.name
        d["lambda2"] = self.weights.lambda2 if self.lambda2 is None else self.lambda2
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}\n")
        return "".join(lines)


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, raw: str, current):
    raw = raw.strip()
    try:
        if name == "mode":
            return G.parse_mode(raw)
        if name == "lambda2":
            return None if raw.lower() in ("", "auto", "none") else float(raw)
        if isinstance(current, bool):
            return _BOOL[raw.lower()]
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except (KeyError, ValueError):
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _coerce(key, value, getattr(base, key))
    return replace(base, **updates)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


# ----------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train: LossBreakdown
    val: LossBreakdown
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    rng_digest: str = ""
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "recon", "rot_matrix", "rot_chamfer", "total", "val_total"])
        for rec in self.epochs:
            t = rec.train
            writer.writerow(
                [rec.epoch] + [f"{v:.12g}" for v in (t.recon, t.rot_matrix, t.rot_chamfer, t.total, rec.val.total)]
            )
        return buf.getvalue()

    def column(self, name: str) -> np.ndarray:
        if name == "val_total":
            return np.array([r.val.total for r in self.epochs])
        return np.array([getattr(r.train, name) for r in self.epochs])


def _as_view(data) -> TrainingView:
    if isinstance(data, Dataset):
        return data.training_view()
    if isinstance(data, TrainingView):
        return data
    raise ConfigurationError(f"expected a Dataset or TrainingView, got {type(data).__name__}")


def prepare_view(config: TrainConfig, data) -> TrainingView:
    """Apply the config's fixed pre-alignment (if any) to the training view."""
    if isinstance(data, Dataset) and config.prealign != "identity":
        return data.prealigned(config.prealign).training_view()
    if config.prealign == "groundtruth":
        raise ConfigurationError("ground-truth pre-alignment needs a Dataset with rotations")
    view = _as_view(data)
    if config.prealign == "pca":
        from .baselines import align_batch

        view = TrainingView(align_batch("pca", view.clouds) @ view.clouds, view.split)
    return view


def batch_loss(model: ArtModel, config: TrainConfig, x: np.ndarray, rot_rng: np.random.Generator | None):
    """Loss for one batch ``(B, 3, N)``; draws fresh rotations from ``rot_rng`` when needed."""
    if not config.art_enabled:
        recon = T.mean(G.chamfer_distance_diff(autoencode(model, x), x))
        return LossBreakdown(recon.item(), 0.0, 0.0, recon.item()), recon
    w = config.weights
    if not config.equivariance_enabled:
        return art_loss(model, x, [], w)
    k = rotations_per_step(config.mode)
    rotations = [G.sample_rotation(config.mode, rot_rng, size=len(x)) for _ in range(k)]
    return art_loss(model, x, rotations, w, mode=config.mode)


def _weighted(records: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(c for _, c in records)
    return LossBreakdown(
        *(float(np.sum([getattr(b, f) * c for b, c in records]) / n) for f in ("recon", "rot_matrix", "rot_chamfer", "total"))
    )


def _digest(*rngs: np.random.Generator) -> str:
    h = hashlib.sha256()
    for rng in rngs:
        h.update(json.dumps(rng.bit_generator.state, sort_keys=True, default=str).encode())
    return h.hexdigest()[:16]


def evaluate_loss(model: ArtModel, config: TrainConfig, clouds: np.ndarray, seed_seq, batch_size: int) -> LossBreakdown:
    """Average training objective on ``clouds`` with a reproducible rotation stream."""
    rng = np.random.default_rng(seed_seq)
    records = []
    for start in range(0, len(clouds), batch_size):
        x = clouds[start : start + batch_size]
        b, _ = batch_loss(model, config, x, rng)
        records.append((b, len(x)))
    return _weighted(records)


def train(config: TrainConfig, data, model: ArtModel | None = None, progress=None) -> tuple[ArtModel, TrainLog]:
    """Train end to end; returns the best-validation model and the per-epoch log.

    ``data`` is a :class:`Dataset` or :class:`TrainingView`.  Only perturbed
    clouds reach the optimiser.  ``progress`` is called as
    ``progress(epoch_record)`` after every epoch.
    """
    view = prepare_view(config, data)
    train_x = view.subset("train")
    val_x = view.subset("val")
    if len(train_x) == 0:
        raise ConfigurationError("training split is empty")
    if len(val_x) == 0:
        raise ConfigurationError("validation split is empty")

    init_ss, order_ss, rot_ss, val_ss = np.random.SeedSequence(config.seed).spawn(4)
    if model is None:
        model = ArtModel(config.net, seed=int(init_ss.generate_state(1)[0]))
    order_rng = np.random.default_rng(order_ss)
    rot_rng = np.random.default_rng(rot_ss)
    params = model.params if config.art_enabled else model.ae_params
    T.zero_grads(model.params)

    log_ = TrainLog()
    best_val = np.inf
    best_state = model.state()
    for epoch in range(config.epochs):
        start = time.perf_counter()
        records = []
        order = order_rng.permutation(len(train_x))
        for step, lo in enumerate(range(0, len(order), config.batch_size)):
            x = train_x[order[lo : lo + config.batch_size]]
            breakdown, total = batch_loss(model, config, x, rot_rng)
            if not np.isfinite(breakdown.total):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            T.backward(total)
            T.adam_step(params, config.lr)
            records.append((breakdown, len(x)))
        val = evaluate_loss(model, config, val_x, val_ss, config.batch_size)
        rec = EpochRecord(epoch, _weighted(records), val, time.perf_counter() - start)
        log_.epochs.append(rec)
        if val.total < best_val:
            best_val = val.total
            best_state = model.state()
            log_.best_epoch = epoch
        log.info(
            "epoch %d recon %.5f rot_matrix %.4f total %.5f val %.5f (%.1fs)",
            epoch, rec.train.recon, rec.train.rot_matrix, rec.train.total, val.total, rec.seconds,
        )
        if progress is not None:
            progress(rec)

    for p in model.params:
        p.node.data[...] = best_state[p.name]
    log_.rng_digest = _digest(order_rng, rot_rng)
    return model, log_


def evaluate_reconstruction(model: ArtModel, data, split: str = "test", batch_size: int = 32) -> float:
    """Mean Chamfer distance between each cloud and its adjoint reconstruction.

    No rotations are sampled; the result is deterministic.
    """
    clouds = _as_view(data).subset(split)
    per_item = reconstruction_errors(model, clouds, batch_size)
    return float(np.mean(per_item))


def reconstruction_errors(model: ArtModel, clouds: np.ndarray, batch_size: int = 32) -> np.ndarray:
    out = []
    for lo in range(0, len(clouds), batch_size):
        x = clouds[lo : lo + batch_size]
        recon, _ = adjoint_forward(model, x)
        out.append(np.atleast_1d(G.chamfer_distance(recon.data, x)))
    if not out:
        raise ConfigurationError("cannot evaluate an empty split")
    return np.concatenate(out)
