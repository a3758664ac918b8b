"""Rotation predictor and point-cloud auto-encoder built on :mod:`artalign.tensor`.

Both encoders are PointNet-style: a shared per-point MLP, max pooling over
points, then a fully connected head.  The rotation head ends in a 6D output
that is zero at initialisation and offset by the identity, so a fresh model
predicts the identity rotation for every input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .rotrep import identity_offset, rot6d_to_matrix
from .tensor import DiffNode, Parameter


@dataclass(frozen=True)
class NetConfig:
    point_widths: tuple[int, ...] = (64, 128, 256)
    rot_head_widths: tuple[int, ...] = (128,)
    latent: int = 64
    decoder_widths: tuple[int, ...] = (256, 512)
    num_out: int = 256
    refine_steps: int = 2

    def __post_init__(self):
        for name in ("point_widths", "rot_head_widths", "decoder_widths"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.latent < 1 or self.num_out < 1 or self.refine_steps < 1:
            raise ValueError("latent, num_out and refine_steps must be positive")


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class _PointEncoder:
    """Shared per-point MLP + max pool + FC head."""

    def __init__(self, prefix: str, point_widths, head_widths, out_dim, rng, zero_last=False):
        self.point_layers: list[tuple[Parameter, Parameter]] = []
        fan = 3
        for i, w in enumerate(point_widths):
            self.point_layers.append(
                (
                    Parameter.create(f"{prefix}.point{i}.w", _he(rng, fan, (w, fan))),
                    Parameter.create(f"{prefix}.point{i}.b", np.zeros((w, 1))),
                )
            )
            fan = w
        self.head_layers: list[tuple[Parameter, Parameter]] = []
        dims = list(head_widths) + [out_dim]
        for i, w in enumerate(dims):
            last = i == len(dims) - 1
            if last and zero_last:
                weight = np.zeros((fan, w))
            elif last:
                weight = rng.standard_normal((fan, w)) * np.sqrt(1.0 / fan)
            else:
                weight = _he(rng, fan, (fan, w))
            self.head_layers.append(
                (
                    Parameter.create(f"{prefix}.head{i}.w", weight),
                    Parameter.create(f"{prefix}.head{i}.b", np.zeros(w)),
                )
            )
            fan = w

    @property
    def params(self) -> list[Parameter]:
        return [p for layer in self.point_layers + self.head_layers for p in layer]

    def __call__(self, x) -> DiffNode:
        """``(B, 3, N) -> (B, out_dim)``."""
        x = T.as_node(x)
        batch, _, n = x.shape
        # lay points of the whole batch side by side so each layer is one GEMM
        h = T.reshape(T.swapaxes(x, 0, 1), (3, batch * n))
        for w, b in self.point_layers:
            h = T.relu(T.add(T.matmul(w.node, h), b.node))
        h = T.max_over_points(T.reshape(h, (h.shape[0], batch, n)))
        h = T.transpose(h)
        for i, (w, b) in enumerate(self.head_layers):
            h = T.add(T.matmul(h, w.node), b.node)
            if i < len(self.head_layers) - 1:
                h = T.relu(h)
        return h


class _Decoder:
    def __init__(self, prefix: str, latent: int, widths, num_out: int, rng):
        self.num_out = num_out
        self.layers: list[tuple[Parameter, Parameter]] = []
        fan = latent
        dims = list(widths) + [3 * num_out]
        for i, w in enumerate(dims):
            last = i == len(dims) - 1
            std = np.sqrt((1.0 if last else 2.0) / fan)
            self.layers.append(
                (
                    Parameter.create(f"{prefix}.fc{i}.w", rng.standard_normal((fan, w)) * std),
                    Parameter.create(f"{prefix}.fc{i}.b", np.zeros(w)),
                )
            )
            fan = w

    @property
    def params(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def __call__(self, z: DiffNode) -> DiffNode:
        h = z
        for i, (w, b) in enumerate(self.layers):
            h = T.add(T.matmul(h, w.node), b.node)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return T.reshape(h, (h.shape[0], 3, self.num_out))


class ArtModel:
    """Rotation predictor R_A plus the downstream auto-encoder.

    Rotation-branch and auto-encoder weights are drawn from independent
    streams of ``seed`` so the auto-encoder initialisation does not depend on
    whether the rotation branch is used.
    """

    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        self.config = config or NetConfig()
        c = self.config
        rot_ss, enc_ss, dec_ss = np.random.SeedSequence(seed).spawn(3)
        self.rot_encoder = _PointEncoder(
            "rot", c.point_widths, c.rot_head_widths, 6, np.random.default_rng(rot_ss), zero_last=True
        )
        self.ae_encoder = _PointEncoder(
            "enc", c.point_widths, c.rot_head_widths, c.latent, np.random.default_rng(enc_ss)
        )
        self.ae_decoder = _Decoder("dec", c.latent, c.decoder_widths, c.num_out, np.random.default_rng(dec_ss))

    @property
    def refine_steps(self) -> int:
        return self.config.refine_steps

    @property
    def rot_params(self) -> list[Parameter]:
        return self.rot_encoder.params

    @property
    def ae_params(self) -> list[Parameter]:
        return self.ae_encoder.params + self.ae_decoder.params

    @property
    def params(self) -> list[Parameter]:
        return self.rot_params + self.ae_params

    def param_count(self, which: str = "all") -> int:
        group = {"all": self.params, "rot": self.rot_params, "ae": self.ae_params}[which]
        return int(np.sum([p.data.size for p in group]))

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def save(self, path, meta: dict | None = None) -> None:
        info = {"net": asdict(self.config)}
        if meta:
            info.update(meta)
        T.save_parameters(path, self.params, info)

    @classmethod
    def load(cls, path) -> tuple["ArtModel", dict]:
        params, meta = T.load_parameters(path)
        model = cls(NetConfig(**meta["net"]))
        by_name = {p.name: p for p in params}
        for p in model.params:
            src = by_name[p.name]
            if src.data.shape != p.data.shape:
                raise T.ShapeError(f"{path}: parameter {p.name} has shape {src.data.shape}, expected {p.data.shape}")
            p.node.data[...] = src.data
            p.adam_m, p.adam_v, p.step_count = src.adam_m, src.adam_v, src.step_count
        return model, meta


def _batched(x):
    node = T.as_node(x)
    if node.ndim == 2:
        return T.reshape(node, (1,) + node.shape), True
    return node, False


def _unbatch(node: DiffNode, squeeze: bool) -> DiffNode:
    return T.reshape(node, node.shape[1:]) if squeeze else node


def predict_rotation(model: ArtModel, x) -> DiffNode:
    """One forward pass of the rotation predictor: ``(..., 3, N) -> (..., 3, 3)``."""
    xb, squeeze = _batched(x)
    raw = model.rot_encoder(xb)
    return _unbatch(rot6d_to_matrix(T.add(raw, identity_offset())), squeeze)


def iterative_refine(model: ArtModel, x, k: int | None = None) -> DiffNode:
    """Compose ``k`` predictions, each made on the cloud rotated by the previous estimate."""
    k = model.refine_steps if k is None else k
    if k < 1:
        raise ValueError("refinement needs at least one step")
    xb, squeeze = _batched(x)
    r = predict_rotation(model, xb)
    for _ in range(k - 1):
        r = T.matmul(predict_rotation(model, T.matmul(r, xb)), r)
    return _unbatch(r, squeeze)


def encode(model: ArtModel, x) -> DiffNode:
    xb, squeeze = _batched(x)
    return _unbatch(model.ae_encoder(xb), squeeze)


def autoencode(model: ArtModel, x) -> DiffNode:
    """Reconstruct ``num_out`` points from a (canonically oriented) cloud."""
    xb, squeeze = _batched(x)
    return _unbatch(model.ae_decoder(model.ae_encoder(xb)), squeeze)


Downstream = Callable[[ArtModel, object], DiffNode]
