"""Command-line entry point: ``artalign {gen,train,align,eval,ablate}``.

Every command writes its outputs through temp-file-then-rename and records a
``run_meta.txt`` next to them.  Errors exit with status 1 and a one-line
message on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path


from . import __version__
from . import data as D
from . import geometry as G
from .errors import ArtError, ConfigurationError
from .evaluation import Method, run_ablation, run_comparison
from .network import ArtModel
from .tensor import atomic_write_bytes
from .training import TrainConfig, load_config, train

OUT_ENV = "ARTALIGN_OUT"

log = logging.getLogger("artalign")


def _default_out(sub: str) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / sub


def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _write_meta(out: Path, command: str, seed: int, body: str = "") -> None:
    text = f"artalign_version = {__version__}\ncommand = {command}\nseed = {seed}\n" + body
    _write_text(out / "run_meta.txt", text)


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise ConfigurationError(f"{what} {path} is not a directory")
    return path


def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigurationError(f"{what} {path} does not exist")
    return path


def _resolve_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config is not None:
        cfg = load_config(_require_file(Path(args.config), "config"), cfg)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = G.parse_mode(args.mode)
    if getattr(args, "family", None) is not None:
        overrides["family"] = args.family
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return replace(cfg, **overrides) if overrides else cfg


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args) -> None:
    out = Path(args.out) if args.out else _default_out("data")
    mode = None if args.mode == "none" else G.parse_mode(args.mode)
    shapes = D.generate(args.family, args.count, args.points, args.seed)
    ds = D.perturb(shapes, mode, args.seed, family=D.family_from_name(args.family).name)
    D.write_corpus(out, ds, args.points)
    _write_meta(
        out,
        "gen",
        args.seed,
        f"family = {args.family}\nmode = {args.mode}\ncount = {args.count}\npoints = {args.points}\n",
    )
    log.info("wrote %d shapes to %s", args.count, out)


def cmd_train(args) -> None:
    data_root = _require_dir(Path(args.data), "data root")
    out = Path(args.out) if args.out else _default_out("train")
    cfg = _resolve_config(args)
    ds = D.load_dataset(data_root, with_groundtruth=cfg.prealign == "groundtruth")
    if ds.family in ("glider", "quadtable") and ds.family != cfg.family:
        log.warning("config family %s differs from corpus family %s", cfg.family, ds.family)
    model, tlog = train(cfg, ds)
    model.save(out / "checkpoint.npz", {"aligner": cfg.aligner, "train": cfg.to_dict()})
    _write_text(out / "trainlog.csv", tlog.to_csv())
    _write_meta(out, "train", cfg.seed, cfg.to_text() + f"data = {data_root}\nrng_digest = {tlog.rng_digest}\n")


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".obj", ".txt", ".xyz") and p.is_file())
        if not files:
            raise ConfigurationError(f"{path}: no point-cloud files")
        return files
    return [_require_file(path, "input")]


def cmd_align(args) -> None:
    ckpt = _require_file(Path(args.checkpoint), "checkpoint")
    inputs = _inputs(Path(args.input))
    out = Path(args.out) if args.out else _default_out("align")
    model, meta = ArtModel.load(ckpt)
    aligner = meta.get("aligner", "art")
    method = Method("aligner", "art" if aligner == "art" else aligner, model)
    for f in inputs:
        cloud, _, _ = G.center_and_normalize(G.load_cloud(f))
        r = method.predict(cloud[None])[0]
        _write_text(out / f"{f.stem}.rot.txt", " ".join(f"{v:.17g}" for v in r.ravel()) + "\n")
        G.save_cloud(out / f"{f.stem}.canonical.obj", r @ cloud)
    _write_meta(out, "align", 0, f"checkpoint = {ckpt}\ninput = {args.input}\n")


def _parse_checkpoints(entries) -> list[Method]:
    methods = []
    for item in entries or []:
        if "=" not in item:
            raise ConfigurationError(f"--checkpoint expects LABEL=PATH, got {item!r}")
        label, path = item.split("=", 1)
        model, meta = ArtModel.load(_require_file(Path(path), "checkpoint"))
        kind = meta.get("aligner", "art")
        if kind == "groundtruth":
            raise ConfigurationError(f"checkpoint {path} was trained on ground-truth aligned data; it has no aligner")
        methods.append(Method(label, kind, model))
    return methods


def cmd_eval(args) -> None:
    data_root = _require_dir(Path(args.data), "data root")
    out = Path(args.out) if args.out else _default_out("eval")
    baseline_names = [m for m in (args.methods or "").split(",") if m.strip()]
    methods = [Method(name.strip(), name.strip()) for name in baseline_names]
    for m in methods:
        if m.kind not in ("identity", "pca"):
            raise ConfigurationError(f"unknown baseline method {m.kind!r}")
    methods += _parse_checkpoints(args.checkpoint)
    if not methods:
        raise ConfigurationError("nothing to evaluate: give --methods and/or --checkpoint")
    ds = D.load_dataset(data_root)
    if ds.rotations is None:
        raise ConfigurationError(f"{data_root}: evaluation needs {D.GROUNDTRUTH}")
    result = run_comparison(ds, methods, split=args.split, quotient=not args.no_quotient)
    _write_text(out / "alignment_cdf.csv", result.cdf_csv())
    _write_text(out / "summary.csv", result.summary_csv())
    _write_meta(out, "eval", 0, f"data = {data_root}\nmethods = {','.join(m.label for m in methods)}\nsplit = {args.split}\n")


def cmd_ablate(args) -> None:
    data_root = _require_dir(Path(args.data), "data root")
    out = Path(args.out) if args.out else _default_out("ablate")
    cfg = _resolve_config(args)
    ds = D.load_dataset(data_root)
    if ds.rotations is None:
        raise ConfigurationError(f"{data_root}: ablation evaluation needs {D.GROUNDTRUTH}")
    res = run_ablation(cfg, ds)
    res.art.save(out / "art" / "checkpoint.npz", {"aligner": "art", "train": cfg.to_dict()})
    res.ablated.save(out / "art-noeq" / "checkpoint.npz", {"aligner": "art", "train": cfg.to_dict()})
    _write_text(out / "art" / "trainlog.csv", res.art_log.to_csv())
    _write_text(out / "art-noeq" / "trainlog.csv", res.ablated_log.to_csv())
    _write_text(out / "alignment_cdf.csv", res.comparison.cdf_csv())
    _write_text(out / "summary.csv", res.comparison.summary_csv())
    _write_meta(out, "ablate", cfg.seed, cfg.to_text() + f"data = {data_root}\n")


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="artalign",
        description="Self-supervised canonical alignment of point clouds with a learned rotate-in, rotate-back transform.",
        epilog=f"Outputs default to $${OUT_ENV}/<command> (or ./runs/<command>) when --out is omitted.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic, rotation-perturbed corpus")
    g.add_argument("--family", choices=["glider", "quadtable"], default="glider")
    g.add_argument("--count", type=int, default=500, help="number of shapes (default 500)")
    g.add_argument("--points", type=int, default=256, help="points per shape (default 256)")
    g.add_argument("--mode", choices=["azimuthal", "so3", "none"], default="azimuthal",
                   help="perturbation: rotations about +z, uniform SO(3), or none")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="corpus root directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train an ART (or plain) auto-encoder")
    t.add_argument("--config", help="flat 'key = value' config file")
    t.add_argument("--data", required=True, help="corpus root written by 'gen'")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--mode", choices=["azimuthal", "so3"], help="override the config rotation mode")
    t.add_argument("--family", choices=["glider", "quadtable"], help="override the config family")
    t.add_argument("--epochs", type=int, help="override the config epoch count")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("align", help="predict canonical rotations for point-cloud files")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--input", required=True, help="a point-cloud file or a directory of them")
    a.add_argument("--out", help="output directory")
    a.set_defaults(func=cmd_align)

    e = sub.add_parser("eval", help="pairwise alignment CDF and reconstruction summary")
    e.add_argument("--data", required=True, help="corpus root with ground truth")
    e.add_argument("--methods", default="", help="comma-separated baselines: identity,pca")
    e.add_argument("--checkpoint", action="append", metavar="LABEL=PATH", help="learned method (repeatable)")
    e.add_argument("--split", choices=list(D.SPLITS), default="test")
    e.add_argument("--no-quotient", action="store_true", help="do not quotient out the family symmetry group")
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="train ART with and without the equivariance losses and compare")
    b.add_argument("--config", help="flat 'key = value' config file")
    b.add_argument("--data", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--mode", choices=["azimuthal", "so3"])
    b.add_argument("--family", choices=["glider", "quadtable"])
    b.add_argument("--epochs", type=int)
    b.add_argument("--out", help="output directory")
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ArtError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"artalign {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
