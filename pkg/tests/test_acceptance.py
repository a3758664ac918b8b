"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Criteria 5-8 rest on long training runs (see ``acceptance_runs.py``) whose
results are cached per source digest, so only the first run is slow.
"""

import csv
import io
import time
import zlib

import numpy as np
import pytest
from scipy import stats

import acceptance_runs as runs
from artalign import data as D
from artalign import geometry as G
from artalign import tensor as T
from artalign.baselines import pca_align
from artalign.cli import main as cli
from artalign.evaluation import Method, alignment_report
from artalign.losses import rot_chamfer_loss, rot_matrix_loss
from artalign.network import ArtModel
from artalign.rotrep import rot6d_to_matrix
from artalign.training import TrainConfig, batch_loss
from gradcheck import numerical_grad, rel_error
from test_tensor import OPS, grad_of

slow = pytest.mark.slow


def _check(build, ref, values):
    """Largest relative error over all inputs of one randomized finite-difference check."""
    grads = grad_of(build, *values)
    worst = 0.0
    for k, g in enumerate(grads):
        def f(v, k=k):
            args = list(values)
            args[k] = v
            return float(ref(*args))

        worst = max(worst, rel_error(g, numerical_grad(f, values[k])))
    return worst


def _nn_gap(a, b):
    d = ((a[:, :, None] - b[:, None, :]) ** 2).sum(0)
    s1, s0 = np.sort(d, axis=1), np.sort(d, axis=0)
    return min((s1[:, 1] - s1[:, 0]).min(), (s0[1] - s0[0]).min())


def _tie_free_pair(rng, n, m):
    while True:
        a, b = rng.normal(size=(3, n)), rng.normal(size=(3, m))
        if _nn_gap(a, b) > 1e-3:  # mask nearest-neighbour ties
            return a, b


def _brute_chamfer(a, b):
    d = ((a[:, :, None] - b[:, None, :]) ** 2).sum(0)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def _gradient_suite():
    rng = np.random.default_rng(2023)
    worst = {}
    for name, (build, ref, shapes, sampler) in OPS.items():
        op_rng = np.random.default_rng(zlib.crc32(name.encode()))
        worst[name] = max(
            _check(build, ref, [sampler(op_rng, s) if sampler else op_rng.normal(size=s) for s in shapes])
            for _ in range(5)
        )

    weights = rng.normal(size=(3, 3))
    errs = []
    while len(errs) < 5:
        v = rng.normal(size=6)
        cos = v[:3] @ v[3:] / np.linalg.norm(v[:3]) / np.linalg.norm(v[3:])
        if abs(cos) > 0.98:  # mask the parallel-halves singularity
            continue
        errs.append(_check(lambda n: T.sum(T.mul(rot6d_to_matrix(n), weights)), lambda u: (rot6d_to_matrix(u) * weights).sum(), [v]))
    worst["rot6d_to_matrix"] = max(errs)

    errs = []
    for _ in range(5):
        a, b = _tie_free_pair(rng, 7, 6)
        errs.append(_check(lambda n: G.chamfer_distance_diff(n, b), lambda u: _brute_chamfer(u, b), [a]))
    worst["chamfer_distance"] = max(errs)

    errs = []
    for _ in range(5):
        rt = G.sample_rotation(G.FullSO3(), rng)
        r1, r2 = rng.normal(size=(2, 3, 3))
        errs.append(
            _check(
                lambda p, q: rot_matrix_loss(p, q, rt),
                lambda p, q: ((rt - q.T @ p) ** 2).sum(),
                [r1, r2],
            )
        )
    worst["rot_matrix_loss"] = max(errs)

    errs = []
    while len(errs) < 5:
        x = rng.normal(size=(3, 6))
        rt = G.sample_rotation(G.FullSO3(), rng)
        r1, r2 = G.sample_rotation(G.FullSO3(), rng, size=2)
        if _nn_gap(r2.T @ r1 @ x, rt @ x) < 1e-3:
            continue
        errs.append(
            _check(
                lambda p, q: rot_chamfer_loss(rt @ x, x, p, q),
                lambda p, q: _brute_chamfer(q.T @ p @ x, rt @ x),
                [r1, r2],
            )
        )
    worst["rot_chamfer_loss"] = max(errs)
    return worst


def test_criterion_01_gradient_suite(verdict):
    start = time.perf_counter()
    worst = _gradient_suite()
    seconds = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and seconds < 60
    verdict(1, ok, f"{len(worst)} ops x 5 points, worst rel err {err:.2e} ({name}), {seconds:.1f}s")


def test_criterion_02_so3_correctness(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    r = rot6d_to_matrix(rng.normal(size=(1000, 6)))
    ortho = np.abs(np.swapaxes(r, -1, -2) @ r - np.eye(3)).max()
    det = np.abs(np.linalg.det(r) - 1).max()
    haar = G.sample_rotation(G.FullSO3(), rng, size=100_000)
    trace = np.trace(haar, axis1=1, axis2=2)
    theta = np.arccos(np.clip((trace - 1) / 2, -1, 1))
    ks = stats.kstest(theta, lambda t: (t - np.sin(t)) / np.pi).statistic
    seconds = time.perf_counter() - start
    ok = ortho < 1e-9 and det < 1e-9 and ks < 0.01 and abs(trace.mean()) < 0.02 and seconds < 60
    verdict(2, ok, f"orthonormality {ortho:.1e}, det {det:.1e}, KS {ks:.4f}, mean trace {trace.mean():+.4f}, {seconds:.1f}s")


def test_criterion_03_identity_init_equivalence(verdict):
    ds = runs.build_dataset(runs.GLIDER)
    train_x = ds.training_view().subset("train")
    results = {}
    for label, cfg in {
        "ae": TrainConfig(art_enabled=False),
        "art": TrainConfig(),
        "art_noeq": TrainConfig(equivariance_enabled=False),
    }.items():
        # same seed streams as training.train: init, order, rotations
        init_ss, order_ss, rot_ss, _ = np.random.SeedSequence(cfg.seed).spawn(4)
        model = ArtModel(cfg.net, seed=int(init_ss.generate_state(1)[0]))
        order = np.random.default_rng(order_ss).permutation(len(train_x))
        parts, total = batch_loss(model, cfg, train_x[order[: cfg.batch_size]], np.random.default_rng(rot_ss))
        T.backward(total)
        results[label] = (parts, [p.grad.copy() for p in model.ae_params])
    ae, art, noeq = results["ae"][0], results["art"][0], results["art_noeq"][0]
    same_grads = all(np.array_equal(a, b) for a, b in zip(results["ae"][1], results["art_noeq"][1]))
    ok = art.recon == ae.total and noeq.total == ae.total and same_grads
    verdict(
        3,
        ok,
        f"step-0 AE loss {ae.total!r}; ART recon {art.recon!r}; ART (no equivariance) total {noeq.total!r}; "
        f"AE gradients identical: {same_grads}",
    )


def test_criterion_04_equivariance_loss_sanity(verdict):
    quarter = rot_matrix_loss(np.eye(3), T.constant(np.eye(3)), G.rot_z(90)).item()
    rng = np.random.default_rng(4)
    r1 = G.sample_rotation(G.FullSO3(), rng, size=100)
    rt = G.sample_rotation(G.FullSO3(), rng, size=100)
    r2 = r1 @ np.swapaxes(rt, -1, -2)
    worst = max(rot_matrix_loss(r1[i], T.constant(r2[i]), rt[i]).item() for i in range(100))
    ok = quarter == 4.0 and worst < 1e-12
    verdict(4, ok, f"L(I, I, Rz90) = {quarter!r}, worst equivariant-pair loss {worst:.1e}")


@slow
def test_criterion_05_alignment_trend(verdict):
    art = runs.glider_art()
    seed = art["key"]["config"]["seed"]
    ok = art["cdf10"] >= runs.CDF10_TARGET
    verdict(5, ok, f"glider ART seed {seed}: cdf(10 deg) = {art['cdf10']:.3f}, median pairwise {art['median_pairwise']:.2f} deg")


@slow
def test_criterion_06_ablation_trend(verdict):
    art = runs.glider_art()
    seed = art["key"]["config"]["seed"]
    noeq = runs.glider_ablation(seed)
    gap = art["cdf10"] - noeq["cdf10"]
    verdict(6, gap >= 0.15, f"cdf(10 deg) ART {art['cdf10']:.3f} vs without equivariance {noeq['cdf10']:.3f} (gap {gap:.3f})")


@slow
def test_criterion_07_reconstruction_trend(verdict):
    art = runs.glider_art()["test_chamfer"]
    perturbed = runs.glider_autoencoder("identity")["test_chamfer"]
    prealigned = runs.glider_autoencoder("groundtruth")["test_chamfer"]
    ok = perturbed > art and art <= 1.15 * prealigned
    verdict(
        7,
        ok,
        f"test Chamfer AE perturbed {perturbed:.5f}, ART perturbed {art:.5f}, AE pre-aligned {prealigned:.5f} "
        f"(ratio {art / prealigned:.3f})",
    )


@slow
def test_criterion_08_symmetry_handling(verdict):
    art = runs.quadtable_art()
    ds = runs.build_dataset(runs.QUADTABLE)
    pca = alignment_report(Method("pca", "pca"), ds).fraction_below(10.0)
    verdict(8, art["cdf10"] > pca, f"quotiented cdf(10 deg) on QuadTable: ART {art['cdf10']:.3f} vs PCA {pca:.3f}")


def test_criterion_09_pca_self_consistency(verdict):
    rng = np.random.default_rng(9)
    shape = D.generate("glider", 1, 256, seed=11)[0]
    canon = pca_align(shape) @ shape
    worst = 0.0
    for _ in range(100):
        x = G.sample_rotation(G.FullSO3(), rng) @ shape
        worst = max(worst, G.chamfer_distance(pca_align(x) @ x, canon))
    verdict(9, worst < 1e-3, f"worst Chamfer over 100 re-orientations {worst:.2e}")


TINY_CONFIG = "epochs = 2\nbatch_size = 8\nlatent = 8\nnum_out = 64\npoint_widths = 16,32\nrot_head_widths = 16\ndecoder_widths = 32\n"


def _csv_outputs(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CONFIG)
    trees = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        data = root / "data"
        codes = [
            cli(["gen", "--count", "30", "--points", "64", "--seed", "5", "--out", str(data)]),
            cli(["train", "--config", str(cfg), "--data", str(data), "--seed", "5", "--out", str(root / "train")]),
            cli(["eval", "--data", str(data), "--methods", "identity,pca", "--checkpoint", f"art={root / 'train' / 'checkpoint.npz'}", "--out", str(root / "eval")]),
            cli(["ablate", "--config", str(cfg), "--data", str(data), "--seed", "5", "--out", str(root / "ablate")]),
        ]
        assert codes == [0, 0, 0, 0]
        trees.append(_csv_outputs(root))
        trees[-1].update({p.relative_to(root).as_posix(): p.read_bytes() for p in data.rglob("*.txt")})
    same = trees[0] == trees[1]
    csvs = sorted(k for k in trees[0] if k.endswith(".csv"))
    verdict(
        10,
        same and len(csvs) == 7,
        f"gen/train/eval/ablate rerun: {len(trees[0])} outputs ({len(csvs)} CSV) {'identical' if same else 'DIFFER'}",
    )


# -- training-loop smoke properties on the cached default runs ----------------


def _column(run, name):
    rows = list(csv.DictReader(io.StringIO(run["trainlog"])))
    return np.array([float(r[name]) for r in rows])


@slow
def test_default_run_loss_halves():
    total = _column(runs.glider_art(), "total")
    assert total[-1] < 0.5 * total[0]


@slow
def test_default_run_equivariance_loss_trend():
    rm = _column(runs.glider_art(), "rot_matrix")
    assert rm[-10:].mean() < 0.1 * rm[:10].mean()
