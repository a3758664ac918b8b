import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from artalign import data as D
from artalign import geometry as G
from artalign.errors import ConfigurationError, InsufficientDataError
from artalign.evaluation import (
    DEFAULT_THRESHOLDS,
    Comparison,
    Method,
    alignment_report,
    canonical_orientation_residual,
    pairwise_cdf,
    pairwise_distances,
    run_comparison,
)
from artalign.network import ArtModel
from test_network import SMALL


@pytest.fixture(scope="module")
def dataset():
    return D.perturb(D.generate("glider", 60, 64, seed=0), G.Azimuthal(), seed=2)


class Oracle(Method):
    """Predicts the exact inverse perturbation (needs the dataset's ground truth)."""

    def __init__(self, ds):
        super().__init__("oracle", "oracle")
        self.lookup = {c.tobytes(): r.T for c, r in zip(ds.clouds, ds.rotations)}

    def predict(self, clouds, batch_size=32):
        return np.stack([self.lookup[c.tobytes()] for c in clouds])


def test_oracle_residual_is_identity(dataset):
    r_pred = np.swapaxes(dataset.rotations, -1, -2)
    q = canonical_orientation_residual(r_pred, dataset.rotations)
    np.testing.assert_allclose(q, np.broadcast_to(np.eye(3), q.shape), atol=1e-12)
    rep = alignment_report(Oracle(dataset), dataset)
    assert np.all(rep.cdf == 1.0) and rep.median_pairwise < 1e-5


def test_identity_method_residual_is_perturbation(dataset):
    q = canonical_orientation_residual(Method("id", "identity").predict(dataset.clouds), dataset.rotations)
    np.testing.assert_array_equal(q, dataset.rotations)


def test_missing_ground_truth():
    with pytest.raises(ConfigurationError):
        canonical_orientation_residual(np.eye(3), None)


def test_identical_residuals_give_full_cdf(rng):
    q = np.broadcast_to(G.sample_rotation(G.FullSO3(), rng), (10, 3, 3))
    rep = pairwise_cdf(q)
    np.testing.assert_array_equal(rep.cdf, np.ones(len(DEFAULT_THRESHOLDS)))
    assert len(rep.distances) == 45


def test_two_clusters_half_mass(rng):
    a = G.sample_rotation(G.FullSO3(), rng)
    b = G.rot_z(90) @ a
    q = np.stack([a] * 5 + [b] * 5)
    rep = pairwise_cdf(q)
    # 20 of 45 pairs lie within a cluster
    assert rep.fraction_below(10) == pytest.approx(20 / 45)
    assert rep.fraction_below(90.0 + 1e-9) == 1.0


def test_haar_residuals_match_uniform_distance_law():
    q = G.sample_rotation(G.FullSO3(), np.random.default_rng(7), size=400)
    d = np.radians(pairwise_cdf(q).distances)
    assert stats.kstest(d, lambda t: (t - np.sin(t)) / np.pi).statistic < 0.05


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_cdf_monotone_and_complete(n, seed):
    q = G.sample_rotation(G.FullSO3(), np.random.default_rng(seed), size=n)
    rep = pairwise_cdf(q)
    assert np.all(np.diff(rep.cdf) >= 0)
    assert rep.cdf[-1] == 1.0
    assert len(rep.distances) == n * (n - 1) // 2


def test_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        pairwise_cdf(G.sample_rotation(G.FullSO3(), rng, size=1))


def test_symmetry_quotient(rng):
    group = D.symmetry_group("quadtable")
    base = G.sample_rotation(G.FullSO3(), rng)
    q = np.stack([base @ s for s in group])
    np.testing.assert_allclose(pairwise_distances(q, group), 0.0, atol=1e-5)
    assert pairwise_distances(q).max() == pytest.approx(180.0)
    # quotiented distance never exceeds the raw one
    r = G.sample_rotation(G.FullSO3(), rng, size=15)
    assert np.all(pairwise_distances(r, group) <= pairwise_distances(r) + 1e-9)


def test_quadtable_report_uses_quotient():
    ds = D.perturb(D.generate("quadtable", 30, 64, seed=0), G.Azimuthal(), seed=0, family="quadtable")
    ident = np.swapaxes(ds.rotations, -1, -2)
    # an aligner off by a symmetry rotation per shape is still perfect
    spun = np.stack([D.symmetry_group("quadtable")[i % 4] @ r for i, r in enumerate(ident)])

    class Spun(Method):
        def predict(self, clouds, batch_size=32):
            idx = [next(k for k, c in enumerate(ds.clouds) if np.array_equal(c, x)) for x in clouds]
            return spun[idx]

    assert alignment_report(Spun("s", "spun"), ds).cdf[0] == 1.0
    assert alignment_report(Spun("s", "spun"), ds, quotient=False).cdf[0] < 1.0


def test_art_method_needs_model(dataset):
    with pytest.raises(ConfigurationError):
        Method("art", "art").predict(dataset.clouds[:2])
    with pytest.raises(ConfigurationError):
        Method("x", "nonsense").predict(dataset.clouds[:2])


def test_fresh_art_model_behaves_like_identity(dataset):
    art = alignment_report(Method("art", "art", ArtModel(SMALL)), dataset)
    ident = alignment_report(Method("identity", "identity"), dataset)
    np.testing.assert_allclose(art.distances, ident.distances)


def test_comparison_outputs(dataset):
    methods = [Method("identity", "identity"), Method("pca", "pca"), Method("art", "art", ArtModel(SMALL))]
    result = run_comparison(dataset, methods)
    cdf_lines = result.cdf_csv().splitlines()
    assert cdf_lines[0] == "method,threshold_deg,fraction"
    assert len(cdf_lines) == 1 + 3 * len(DEFAULT_THRESHOLDS)
    assert cdf_lines[1].startswith("identity,5,")
    summary = result.summary_csv().splitlines()
    assert summary[0] == "method,median_pairwise_deg,mean_test_chamfer"
    assert [s.split(",")[0] for s in summary[1:]] == ["identity", "pca", "art"]
    assert summary[1].endswith(",nan") and not summary[3].endswith(",nan")
    assert result.cdf_csv() == run_comparison(dataset, methods).cdf_csv()


def test_duplicate_labels(dataset):
    with pytest.raises(ConfigurationError):
        run_comparison(dataset, [Method("a", "identity"), Method("a", "pca")])


def test_unknown_report_label():
    with pytest.raises(KeyError):
        Comparison([], {}).report("missing")
