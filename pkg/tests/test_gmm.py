from __future__ import annotations

import numpy as np
import pytest

from replayguard import gmm as G


def random_model(rng, K=3, D=2):
    w = rng.uniform(0.5, 1.5, K)
    return G.GmmModel(w / w.sum(), rng.normal(0, 2, (K, D)), rng.uniform(0.5, 2.0, (K, D)), np.full(D, 1e-3))


def direct_density(m, x):
    """Plain mixture sum of diagonal Gaussians, no log-sum-exp."""
    total = 0.0
    for w, mu, var in zip(m.weights, m.means, m.variances):
        total += w * np.prod(np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2 * np.pi * var))
    return total


def test_single_component_is_sample_moments():
    X = np.random.default_rng(0).normal(3, 2, (4, 500))
    m = G.fit_gmm(X, K=1, iters=3)
    np.testing.assert_allclose(m.means[0], X.mean(1), rtol=1e-12)
    np.testing.assert_allclose(m.variances[0], X.var(1), rtol=1e-10)
    assert m.weights[0] == 1.0


def test_two_blobs_recovered():
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.normal([0, 0], 0.5, (300, 2)), rng.normal([6, -4], 0.5, (700, 2))]).T
    m = G.fit_gmm(X, K=2, iters=10)
    order = np.argsort(m.means[:, 0])
    np.testing.assert_allclose(m.means[order], [[0, 0], [6, -4]], atol=0.1)
    np.testing.assert_allclose(m.weights[order], [0.3, 0.7], atol=0.05)


@pytest.mark.parametrize("K", [3, 8])
def test_em_log_likelihood_non_decreasing(K):
    rng = np.random.default_rng(K)
    X = np.concatenate([rng.normal(c, 1.0, (200, 3)) for c in (-3, 0, 4)]).T
    hist = []
    G.fit_gmm(X, K=K, iters=15, history=hist)
    steps = np.diff(hist)
    assert np.all(steps >= -1e-6 * np.abs(np.array(hist[1:])))


def test_variances_respect_floor():
    X = np.random.default_rng(2).normal(0, 1, (2, 400))
    X[1] = np.round(X[1])  # repeated values invite collapsing components
    m = G.fit_gmm(X, K=8, iters=10)
    assert np.all(m.variances >= m.variance_floor - 1e-15)
    np.testing.assert_allclose(m.variance_floor, 1e-3 * X.var(1))
    assert abs(m.weights.sum() - 1) < 1e-9


def test_non_power_of_two_component_count():
    X = np.random.default_rng(4).normal(0, 1, (3, 300))
    assert G.fit_gmm(X, K=5, iters=2).K == 5


def test_standard_normal_at_mode():
    m = G.GmmModel(np.ones(1), np.zeros((1, 1)), np.ones((1, 1)), np.full(1, 1e-3))
    assert G.gmm_log_likelihood(m, np.zeros((1, 1)))[0] == pytest.approx(-0.5 * np.log(2 * np.pi))
    assert G.gmm_log_likelihood(m, np.zeros((1, 1)))[0] == pytest.approx(-0.9189385, abs=1e-7)


def test_symmetric_mixture_midpoint():
    a = 1.5
    m = G.GmmModel(np.array([0.5, 0.5]), np.array([[-a], [a]]), np.ones((2, 1)), np.full(1, 1e-3))
    expected = np.log(np.exp(-0.5 * a * a) / np.sqrt(2 * np.pi))
    assert G.gmm_log_likelihood(m, np.zeros((1, 1)))[0] == pytest.approx(expected, abs=1e-12)


def test_log_likelihood_matches_direct_sum():
    rng = np.random.default_rng(5)
    m = random_model(rng, K=4, D=3)
    X = rng.normal(0, 2, (3, 20))
    ll = G.gmm_log_likelihood(m, X)
    direct = [np.log(direct_density(m, X[:, i])) for i in range(20)]
    np.testing.assert_allclose(ll, direct, atol=1e-8)


def test_log_likelihood_finite_far_from_model():
    m = random_model(np.random.default_rng(6), K=2, D=2)
    assert np.all(np.isfinite(G.gmm_log_likelihood(m, np.full((2, 1), 1e4))))


def test_llr_identical_models_zero():
    rng = np.random.default_rng(7)
    m = random_model(rng)
    assert G.gmm_llr_score(m, m, rng.normal(size=(2, 30))) == 0.0


def test_llr_single_frame_and_order():
    rng = np.random.default_rng(8)
    a, b = random_model(rng), random_model(rng)
    x = rng.normal(size=(2, 1))
    one = G.gmm_log_likelihood(a, x)[0] - G.gmm_log_likelihood(b, x)[0]
    assert G.gmm_llr_score(a, b, x) == one
    X = rng.normal(size=(2, 40))
    perm = rng.permutation(40)
    assert G.gmm_llr_score(a, b, X[:, perm]) == pytest.approx(G.gmm_llr_score(a, b, X), abs=1e-12)


def test_llr_positive_on_bona_samples():
    rng = np.random.default_rng(9)
    bona = G.GmmModel(np.ones(1), np.array([[2.0, 2.0]]), np.ones((1, 2)), np.full(2, 1e-3))
    spoof = G.GmmModel(np.ones(1), np.array([[-2.0, -2.0]]), np.ones((1, 2)), np.full(2, 1e-3))
    wins = sum(G.gmm_llr_score(bona, spoof, rng.normal(2.0, 1.0, (2, 1))) > 0 for _ in range(1000))
    assert wins > 990


def test_weight_doubling_renormalised_is_neutral():
    rng = np.random.default_rng(10)
    a, b = random_model(rng), random_model(rng)
    w2 = 2 * a.weights
    a2 = G.GmmModel(w2 / w2.sum(), a.means, a.variances, a.variance_floor)
    X = rng.normal(size=(2, 10))
    assert G.gmm_llr_score(a2, b, X) == pytest.approx(G.gmm_llr_score(a, b, X), abs=1e-12)


def test_fit_is_reproducible():
    X = np.random.default_rng(11).normal(0, 1, (4, 600))
    a = G.fit_gmm(X, K=4, iters=5, seed=3, max_frames=400)
    b = G.fit_gmm(X, K=4, iters=5, seed=3, max_frames=400)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.variances, b.variances)


def test_fit_errors():
    with pytest.raises(ValueError, match="at least K"):
        G.fit_gmm(np.zeros((2, 3)), K=4)
    X = np.ones((2, 10))
    X[0, 3] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        G.fit_gmm(X, K=1)


def test_dimension_mismatch():
    m = random_model(np.random.default_rng(12), D=2)
    with pytest.raises(ValueError, match="dimension"):
        G.gmm_log_likelihood(m, np.zeros((3, 5)))
    other = random_model(np.random.default_rng(13), D=3)
    with pytest.raises(ValueError, match="differ"):
        G.gmm_llr_score(m, other, np.zeros((2, 5)))


def test_model_file_roundtrip(tmp_path):
    m = random_model(np.random.default_rng(14), K=5, D=3)
    G.save_gmm(m, tmp_path / "m.agmm")
    back = G.load_gmm(tmp_path / "m.agmm")
    for name in ("weights", "means", "variances", "variance_floor"):
        assert np.array_equal(getattr(m, name), getattr(back, name))
    assert (tmp_path / "m.agmm").read_bytes()[:4] == b"AGMM"


def test_model_file_corrupt(tmp_path):
    p = tmp_path / "m.agmm"
    G.save_gmm(random_model(np.random.default_rng(15)), p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(G.ModelFileError, match="truncated"):
        G.load_gmm(p)
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(G.ModelFileError):
        G.load_gmm(p)
