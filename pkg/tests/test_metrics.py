import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slfi import accel
from slfi.metrics import (
    GmmModel,
    MetricError,
    ModeSet,
    assign_modes,
    effective_sample_size,
    error_decomposition,
    gmm_fit,
    gmm_responsibilities,
    inception_score,
    kernel_sum,
    median_bandwidth,
    missed_mode,
    mmd2,
    mmd2_empirical,
    mmd_permutation_test,
    sample_imbalance,
)
from slfi.simulators import get_simulator, slcp_posterior_sampler


@pytest.fixture(scope="module")
def slcp256():
    return get_simulator("slcp256")


@pytest.fixture(scope="module")
def modes256(slcp256):
    return ModeSet.for_simulator(slcp256)


def naive_mmd2(x, y, sigma):
    k = lambda a, b: math.exp(-np.sum((a - b) ** 2) / (2 * sigma**2))  # noqa: E731
    n, m = len(x), len(y)
    kxx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    kyy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    kxy = sum(k(x[i], y[j]) for i in range(n) for j in range(m)) / (n * m)
    return kxx + kyy - 2 * kxy


# ------------------------------------------------------------- modes


def test_all_modes_covered(slcp256, modes256):
    assert missed_mode(slcp256.modes, modes256) == 0
    assert sample_imbalance(slcp256.modes, modes256) == 0.0


def test_empty_samples(modes256):
    empty = np.empty((0, 8))
    assert missed_mode(empty, modes256) == 256
    assert math.isnan(sample_imbalance(empty, modes256))


def test_single_orthant_imbalance_exact(slcp256, modes256):
    pts = np.tile(slcp256.modes[3], (500, 1))
    assert sample_imbalance(pts, modes256) == 1.9921875


def test_radius_rule():
    ms = ModeSet(np.array([[0.0, 0.0], [5.0, 5.0]]), "radius", 1.0)
    assert assign_modes(np.array([[0.5, 0.5], [4.5, 5.0], [2.5, 2.5]]), ms).tolist() == [0, 1, -1]


def test_modeset_validation():
    with pytest.raises(MetricError):
        ModeSet(np.array([[1.0, 1.0], [2.0, 2.0]]), "orthant")
    with pytest.raises(MetricError):
        ModeSet(np.array([[1.0]]), "radius")
    with pytest.raises(MetricError):
        ModeSet(np.array([[1.0]]), "voronoi")


def test_exact_posterior_draws_balanced(slcp256, modes256):
    draws = slcp_posterior_sampler(slcp256)(1000, np.random.default_rng(0))
    assert sample_imbalance(draws, modes256) <= 0.6


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=1, max_size=200))
def test_imbalance_bounds(codes):
    modes = ModeSet(np.array([[1 if (c >> b) & 1 else -1 for b in range(4)] for c in range(16)], dtype=float))
    pts = modes.modes[np.array(codes)]
    val = sample_imbalance(pts, modes)
    assert 0.0 <= val <= 2 * 15 / 16 + 1e-12
    assert missed_mode(pts, modes) == 16 - len(set(codes))


# ------------------------------------------------------------- ESS


def test_ess_iid_reference():
    rng = np.random.default_rng(1)
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = rng.multivariate_normal([0, 0], cov, 10_000)
    assert 0.9 <= effective_sample_size(x, cov) / 10_000 <= 1.1


def test_ess_identical_samples_zero():
    with pytest.warns(RuntimeWarning):
        assert effective_sample_size(np.ones((50, 3)), np.eye(3)) == 0.0


def test_ess_root_variant():
    x = np.random.default_rng(2).standard_normal((1000, 4)) * 0.5
    full = effective_sample_size(x, np.eye(4))
    root = effective_sample_size(x, np.eye(4), root=True)
    assert root == pytest.approx(1000 * (full / 1000) ** 0.25)


def test_ess_needs_enough_points():
    with pytest.raises(MetricError):
        effective_sample_size(np.zeros((2, 3)), np.eye(3))


# ------------------------------------------------------------- MMD


@pytest.mark.parametrize("numba", [True, False])
def test_mmd_matches_double_loop(numba):
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((40, 3)), rng.standard_normal((30, 3)) + 0.5
    old = accel.use_numba()
    accel.set_backend(numba)
    try:
        assert abs(mmd2(x, y, 1.3) - naive_mmd2(x, y, 1.3)) <= 1e-12
    finally:
        accel.set_backend(old)


def test_kernel_sum_skip_diag():
    x = np.random.default_rng(4).standard_normal((10, 2))
    assert kernel_sum(x, x, 1.0) - kernel_sum(x, x, 1.0, skip_diag=True) == pytest.approx(10.0)


def test_mmd_far_apart():
    rng = np.random.default_rng(5)
    assert mmd2(rng.normal(0, 1, (500, 1)), rng.normal(10, 1, (500, 1))) > 0.5


def test_mmd_same_set_inside_null_band():
    x = np.random.default_rng(6).standard_normal((300, 2))
    stat, q95, p = mmd_permutation_test(x, x.copy(), n_perm=100)
    assert stat < q95 and p > 0.05


def test_mmd_validation():
    with pytest.raises(MetricError):
        mmd2(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(MetricError):
        mmd2(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(MetricError):
        mmd2(np.ones((3, 1)), np.zeros((3, 1)), bandwidth="silverman")


def test_median_bandwidth_deterministic():
    x = np.random.default_rng(7).standard_normal((5000, 2))
    assert median_bandwidth(x) == median_bandwidth(x)
    assert 1.4 < median_bandwidth(x) < 2.2


# ------------------------------------------------------------- GMM / inception


def test_gmm_single_component_closed_form():
    x = np.random.default_rng(8).multivariate_normal([1, -2], [[1, 0.3], [0.3, 0.5]], 2000)
    g = gmm_fit(x, 1)
    assert np.allclose(g.means[0], x.mean(axis=0), atol=1e-8)
    assert np.allclose(g.covariances[0], np.cov(x, rowvar=False, ddof=0), atol=1e-8)


def blobs(rng, c, n=400, sep=20.0):
    centers = sep * np.eye(c)[:, : min(c, 3)] if c <= 3 else sep * rng.standard_normal((c, 3))
    return np.vstack([ctr + 0.5 * rng.standard_normal((n, centers.shape[1])) for ctr in centers]), centers


def test_gmm_separated_blobs_responsibilities():
    rng = np.random.default_rng(9)
    x, _ = blobs(rng, 2)
    g = gmm_fit(x, 2, seed=1)
    resp = gmm_responsibilities(g, x)
    own = np.repeat([0, 1], 400)
    col = resp[:400].mean(axis=0).argmax()
    assert np.all(resp[own == 0, col] >= 0.99) and np.all(resp[own == 1, 1 - col] >= 0.99)


def test_gmm_log_likelihood_non_decreasing():
    x = np.random.default_rng(10).standard_normal((600, 2)) * [1, 3]
    g = gmm_fit(x, 3, seed=2)
    assert isinstance(g, GmmModel)
    assert np.all(np.diff(g.history) >= -1e-10)


def test_inception_score_cases():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((300, 2))
    assert inception_score(x, gmm_fit(x, 1)) == 1.0
    for c in (2, 3, 5):
        x, _ = blobs(rng, c)
        score = inception_score(x, gmm_fit(x, c, seed=0))
        assert abs(score - c) <= 0.02 * c
        assert 1.0 <= score <= c + 1e-9


# ------------------------------------------------------------- error table


def naive_empirical_mmd2(x, y, sigma):
    k = lambda a, b: math.exp(-np.sum((a - b) ** 2) / (2 * sigma**2))  # noqa: E731
    kxx = np.mean([[k(a, b) for b in x] for a in x])
    kyy = np.mean([[k(a, b) for b in y] for a in y])
    kxy = np.mean([[k(a, b) for b in y] for a in x])
    return kxx + kyy - 2 * kxy


def test_empirical_mmd_matches_double_loop():
    rng = np.random.default_rng(13)
    x, y = rng.standard_normal((25, 2)), rng.standard_normal((35, 2)) + 1.0
    assert abs(mmd2_empirical(x, y, 0.9) - naive_empirical_mmd2(x, y, 0.9)) <= 1e-12
    # a single point is a valid empirical measure
    assert mmd2_empirical(x[:1], x[:1], 0.9) == 0.0
    assert mmd2_empirical(x[:1], y, 0.9) > 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 12), st.integers(1, 12))
def test_empirical_mmd_root_is_a_metric(seed, n1, n2, n3):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal((n, 2)) * rng.uniform(0.5, 2) for n in (n1, n2, n3))
    d = lambda p, q: math.sqrt(mmd2_empirical(p, q, 1.0))  # noqa: E731
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9
    assert d(a, b) == pytest.approx(d(b, a), abs=1e-12)


def test_error_decomposition_teacher_from_reference():
    # i.i.d. teachers: the sampling error is pure finite-sample spread, about (1 - E k) / M
    rng = np.random.default_rng(12)
    ref = rng.standard_normal((20_000, 2))
    draw = lambda m, s: np.random.default_rng(100 + s).standard_normal((m, 2))  # noqa: E731
    rows = error_decomposition(None, draw, ref, [1, 10, 100, 1000], seeds=range(10))
    sigma = median_bandwidth(ref)
    spread = 1 - kernel_sum(ref[:2000], ref[2000:4000], sigma) / 2000**2
    for row in rows:
        assert abs(row.sampling - spread / row.m) <= 3 * row.sampling_se + 2e-4
    assert [r.sampling for r in rows] == sorted((r.sampling for r in rows), reverse=True)
    assert math.isnan(rows[0].isp)


def test_error_decomposition_triangle():
    rng = np.random.default_rng(14)
    ref = rng.standard_normal((20_000, 1))
    draw = lambda m, s: np.random.default_rng(s).normal(0.3, 1.0, (m, 1))  # noqa: E731
    fit = lambda teacher, s: np.random.default_rng(s + 50).normal(teacher.mean(), teacher.std(), (500, 1))  # noqa: E731
    for row in error_decomposition(fit, draw, ref, [20, 500], seeds=range(4)):
        assert math.sqrt(row.isp) <= math.sqrt(row.sampling) + math.sqrt(row.estimation) + 1e-9


def test_error_decomposition_needs_large_reference():
    with pytest.raises(MetricError):
        error_decomposition(None, lambda m, s: np.zeros((m, 1)), np.zeros((100, 1)), [2], [0])
