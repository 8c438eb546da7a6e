import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from jkoflow import baselines, metrics, numcore
from jkoflow.errors import NonFiniteLogRatio, NotPositiveDefinite


def test_symkl_same_view_is_zero():
    p = metrics.gaussian_view([0.0], [[1.0]])
    assert metrics.symkl_mc(p, p, 1000, numcore.make_rng(0)) == (0.0, 0.0)


def test_symkl_unit_shift():
    p = metrics.gaussian_view([0.0], [[1.0]])
    q = metrics.gaussian_view([1.0], [[1.0]])
    v, se = metrics.symkl_mc(p, q, 10000, numcore.make_rng(1))
    assert abs(v - 1.0) < 3 * se


def test_symkl_symmetry():
    p = metrics.gaussian_view([0.0, 0.5], np.diag([1.0, 2.0]))
    q = metrics.gaussian_view([0.3, 0.0], np.eye(2))
    a, sa = metrics.symkl_mc(p, q, 10000, numcore.make_rng(2))
    b, sb = metrics.symkl_mc(q, p, 10000, numcore.make_rng(3))
    assert abs(a - b) < 2 * np.hypot(sa, sb)


def test_symkl_matches_closed_form_and_rate():
    m1, c1 = np.array([0.0, 1.0]), np.array([[1.0, 0.2], [0.2, 0.5]])
    m2, c2 = np.array([0.4, 0.5]), np.eye(2)
    exact = metrics.gaussian_kl(m1, c1, m2, c2) + metrics.gaussian_kl(m2, c2, m1, c1)
    p, q = metrics.gaussian_view(m1, c1), metrics.gaussian_view(m2, c2)
    v1, se1 = metrics.symkl_mc(p, q, 10000, numcore.make_rng(4))
    v4, se4 = metrics.symkl_mc(p, q, 40000, numcore.make_rng(5))
    assert abs(v1 - exact) < 3 * se1 and abs(v4 - exact) < 3 * se4
    assert 0.5 * 0.7 < se4 / se1 < 0.5 * 1.3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_symkl_nonnegative_up_to_noise(seed):
    rng = np.random.default_rng(seed)
    p = metrics.gaussian_view(rng.normal(size=2), numcore.random_spd(2, rng))
    q = metrics.gaussian_view(rng.normal(size=2), numcore.random_spd(2, rng))
    v, se = metrics.symkl_mc(p, q, 200, rng)
    assert v >= -3 * se


def test_symkl_support_mismatch():
    grid = baselines.Grid1D.uniform(-1, 1, 200, density=lambda x: np.ones_like(x))
    with pytest.raises(NonFiniteLogRatio) as info:
        metrics.symkl_mc(metrics.gaussian_view([0.0], [[1.0]]), metrics.grid_view(grid), 1000,
                         numcore.make_rng(6))
    assert abs(info.value.sample[0]) > 1
    with pytest.raises(ValueError):
        metrics.symkl_mc(metrics.gaussian_view([0.0], [[1.0]]), metrics.grid_view(grid), 10)


def test_gaussian_kl_examples():
    assert metrics.gaussian_kl([1.0], [[1.0]], [0.0], [[1.0]]) == pytest.approx(0.5, abs=1e-15)
    rng = np.random.default_rng(7)
    S = numcore.random_spd(4, rng)
    m = rng.normal(size=4)
    assert metrics.gaussian_kl(m, S, m, S) == 0.0
    v1, v2 = rng.uniform(0.5, 2, size=3), rng.uniform(0.5, 2, size=3)
    m1, m2 = rng.normal(size=3), rng.normal(size=3)
    parts = sum(metrics.gaussian_kl([m1[i]], [[v1[i]]], [m2[i]], [[v2[i]]]) for i in range(3))
    assert metrics.gaussian_kl(m1, np.diag(v1), m2, np.diag(v2)) == pytest.approx(parts, abs=1e-12)
    with pytest.raises(NotPositiveDefinite):
        metrics.gaussian_kl([0.0], [[-1.0]], [0.0], [[1.0]])


def test_gaussian_kl_identical_is_exactly_zero():
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert metrics.gaussian_kl([1.0, 2.0], S, [1.0, 2.0], S) == 0.0


def test_grid_view_and_symkl_grid():
    g1 = baselines.Grid1D.uniform(density=lambda x: norm.pdf(x))
    g2 = baselines.Grid1D.uniform(density=lambda x: norm.pdf(x, 1.0))
    v = metrics.symkl_grid(np.log(g1.rho), np.log(g2.rho), g1.dx)
    assert v == pytest.approx(1.0, abs=1e-3)
    mc, se = metrics.symkl_mc(metrics.grid_view(g1), metrics.grid_view(g2), 20000, numcore.make_rng(8))
    assert abs(mc - 1.0) < 3 * se + 1e-2


def test_kde_view_close_to_truth():
    pts = numcore.make_rng(9).standard_normal((5000, 1))
    v, se = metrics.symkl_mc(metrics.kde_view(pts), metrics.gaussian_view([0.0], [[1.0]]), 5000,
                             numcore.make_rng(10))
    assert v < 0.05


def test_metric_report_schema():
    r = metrics.metric_report("symkl", 0.1, 0.01, 100, 3, experiment="ou", t=0.5)
    assert set(r) == {"metric", "value", "std_error", "n_samples", "seed", "descriptors"}
    assert r["descriptors"] == {"experiment": "ou", "t": 0.5}
