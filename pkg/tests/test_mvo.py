import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import constructed_instance, grid_search_max, random_cov
from dflmvo.errors import DimensionMismatch, NotPositiveDefinite
from dflmvo.market_data import CovMatrix
from dflmvo.mvo import (
    MvoProblem,
    Portfolio,
    mvo_objective,
    regret,
    sharpe_max_unconstrained,
    solve_mvo,
    solve_weights,
)

I2 = np.eye(2)


def test_symmetric_problem_gives_equal_weights():
    np.testing.assert_allclose(solve_weights([0.0, 0.0], I2, 1.0), [0.5, 0.5], atol=1e-12)


def test_interior_two_asset_example():
    w = solve_weights([0.1, 0.0], I2, 1.0)
    np.testing.assert_allclose(w, [0.525, 0.475], atol=1e-12)
    grid_w, _ = grid_search_max(np.array([0.1, 0.0]), I2, 1.0, 10_000)
    np.testing.assert_allclose(w, grid_w, atol=1e-4)


def test_vertex_example_reports_active_sets():
    rep = solve_mvo(MvoProblem([10.0, 0.0], I2, 1.0))
    np.testing.assert_allclose(rep.weights, [1.0, 0.0], atol=1e-12)
    assert rep.active_lower == (1,)
    assert rep.active_upper == (0,)
    assert set(rep.active_lower).isdisjoint(rep.active_upper)
    assert rep.kkt_residual <= 1e-8


def test_objective_examples():
    assert mvo_objective([0.5, 0.5], [0.0, 0.0], I2, 1.0) == pytest.approx(-0.5, abs=1e-15)
    assert mvo_objective([1.0, 0.0], [0.1, 0.0], I2, 1.0) == pytest.approx(-0.9, abs=1e-15)
    assert mvo_objective(Portfolio([1.0, 0.0]), [0.1, 0.0], CovMatrix(I2), 1.0) == pytest.approx(-0.9)


def test_objective_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        mvo_objective([0.5, 0.5], [0.0, 0.0, 0.0], I2, 1.0)
    with pytest.raises(DimensionMismatch):
        MvoProblem([0.0, 0.0, 0.0], I2, 1.0)


def test_beats_random_feasible_points(rng):
    n = 10
    mu = rng.normal(0, 1e-3, n)
    cov = random_cov(rng, n)
    w = solve_weights(mu, cov, 3.0)
    best = mvo_objective(w, mu, cov, 3.0)
    trials = rng.dirichlet(np.ones(n), size=1000)
    vals = trials @ mu - 3.0 * np.einsum("ki,ij,kj->k", trials, cov, trials)
    assert np.all(vals <= best + 1e-12)


@pytest.mark.parametrize("n", [2, 3])
def test_grid_oracle(n):
    rng = np.random.default_rng(100 + n)
    for _ in range(100):
        lam = float(rng.choice([1.0, 3.0, 5.0, 10.0]))
        cov = random_cov(rng, n)
        mu = rng.normal(0, 5e-4, n)
        rep = solve_mvo(MvoProblem(mu, cov, lam))
        w = rep.weights
        assert abs(w.sum() - 1) <= 1e-10 and w.min() >= -1e-10 and w.max() <= 1 + 1e-10
        _, grid_val = grid_search_max(mu, cov, lam, 1000)
        val = mvo_objective(w, mu, cov, lam)
        assert val >= grid_val - 1e-12
        assert val - grid_val <= 1e-6


def test_warm_start_matches_cold(rng):
    for _ in range(20):
        n = 10
        cov = random_cov(rng, n)
        mu = rng.normal(0, 1e-3, n)
        cold = solve_mvo(MvoProblem(mu, cov, 3.0))
        prev = solve_weights(mu + rng.normal(0, 2e-4, n), cov, 3.0)
        warm = solve_mvo(MvoProblem(mu, cov, 3.0), warm_start=prev)
        np.testing.assert_allclose(warm.weights, cold.weights, atol=1e-10)
        assert warm.active_lower == cold.active_lower


def test_warm_start_must_be_feasible():
    with pytest.raises(ValueError):
        solve_mvo(MvoProblem([0.0, 0.0], I2, 1.0), warm_start=[0.7, 0.7])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.01, 100.0))
def test_scale_covariance(seed, c):
    rng = np.random.default_rng(seed)
    n = 6
    cov = random_cov(rng, n)
    mu = rng.normal(0, 1e-3, n)
    a = solve_weights(mu, cov, 2.0)
    b = solve_weights(c * mu, cov, 2.0 * c)
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_monotone_concentration(rng):
    for _ in range(20):
        n = 5
        mu = rng.normal(0, 0.05, n)
        top = int(np.argmax(mu))
        lams = [0.1, 0.3, 1.0, 3.0, 5.0, 10.0, 30.0]
        tops = [solve_weights(mu, np.eye(n), lam)[top] for lam in lams]
        assert all(b <= a + 1e-10 for a, b in zip(tops, tops[1:]))


@pytest.mark.parametrize("n_zero", [0, 3, 6])
def test_kkt_certificate(rng, n_zero):
    lam = 3.0
    mu, cov, w0 = constructed_instance(rng, 10, lam, n_zero=n_zero)
    rep = solve_mvo(MvoProblem(mu, cov, lam))
    np.testing.assert_allclose(rep.weights, w0, atol=1e-9)
    w = rep.weights
    pi = rep.lower_multipliers
    assert np.all(pi >= -1e-12)
    off = np.setdiff1d(np.arange(10), rep.active_lower)
    assert np.all(pi[off] == 0)
    resid = 2 * lam * cov @ w - mu + rep.equality_multiplier - pi
    assert np.abs(resid).max() <= 1e-8
    assert rep.kkt_residual <= 1e-8
    assert len(rep.active_lower) == n_zero


def test_duplicate_assets_are_deterministic():
    cov = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) + 1e-6 * np.eye(3)
    mu = np.array([0.2, 0.2, 0.0])
    a = solve_weights(mu, cov, 1.0)
    b = solve_weights(mu, cov, 1.0)
    assert a.tobytes() == b.tobytes()
    assert a[0] == pytest.approx(a[1], abs=1e-9)


# -- regret -----------------------------------------------------------------


def test_regret_zero_on_truth(rng):
    mu = rng.normal(0, 1e-3, 10)
    cov = random_cov(rng, 10)
    assert abs(regret(mu, mu, cov, 3.0)) <= 1e-10


def test_regret_example():
    assert regret([0.0, 0.1], [0.1, 0.0], I2, 1.0) == pytest.approx(0.005, abs=1e-12)
    obj = lambda w: mvo_objective(w, [0.1, 0.0], I2, 1.0)
    w_hat, _ = grid_search_max(np.array([0.0, 0.1]), I2, 1.0, 10_000)
    w_opt, _ = grid_search_max(np.array([0.1, 0.0]), I2, 1.0, 10_000)
    assert obj(w_opt) - obj(w_hat) == pytest.approx(0.005, abs=1e-8)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.sampled_from([1.0, 3.0, 5.0, 10.0]))
def test_regret_nonnegative(seed, lam):
    rng = np.random.default_rng(seed)
    n = 8
    cov = random_cov(rng, n)
    assert regret(rng.normal(0, 1e-3, n), rng.normal(0, 1e-3, n), cov, lam) >= -1e-8


def test_regret_accepts_cached_optimum(rng):
    cov = random_cov(rng, 5)
    mu_s, mu_h = rng.normal(0, 1e-3, 5), rng.normal(0, 1e-3, 5)
    w_opt = solve_weights(mu_s, cov, 3.0)
    assert regret(mu_h, mu_s, cov, 3.0, opt_weights=w_opt) == regret(mu_h, mu_s, cov, 3.0)


# -- unconstrained Sharpe direction -----------------------------------------


def test_sharpe_max_examples(rng):
    mu = rng.normal(size=4)
    np.testing.assert_allclose(sharpe_max_unconstrained(mu, np.eye(4)), mu, atol=1e-15)
    np.testing.assert_allclose(
        sharpe_max_unconstrained([0.08, 0.02], np.diag([4.0, 1.0])), [0.02, 0.02], atol=1e-15
    )
    cov = random_cov(rng, 4)
    np.testing.assert_allclose(
        sharpe_max_unconstrained(2 * mu, cov), 2 * sharpe_max_unconstrained(mu, cov), rtol=1e-12
    )
    np.testing.assert_allclose(cov @ sharpe_max_unconstrained(mu, cov), mu, rtol=1e-9)


def test_sharpe_max_rejects_indefinite():
    with pytest.raises(NotPositiveDefinite):
        sharpe_max_unconstrained([1.0, 1.0], np.array([[1.0, 2.0], [2.0, 1.0]]))
