import numpy as np
import pytest

from conftest import central_diff, constructed_instance
from dflmvo import training
from dflmvo.diffopt import regret_gradient
from dflmvo.errors import DimensionMismatch
from dflmvo.market_data import SplitSpec, generate_synthetic, make_samples, split_samples
from dflmvo.mvo import regret
from dflmvo.training import (
    LossConfig,
    TrainConfig,
    combined_loss,
    combined_loss_terms,
    mse_gradient,
    mse_loss,
    train,
)


@pytest.fixture(scope="module")
def splits():
    samples = make_samples(generate_synthetic(7, n_assets=10, n_days=630))
    return split_samples(samples, SplitSpec(400, 100, 100))


@pytest.fixture(scope="module")
def small_splits(splits):
    train_s, valid_s, _ = splits
    return train_s[:64], valid_s[:20]


def test_mse_examples():
    assert mse_loss([0.0, 0.0], [0.01, -0.01]) == pytest.approx(1e-3, rel=1e-12)
    assert mse_loss([0.3, 0.1], [0.3, 0.1]) == 0.0
    with pytest.raises(DimensionMismatch):
        mse_loss([0.0], [0.0, 1.0])


def test_mse_gradient_matches_finite_differences(rng):
    mu_s = rng.normal(0, 0.01, 10)
    mu_h = rng.normal(0, 0.01, 10)
    fd = central_diff(lambda m: mse_loss(m, mu_s), mu_h, 1e-6)
    np.testing.assert_allclose(mse_gradient(mu_h, mu_s), fd, atol=1e-8)
    # descent direction points towards the target
    assert mse_loss(mu_h - 1e-3 * mse_gradient(mu_h, mu_s), mu_s) < mse_loss(mu_h, mu_s)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5, risk_aversion=1.0)
    with pytest.raises(ValueError):
        LossConfig(alpha=0.5, risk_aversion=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_alpha_endpoints_and_midpoint(rng):
    lam = 3.0
    mu_h, cov, _ = constructed_instance(rng, 10, lam, margin=0.3)
    mu_s = mu_h + rng.normal(0, 3e-4, 10)
    v0, g0 = combined_loss(mu_h, mu_s, cov, LossConfig(0.0, lam))
    assert v0 == mse_loss(mu_h, mu_s)
    np.testing.assert_array_equal(g0, mse_gradient(mu_h, mu_s))
    _, g0_other = combined_loss(mu_h, mu_s, 7 * cov, LossConfig(0.0, lam))
    np.testing.assert_array_equal(g0, g0_other)

    v1, g1 = combined_loss(mu_h, mu_s, cov, LossConfig(1.0, lam))
    assert v1 == regret(mu_h, mu_s, cov, lam)
    np.testing.assert_allclose(g1, regret_gradient(mu_h, mu_s, cov, lam), rtol=1e-12, atol=1e-20)

    vh, gh = combined_loss(mu_h, mu_s, cov, LossConfig(0.5, lam))
    assert vh == pytest.approx(0.5 * (v0 + v1), rel=1e-14)
    np.testing.assert_allclose(gh, 0.5 * (g0 + g1), rtol=1e-12, atol=1e-20)


def test_combined_gradient_matches_finite_differences(rng):
    lam = 3.0
    for alpha in (0.25, 0.5, 1.0):
        mu_h, cov, _ = constructed_instance(rng, 10, lam, margin=0.3)
        mu_s = mu_h + rng.normal(0, 3e-5, 10)
        cfg = LossConfig(alpha, lam)
        _, g = combined_loss(mu_h, mu_s, cov, cfg)
        fd = central_diff(lambda m: combined_loss(m, mu_s, cov, cfg)[0], mu_h, 1e-6)
        np.testing.assert_allclose(g, fd, atol=1e-5)


def test_alpha_zero_never_calls_solver(small_splits, monkeypatch):
    def boom(*args, **kwargs):
        raise AssertionError("solver called during pure-MSE training")

    monkeypatch.setattr(training, "solve_mvo", boom)
    tr, va = small_splits
    _, rec = train(tr, va, 0, LossConfig(0.0, 3.0), TrainConfig(max_iterations=20))
    assert rec.solver_calls == 0


def test_alpha_zero_bit_reproducible(small_splits):
    tr, va = small_splits
    cfg = TrainConfig(max_iterations=40, seed=3)
    m1, r1 = train(tr, va, 5, LossConfig(0.0, 3.0), cfg)
    m2, r2 = train(tr, va, 5, LossConfig(0.0, 3.0), cfg)
    assert m1.to_vector().tobytes() == m2.to_vector().tobytes()
    assert r1.to_dict() == r2.to_dict()


def test_patience_one_stops_at_second_evaluation(small_splits):
    tr, va = small_splits
    # a vanishing step leaves every parameter unchanged, so validation never improves
    cfg = TrainConfig(max_iterations=5000, patience=1, learning_rate=1e-300)
    _, rec = train(tr, va, 0, LossConfig(0.0, 3.0), cfg)
    assert len(rec.history) == 2
    assert rec.history[1].valid_loss == rec.history[0].valid_loss
    assert rec.stopping_iteration == 2  # one epoch of 64 samples at batch 32
    assert rec.best_iteration == 0


def test_regret_training_records(small_splits):
    tr, va = small_splits
    lines = []
    model, rec = train(
        tr, va, 1, LossConfig(1.0, 3.0), TrainConfig(max_iterations=12, patience=50),
        log=lambda r: lines.append(r.to_line()),
    )
    assert rec.solver_calls > 0
    assert len(lines) == len(rec.history)
    assert '"degenerate_events"' in lines[0]
    assert rec.best_valid_loss == min(h.valid_loss for h in rec.history)
    assert all(h.train_loss >= -1e-8 and h.valid_loss >= -1e-8 for h in rec.history)
    feats = np.stack([s.features for s in tr])
    mu_hat, _ = training.forward(model, feats)
    for k, s in enumerate(tr):
        t = combined_loss_terms(mu_hat[k], s.target_mu, s.cov, LossConfig(1.0, 3.0), strict=False)
        assert t.regret >= -1e-8


def test_returns_best_checkpoint(small_splits):
    tr, va = small_splits
    model, rec = train(tr, va, 2, LossConfig(0.0, 3.0), TrainConfig(max_iterations=60, learning_rate=3e-2))
    feats = np.stack([s.features for s in va])
    targets = np.stack([s.target_mu for s in va])
    mu_hat, _ = training.forward(model, feats)
    loss = np.mean([mse_loss(mu_hat[k], targets[k]) for k in range(len(va))])
    assert loss == pytest.approx(rec.best_valid_loss, rel=1e-12)
    assert rec.best_valid_loss <= min(h.valid_loss for h in rec.history)


def test_learnability_on_synthetic(splits):
    tr, va, _ = splits
    _, rec = train(tr, va, 0, LossConfig(0.0, 3.0), TrainConfig())
    assert rec.best_valid_loss < rec.history[0].valid_loss
