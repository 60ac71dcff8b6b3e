"""Decision-quality metrics, backtests and covariance diagnostics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import cho_solve

from .errors import (
    DegenerateBaseline,
    DegenerateCrossSection,
    NotPositiveDefinite,
    TotalLoss,
    ZeroVector,
    ZeroVolatility,
)
from .market_data import Sample
from .model import MlpModel, forward
from .mvo import _as_cov, mvo_objective, solve_weights

N_RANDOM = 1000


# -- decision quality -------------------------------------------------------


def decision_quality(mu_hat, mu_star, cov, risk_aversion: float, weights=None) -> float:
    """Objective of ``w*(mu_hat)`` evaluated under the realised ``mu_star``."""
    if weights is None:
        weights = solve_weights(mu_hat, cov, risk_aversion)
    return mvo_objective(weights, mu_star, cov, risk_aversion)


@dataclass(frozen=True)
class NdqConfig:
    """Random-prediction baseline: ``n_random`` i.i.d. N(0, scale^2) vectors."""

    n_random: int = N_RANDOM
    scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.n_random < 1:
            raise ValueError("n_random must be at least 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def random_predictions(n_assets: int, config: NdqConfig, stream: int = 0) -> np.ndarray:
    rng = np.random.default_rng([int(config.seed), int(stream)])
    return rng.normal(0.0, config.scale, size=(config.n_random, n_assets))


def random_baseline_dq(mu_star, cov, risk_aversion: float, config: NdqConfig, stream: int = 0) -> float:
    preds = random_predictions(len(mu_star), config, stream)
    total = 0.0
    for p in preds:
        total += decision_quality(p, mu_star, cov, risk_aversion)
    return total / len(preds)


def ndq_from_parts(dq_model: float, dq_opt: float, dq_random: float) -> float:
    denom = dq_opt - dq_random
    if abs(denom) < 1e-12:
        raise DegenerateBaseline(f"optimal and random DQ coincide ({dq_opt:.6g})")
    return (dq_model - dq_random) / denom


def normalized_dq(
    mu_hat,
    mu_star,
    cov,
    risk_aversion: float,
    n_random: int = N_RANDOM,
    rng_seed: int = 0,
    scale: float = 0.01,
) -> float:
    cfg = NdqConfig(n_random, scale, rng_seed)
    dq_rand = random_baseline_dq(mu_star, cov, risk_aversion, cfg)
    dq_opt = decision_quality(mu_star, mu_star, cov, risk_aversion)
    if np.array_equal(np.asarray(mu_hat, dtype=float), np.asarray(mu_star, dtype=float)):
        dq_model = dq_opt
    else:
        dq_model = decision_quality(mu_hat, mu_star, cov, risk_aversion)
    return ndq_from_parts(dq_model, dq_opt, dq_rand)


def baseline_scale(samples: Sequence[Sample]) -> float:
    """Mean cross-sectional (population) standard deviation of the targets."""
    targets = np.stack([s.target_mu for s in samples])
    return float(targets.std(axis=1).mean())


# -- return metrics ---------------------------------------------------------


def sharpe_ratio(daily_returns) -> float:
    """Daily mean over population standard deviation, zero risk-free rate."""
    r = np.asarray(daily_returns, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two returns")
    sd = r.std()
    if sd <= 1e-15 * max(1.0, np.abs(r).max()):
        raise ZeroVolatility("return series has zero volatility")
    return float(r.mean() / sd)


def cumulative_return(daily_returns) -> float:
    r = np.asarray(daily_returns, dtype=float)
    if np.any(r <= -1.0):
        raise TotalLoss("a daily return of -100% or worse wipes out the portfolio")
    return float(np.prod(1.0 + r))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(a @ b) / (na * nb)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx <= 1e-14 * max(1.0, np.abs(x).max()) or sy <= 1e-14 * max(1.0, np.abs(y).max()):
        raise DegenerateCrossSection("constant vector has no correlation")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# -- unconstrained Sharpe theory -------------------------------------------


def _chol(cov):
    S = _as_cov(cov)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("covariance is not positive definite") from None


def _inv_apply(L, v):
    return cho_solve((L, True), v)


def prediction_sharpe(mu_star, mu_hat, cov) -> float:
    """Sharpe under ``mu_star`` of the unconstrained portfolio ``Sigma^-1 mu_hat``."""
    L = _chol(cov)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if not np.any(mu_hat):
        raise ZeroVector("prediction is the zero vector")
    y = _inv_apply(L, mu_hat)
    return float(y @ np.asarray(mu_star, dtype=float) / math.sqrt(mu_hat @ y))


def sharpe_gradient_analytic(mu_star, mu_hat, cov) -> np.ndarray:
    """Gradient of :func:`prediction_sharpe` with respect to ``mu_hat``.

    ``[S^-1 mu* - (mu_hat' S^-1 mu* / mu_hat' S^-1 mu_hat) S^-1 mu_hat] / sqrt(mu_hat' S^-1 mu_hat)``
    """
    L = _chol(cov)
    mu_star = np.asarray(mu_star, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    if not np.any(mu_hat):
        raise ZeroVector("prediction is the zero vector")
    inv_star = _inv_apply(L, mu_star)
    inv_hat = _inv_apply(L, mu_hat)
    q = float(mu_hat @ inv_hat)
    coef = float(mu_hat @ inv_star) / q
    return (inv_star - coef * inv_hat) / math.sqrt(q)


def sharpe_tilt_direction(mu_star, mu_hat, cov) -> np.ndarray:
    """``Sigma^-1 (mu* - c mu_hat)`` with ``c = mu_hat'S^-1 mu* / mu_hat'S^-1 mu_hat``.

    The MSE-style residual ``mu* - c mu_hat`` tilted by the inverse covariance;
    parallel to :func:`sharpe_gradient_analytic`.
    """
    L = _chol(cov)
    mu_star = np.asarray(mu_star, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    inv_hat = _inv_apply(L, mu_hat)
    c = float(inv_hat @ mu_star) / float(mu_hat @ inv_hat)
    return _inv_apply(L, mu_star - c * mu_hat)


# -- backtest ---------------------------------------------------------------


@dataclass
class DayRecord:
    date: object
    mu_hat: np.ndarray
    mu_star: np.ndarray
    weights: np.ndarray
    opt_weights: np.ndarray
    realized_return: float
    dq: float
    dq_opt: float
    dq_random: float
    ndq: float
    regret: float
    mse: float
    cosine: float
    inv_row_mean: np.ndarray


@dataclass
class BacktestResult:
    days: list
    risk_aversion: float
    sharpe: float
    cumulative_return: float
    mean_ndq: float
    mean_cosine: float
    mean_regret: float
    mean_mse: float
    degenerate_days: int = 0

    @property
    def realized_returns(self) -> np.ndarray:
        return np.array([d.realized_return for d in self.days])

    def summary(self) -> dict:
        return {
            "days": len(self.days),
            "risk_aversion": self.risk_aversion,
            "sharpe": self.sharpe,
            "cumulative_return": self.cumulative_return,
            "mean_ndq": self.mean_ndq,
            "mean_cosine": self.mean_cosine,
            "mean_regret": self.mean_regret,
            "mean_mse": self.mean_mse,
            "degenerate_days": self.degenerate_days,
        }

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        n = len(self.days[0].mu_hat)
        w.writerow(
            ["date", "realized_return", "dq", "dq_opt", "dq_random", "ndq", "regret", "mse", "cosine"]
            + [f"mu_hat_{i}" for i in range(n)]
            + [f"w_{i}" for i in range(n)]
        )
        for d in self.days:
            w.writerow(
                [str(d.date)]
                + [fmt(v) for v in (d.realized_return, d.dq, d.dq_opt, d.dq_random, d.ndq, d.regret, d.mse, d.cosine)]
                + [fmt(v) for v in d.mu_hat]
                + [fmt(v) for v in d.weights]
            )
        return out.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def fmt(value: float) -> str:
    """Six significant digits, as used in every CSV report."""
    return f"{float(value):.6g}"


def random_baselines(
    samples: Sequence[Sample], risk_aversion: float, config: NdqConfig
) -> np.ndarray:
    """Per-day random DQ baseline; stream ``k`` seeds day ``k``."""
    return np.array(
        [
            random_baseline_dq(s.target_mu, s.cov, risk_aversion, config, stream=k)
            for k, s in enumerate(samples)
        ]
    )


def run_backtest(
    model,
    samples: Sequence[Sample],
    risk_aversion: float,
    ndq_config: NdqConfig = NdqConfig(),
    baselines=None,
    mse_scale: float = 10.0,
) -> BacktestResult:
    """Daily out-of-sample evaluation of a predictor.

    ``model`` is an :class:`MlpModel` or any callable mapping a
    :class:`Sample` to a prediction vector. ``baselines`` may hold
    precomputed :func:`random_baselines` for these samples. A day whose
    baseline coincides with the optimum gets NaN NDQ, is left out of
    ``mean_ndq`` and is counted in ``degenerate_days``.
    """
    if not samples:
        raise ValueError("empty test split")
    if baselines is None:
        baselines = random_baselines(samples, risk_aversion, ndq_config)
    if isinstance(model, MlpModel):
        preds, _ = forward(model, np.stack([s.features for s in samples]))
    else:
        preds = np.stack([np.asarray(model(s), dtype=float) for s in samples])

    days = []
    degenerate = 0
    for k, s in enumerate(samples):
        mu_hat = preds[k]
        w = solve_weights(mu_hat, s.cov, risk_aversion)
        w_opt = solve_weights(s.target_mu, s.cov, risk_aversion)
        dq = decision_quality(mu_hat, s.target_mu, s.cov, risk_aversion, weights=w)
        dq_opt = decision_quality(s.target_mu, s.target_mu, s.cov, risk_aversion, weights=w_opt)
        try:
            ndq = ndq_from_parts(dq, dq_opt, float(baselines[k]))
        except DegenerateBaseline:
            ndq = float("nan")
            degenerate += 1
        days.append(
            DayRecord(
                date=s.date,
                mu_hat=mu_hat,
                mu_star=s.target_mu,
                weights=w,
                opt_weights=w_opt,
                realized_return=float(w @ s.target_mu),
                dq=dq,
                dq_opt=dq_opt,
                dq_random=float(baselines[k]),
                ndq=ndq,
                regret=dq_opt - dq,
                mse=float(mse_scale * np.mean((s.target_mu - mu_hat) ** 2)),
                cosine=cosine_similarity(w_opt, w),
                inv_row_mean=s.cov.inverse().mean(axis=1),
            )
        )
    r = np.array([d.realized_return for d in days])
    try:
        sr = sharpe_ratio(r)
    except (ZeroVolatility, ValueError):
        sr = float("nan")
    return BacktestResult(
        days=days,
        risk_aversion=risk_aversion,
        sharpe=sr,
        cumulative_return=cumulative_return(r),
        mean_ndq=float(np.nanmean([d.ndq for d in days])) if degenerate < len(days) else float("nan"),
        mean_cosine=float(np.mean([d.cosine for d in days])),
        mean_regret=float(np.mean([d.regret for d in days])),
        mean_mse=float(np.mean([d.mse for d in days])),
        degenerate_days=degenerate,
    )


# -- correlation diagnostics ------------------------------------------------


CORRELATION_KEYS = ("inv_cov_vs_pred", "sq_error_vs_pred", "inv_cov_vs_weights", "target_vs_pred")


def day_correlations(day: DayRecord) -> dict:
    """Cross-sectional Pearson correlations for one day; a degenerate pair gives NaN."""
    s = day.inv_row_mean
    e = (day.mu_star - day.mu_hat) ** 2
    pairs = {
        "inv_cov_vs_pred": (s, day.mu_hat),
        "sq_error_vs_pred": (e, day.mu_hat),
        "inv_cov_vs_weights": (s, day.weights),
        "target_vs_pred": (day.mu_star, day.mu_hat),
    }
    out = {}
    for key, (x, y) in pairs.items():
        try:
            out[key] = pearson(x, y)
        except DegenerateCrossSection:
            out[key] = float("nan")
    return out


@dataclass
class CorrelationReport:
    mean: dict
    std: dict
    per_run: list = field(default_factory=list)
    skipped_days: dict = field(default_factory=dict)


def correlation_report(backtests: Sequence[BacktestResult]) -> CorrelationReport:
    """Day-averaged correlations per backtest, then mean and std across backtests.

    Days where a correlation is undefined are skipped for that key and
    counted in ``skipped_days``.
    """
    if not backtests:
        raise ValueError("no backtests")
    skipped = {k: 0 for k in CORRELATION_KEYS}
    per_run = []
    for bt in backtests:
        if len(bt.days) < 2 or len(bt.days[0].mu_hat) < 2:
            raise ValueError("need at least two days and two assets")
        vals = {k: [] for k in CORRELATION_KEYS}
        for day in bt.days:
            for k, v in day_correlations(day).items():
                if math.isnan(v):
                    skipped[k] += 1
                else:
                    vals[k].append(v)
        per_run.append({k: float(np.mean(v)) if v else float("nan") for k, v in vals.items()})
    mean = {k: float(np.mean([r[k] for r in per_run])) for k in CORRELATION_KEYS}
    std = {k: float(np.std([r[k] for r in per_run])) for k in CORRELATION_KEYS}
    return CorrelationReport(mean, std, per_run, skipped)
