"""Long-only mean-variance portfolio problem.

Decisions maximise ``mu'w - lam * w'Sigma w`` over the simplex with
``0 <= w_i <= 1``. Internally the solver minimises the sign-flipped
objective ``lam * w'Sigma w - mu'w``, which is also the convention of
:func:`regret`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .errors import DimensionMismatch, NonConvergence, NotPositiveDefinite, NumericalFailure
from .market_data import CovMatrix

FEAS_TOL = 1e-10
KKT_TOL = 1e-8
ITER_FACTOR = 50


def _as_cov(cov) -> np.ndarray:
    if isinstance(cov, CovMatrix):
        return cov.matrix
    return np.asarray(cov, dtype=float)


@dataclass(frozen=True, eq=False)
class Portfolio:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if abs(w.sum() - 1.0) > 1e-8:
            raise ValueError(f"weights sum to {w.sum():.12g}, not 1")
        if w.min() < -FEAS_TOL or w.max() > 1.0 + FEAS_TOL:
            raise ValueError("weights outside [0, 1]")


@dataclass(frozen=True, eq=False)
class MvoProblem:
    mu: np.ndarray
    cov: np.ndarray
    risk_aversion: float

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        cov = _as_cov(self.cov)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "cov", cov)
        if mu.ndim != 1 or cov.shape != (mu.size, mu.size):
            raise DimensionMismatch(f"mu {mu.shape} vs cov {cov.shape}")
        if mu.size < 2:
            raise DimensionMismatch("need at least two assets")
        if not self.risk_aversion > 0:
            raise ValueError("risk aversion must be positive")

    @property
    def n(self) -> int:
        return self.mu.size


@dataclass(frozen=True, eq=False)
class SolveReport:
    portfolio: Portfolio
    active_lower: tuple
    active_upper: tuple
    equality_multiplier: float
    lower_multipliers: np.ndarray
    kkt_residual: float
    iterations: int = 0
    free: tuple = field(default=())

    @property
    def weights(self) -> np.ndarray:
        return self.portfolio.weights


_OK, _SINGULAR, _NOT_PD, _MAX_ITER = 0, 1, 2, 3


@njit(cache=True)
def _active_set(H, mu, x, working, max_iter, mult_tol):
    """Primal active-set iterations; updates ``x`` and ``working`` in place.

    Returns ``(nu, iterations, status)``.
    """
    n = mu.size
    nu = 0.0
    for it in range(1, max_iter + 1):
        free = np.where(~working)[0]
        m = free.size
        Hf = np.empty((m, m))
        rhs = np.empty((m, 2))
        for a in range(m):
            for b in range(m):
                Hf[a, b] = H[free[a], free[b]]
            rhs[a, 0] = mu[free[a]]
            rhs[a, 1] = 1.0
        try:
            sol = np.linalg.solve(Hf, rhs)
        except Exception:
            return nu, it, _SINGULAR
        sb = sol[:, 1].sum()
        if not sb > 0:
            return nu, it, _NOT_PD
        nu = (sol[:, 0].sum() - 1.0) / sb
        target = sol[:, 0] - nu * sol[:, 1]

        biggest = 0.0
        for a in range(m):
            biggest = max(biggest, abs(target[a] - x[free[a]]))
        if biggest <= 1e-15:
            for a in range(m):
                x[free[a]] = target[a]
            grad = H @ x - mu + nu
            drop = -1
            for i in range(n):
                if working[i] and (drop < 0 or grad[i] < grad[drop]):
                    drop = i
            if drop < 0 or grad[drop] >= -mult_tol:
                return nu, it, _OK
            working[drop] = False
            continue

        # ratio test; strict comparison keeps the lowest blocking index
        t = 1.0
        block = -1
        for a in range(m):
            step = target[a] - x[free[a]]
            if step < 0:
                r = x[free[a]] / -step
                if r < t:
                    t = r
                    block = free[a]
        if block < 0:
            for a in range(m):
                x[free[a]] = target[a]
        else:
            for a in range(m):
                x[free[a]] += t * (target[a] - x[free[a]])
            x[block] = 0.0
            working[block] = True
    return nu, max_iter, _MAX_ITER


def solve_mvo(problem: MvoProblem, warm_start=None) -> SolveReport:
    """Primal active-set method for the long-only MVO problem.

    Starts from equal weights with an empty working set. ``warm_start`` may
    instead be a feasible weight vector (typically a previous solution);
    its zero entries seed the working set. Ties in the blocking and
    dropping rules go to the lowest index.
    """
    H = np.ascontiguousarray(2.0 * problem.risk_aversion * problem.cov)
    mu = np.ascontiguousarray(problem.mu)
    n = problem.n
    scale = max(np.abs(mu).max(), np.abs(H).max(), 1e-300)
    mult_tol = 1e-12 * scale

    if warm_start is None:
        x = np.full(n, 1.0 / n)
        working = np.zeros(n, dtype=np.bool_)
    else:
        x = np.array(warm_start, dtype=float)
        if x.shape != (n,) or x.min() < 0 or abs(x.sum() - 1.0) > 1e-12:
            raise ValueError("warm start must be a feasible portfolio")
        working = x <= 0.0
        x[working] = 0.0

    nu, it, status = _active_set(H, mu, x, working, ITER_FACTOR * n, mult_tol)
    if status == _SINGULAR:
        raise NumericalFailure("reduced Hessian factorization failed")
    if status == _NOT_PD:
        raise NumericalFailure("reduced Hessian is not positive definite")
    if status == _MAX_ITER:
        raise NonConvergence(f"active-set solver exceeded {ITER_FACTOR * n} iterations")

    x[working] = 0.0
    x = np.clip(x, 0.0, 1.0)
    free = np.flatnonzero(~working)
    grad = H @ x - mu + nu
    lower = np.flatnonzero(working)
    pi = np.zeros(n)
    pi[lower] = grad[lower]
    residual = float(np.abs(grad - pi).max())
    if not np.isfinite(residual):
        raise NumericalFailure("non-finite KKT residual")
    if residual > KKT_TOL * max(1.0, scale):
        raise NumericalFailure(f"KKT residual {residual:.3g} exceeds tolerance")
    upper = tuple(int(i) for i in np.flatnonzero(x >= 1.0 - FEAS_TOL))
    return SolveReport(
        portfolio=Portfolio(x),
        active_lower=tuple(int(i) for i in lower),
        active_upper=upper,
        equality_multiplier=float(nu),
        lower_multipliers=pi,
        kkt_residual=residual,
        iterations=int(it),
        free=tuple(int(i) for i in free),
    )


def solve_weights(mu, cov, risk_aversion: float, warm_start=None) -> np.ndarray:
    return solve_mvo(MvoProblem(mu, cov, risk_aversion), warm_start).weights


def mvo_objective(w, mu, cov, risk_aversion: float) -> float:
    """Decision objective ``mu'w - lam * w'Sigma w`` (maximisation form)."""
    w = np.asarray(getattr(w, "weights", w), dtype=float)
    mu = np.asarray(mu, dtype=float)
    S = _as_cov(cov)
    if w.shape != mu.shape or S.shape != (w.size, w.size):
        raise DimensionMismatch(f"w {w.shape}, mu {mu.shape}, cov {S.shape}")
    return float(mu @ w - risk_aversion * (w @ S @ w))


def regret(mu_hat, mu_star, cov, risk_aversion: float, opt_weights=None) -> float:
    """Suboptimality of ``w*(mu_hat)`` measured under ``mu_star``.

    ``opt_weights`` may carry a cached ``w*(mu_star)``.
    """
    w_hat = solve_weights(mu_hat, cov, risk_aversion)
    if opt_weights is None:
        opt_weights = solve_weights(mu_star, cov, risk_aversion)
    return mvo_objective(opt_weights, mu_star, cov, risk_aversion) - mvo_objective(
        w_hat, mu_star, cov, risk_aversion
    )


def sharpe_max_unconstrained(mu, cov) -> np.ndarray:
    """Unconstrained maximum-Sharpe direction ``Sigma^-1 mu`` (Cholesky solve)."""
    S = _as_cov(cov)
    mu = np.asarray(mu, dtype=float)
    if S.shape != (mu.size, mu.size):
        raise DimensionMismatch(f"mu {mu.shape} vs cov {S.shape}")
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("covariance is not positive definite") from None
    y = solve_triangular(L, mu, lower=True)
    return solve_triangular(L.T, y, lower=False)
