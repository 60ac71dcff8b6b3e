"""Sensitivity of the MVO solution to the predicted returns.

At a converged active set with free indices F, the KKT system
``2 lam Sigma_FF w_F - mu_F + nu 1 = 0, 1'w_F = 1`` is linear in ``mu``,
so ``dw_F/dmu_F = (A - A 1 1'A / 1'A 1) / (2 lam)`` with
``A = Sigma_FF^-1`` and every other entry zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DegenerateActiveSet, NumericalFailure
from .mvo import MvoProblem, SolveReport, mvo_objective, solve_mvo, solve_weights

FD_STEP = 1e-6
DEGENERACY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SolutionJacobian:
    matrix: np.ndarray
    free: tuple
    active_lower: tuple
    weakly_active: tuple = ()

    @property
    def degenerate(self) -> bool:
        return bool(self.weakly_active)


def weakly_active(report: SolveReport, problem: MvoProblem, tol: float = DEGENERACY_TOL):
    """Indices sitting at zero weight whose bound multiplier is (near) zero."""
    scale = max(np.abs(problem.mu).max(), 2 * problem.risk_aversion * np.abs(problem.cov).max())
    thresh = tol * scale
    w = report.weights
    out = [i for i in report.active_lower if report.lower_multipliers[i] <= thresh]
    out += [i for i in report.free if w[i] <= 1e-12]
    return tuple(sorted(out))


def solution_jacobian(
    report: SolveReport, problem: MvoProblem, strict: bool = True
) -> SolutionJacobian:
    """Implicit-differentiation Jacobian ``J[i, j] = dw*_i / dmu_j``.

    With ``strict`` a weakly active bound raises :class:`DegenerateActiveSet`.
    Otherwise weakly active bounds are released into the free set and the
    returned object records them in ``weakly_active``.
    """
    n = problem.n
    weak = weakly_active(report, problem)
    if weak and strict:
        raise DegenerateActiveSet(f"weak complementarity at indices {weak}", weak)
    free = np.array(sorted(set(report.free) | set(weak)), dtype=int)
    J = np.zeros((n, n))
    if free.size > 1:
        S = problem.cov[np.ix_(free, free)]
        try:
            factor = cho_factor(S, lower=True)
        except np.linalg.LinAlgError:
            raise NumericalFailure("reduced covariance is not positive definite") from None
        A = cho_solve(factor, np.eye(free.size))
        a1 = A.sum(axis=1)
        block = (A - np.outer(a1, a1) / a1.sum()) / (2.0 * problem.risk_aversion)
        J[np.ix_(free, free)] = 0.5 * (block + block.T)
    in_free = set(free.tolist())
    lower = tuple(i for i in range(n) if i not in in_free)
    return SolutionJacobian(J, tuple(int(i) for i in free), lower, weak)


def finite_diff_jacobian(mu_hat, cov, risk_aversion: float, h: float = FD_STEP) -> np.ndarray:
    """Central differences ``[w*(mu + h e_j) - w*(mu - h e_j)] / 2h`` by column."""
    if not h > 0:
        raise ValueError("step must be positive")
    mu_hat = np.asarray(mu_hat, dtype=float)
    n = mu_hat.size
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, j] = (
            solve_weights(mu_hat + e, cov, risk_aversion)
            - solve_weights(mu_hat - e, cov, risk_aversion)
        ) / (2 * h)
    return J


def one_sided_jacobians(mu_hat, cov, risk_aversion: float, h: float = FD_STEP):
    """Forward and backward difference Jacobians; they disagree at a kink."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    n = mu_hat.size
    w0 = solve_weights(mu_hat, cov, risk_aversion)
    fwd = np.empty((n, n))
    bwd = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fwd[:, j] = (solve_weights(mu_hat + e, cov, risk_aversion) - w0) / h
        bwd[:, j] = (w0 - solve_weights(mu_hat - e, cov, risk_aversion)) / h
    return fwd, bwd


def regret_gradient_at(
    report: SolveReport, problem: MvoProblem, mu_star, strict: bool = True
):
    """Chain-rule gradient from an existing solve of ``problem`` (``mu = mu_hat``).

    Returns ``(gradient, jacobian)``.
    """
    jac = solution_jacobian(report, problem, strict=strict)
    w = report.weights
    dfdw = 2.0 * problem.risk_aversion * (problem.cov @ w) - np.asarray(mu_star, dtype=float)
    return jac.matrix.T @ dfdw, jac


def regret_gradient(mu_hat, mu_star, cov, risk_aversion: float, strict: bool = True) -> np.ndarray:
    """d regret / d mu_hat = J' (2 lam Sigma w*(mu_hat) - mu_star)."""
    problem = MvoProblem(mu_hat, cov, risk_aversion)
    report = solve_mvo(problem)
    grad, _ = regret_gradient_at(report, problem, mu_star, strict=strict)
    return grad


def regret_value_at(weights, mu_star, cov, risk_aversion: float, opt_objective: float) -> float:
    return opt_objective - mvo_objective(weights, mu_star, cov, risk_aversion)
