from functools import lru_cache

import numpy as np
import pytest


def random_cov(rng, n, scale=1e-4):
    """Well-conditioned SPD matrix with entries around ``scale``."""
    f = rng.normal(size=(n, n + 3))
    s = f @ f.T / (n + 3) + 0.2 * np.eye(n)
    return scale * 0.5 * (s + s.T)


def constructed_instance(rng, n, lam, n_zero=0, margin=0.05, scale=1e-4):
    """An MVO instance whose optimum is known by construction.

    Picks weights ``w0`` with ``n_zero`` zero entries (the rest at least
    ``margin / n``), then sets ``mu`` so that the KKT conditions hold with
    strictly positive bound multipliers. Returns ``(mu, cov, w0)``.
    """
    cov = random_cov(rng, n, scale)
    zero = rng.choice(n, size=n_zero, replace=False) if n_zero else np.array([], dtype=int)
    free = np.setdiff1d(np.arange(n), zero)
    w0 = np.zeros(n)
    raw = rng.dirichlet(np.ones(free.size))
    w0[free] = margin / n + (1 - margin * free.size / n) * raw
    nu = rng.normal(0, 1e-2)
    mu = 2 * lam * cov @ w0 + nu
    mu[zero] -= rng.uniform(0.2, 1.0, size=zero.size) * 2 * lam * scale
    return mu, cov, w0


@lru_cache(maxsize=8)
def simplex_grid(n, steps):
    """Every point of the simplex with coordinates that are multiples of 1/steps."""
    if n == 2:
        a = np.arange(steps + 1) / steps
        return np.stack([a, 1 - a], axis=1)
    if n == 3:
        i, j = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing="ij")
        keep = i + j <= steps
        i, j = i[keep], j[keep]
        return np.stack([i, j, steps - i - j], axis=1) / steps
    raise ValueError("grid oracle only for n in {2, 3}")


def grid_search_max(mu, cov, lam, steps):
    """Exhaustive maximum of ``mu'w - lam w'Sigma w`` over the simplex grid."""
    pts = simplex_grid(len(mu), steps)
    vals = pts @ mu - lam * ((pts @ cov) * pts).sum(axis=1)
    k = int(np.argmax(vals))
    return pts[k], float(vals[k])


def central_diff(f, x, h):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e.flat[j] = h
        g.flat[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
