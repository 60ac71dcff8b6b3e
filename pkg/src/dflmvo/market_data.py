"""Return panels, rolling samples, covariance estimation and splits.

Returns are decimal (0.01 == 1%) everywhere past the parser.
"""

from __future__ import annotations

import datetime as dt
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateWindow,
    InsufficientHistory,
    MalformedRow,
    MissingValue,
    NonMonotoneDates,
    NotPositiveDefinite,
)

FF_PERCENT = "ff_percent"
PLAIN_DECIMAL = "plain_decimal"
FORMATS = (FF_PERCENT, PLAIN_DECIMAL)

DEFAULT_LOOKBACK = 30
DEFAULT_RIDGE = 1e-8
MISSING_SENTINELS = (-99.99, -999.0)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ReturnPanel:
    dates: tuple
    assets: tuple
    returns: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "assets", tuple(str(a) for a in self.assets))
        object.__setattr__(self, "returns", _frozen(self.returns))
        r = self.returns
        if r.ndim != 2 or r.shape != (len(self.dates), len(self.assets)):
            raise MalformedRow(
                f"returns shape {r.shape} does not match "
                f"{len(self.dates)} dates x {len(self.assets)} assets"
            )
        if len(self.assets) < 2:
            raise MalformedRow("a panel needs at least two assets")
        if not np.all(np.isfinite(r)):
            i, j = np.argwhere(~np.isfinite(r))[0]
            raise MissingValue("non-finite return", line=int(i), column=self.assets[j])
        for k in range(1, len(self.dates)):
            if not self.dates[k - 1] < self.dates[k]:
                raise NonMonotoneDates(
                    f"date {self.dates[k]} does not follow {self.dates[k - 1]}"
                )

    @property
    def n_assets(self) -> int:
        return len(self.assets)

    def __len__(self) -> int:
        return len(self.dates)

    def __eq__(self, other):
        if not isinstance(other, ReturnPanel):
            return NotImplemented
        return (
            self.dates == other.dates
            and self.assets == other.assets
            and np.array_equal(self.returns, other.returns)
        )


@dataclass(frozen=True, eq=False)
class CovMatrix:
    """Sample covariance with ``ridge`` already added to the diagonal."""

    matrix: np.ndarray
    ridge: float = 0.0

    def __post_init__(self):
        m = _frozen(self.matrix)
        object.__setattr__(self, "matrix", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise NotPositiveDefinite(f"covariance must be square, got {m.shape}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
            raise NotPositiveDefinite("covariance is not symmetric")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite(
                f"Cholesky factorization failed (ridge={self.ridge:g})"
            ) from None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.matrix)


@dataclass(frozen=True, eq=False)
class Sample:
    """One prediction day.

    ``features`` is asset-major: row i holds asset i's lookback returns,
    oldest first.
    """

    date: dt.date
    features: np.ndarray
    target_mu: np.ndarray
    cov: CovMatrix

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))
        object.__setattr__(self, "target_mu", _frozen(self.target_mu))
        n = self.target_mu.shape[0]
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise MalformedRow(f"features shape {self.features.shape} vs {n} assets")
        if self.cov.n != n:
            raise MalformedRow(f"covariance dimension {self.cov.n} vs {n} assets")
        if not np.all(np.isfinite(self.features)):
            raise MissingValue("non-finite feature value")


@dataclass(frozen=True)
class SplitSpec:
    train_len: int = 400
    valid_len: int = 100
    test_len: int = 100

    def __post_init__(self):
        if min(self.train_len, self.valid_len, self.test_len) <= 0:
            raise ValueError("split lengths must be positive")

    @property
    def total(self) -> int:
        return self.train_len + self.valid_len + self.test_len


# -- parsing ----------------------------------------------------------------


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def _ff_date(token: str) -> dt.date | None:
    token = token.strip()
    if len(token) != 8 or not token.isdigit():
        return None
    try:
        return dt.datetime.strptime(token, "%Y%m%d").date()
    except ValueError:
        return None


def _parse_value(token: str, lineno: int, asset: str) -> float:
    token = token.strip()
    try:
        value = float(token)
    except ValueError:
        raise MalformedRow(f"cannot parse value {token!r}", line=lineno, column=asset) from None
    if not math.isfinite(value) or any(abs(value - s) < 1e-9 for s in MISSING_SENTINELS):
        raise MissingValue(f"missing-data value {token!r}", line=lineno, column=asset)
    return value


def _split(line: str) -> list[str]:
    return [f.strip() for f in line.rstrip("\r\n").split(",")]


def _looks_like_header(fields: list[str]) -> bool:
    if len(fields) < 3:
        return False
    names = fields[1:]
    return all(f and not _is_number(f) for f in names) and not _is_number(fields[0])


def parse_returns_csv(text, format: str = PLAIN_DECIMAL) -> ReturnPanel:
    """Parse a return table from a string or text stream.

    ``ff_percent`` is the Kenneth French data library layout: free-form
    preamble, a header whose first field is blank, YYYYMMDD dates and
    percent values. Only the first data block is read; it ends at the first
    blank or non-date line. ``plain_decimal`` has a ``date,<asset>...``
    header, ISO dates and decimal values.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not isinstance(text, str):
        text = text.read()
    lines = text.splitlines()

    if format == FF_PERCENT:
        start = None
        for k, line in enumerate(lines):
            fields = _split(line)
            if _looks_like_header(fields):
                nxt = next((l for l in lines[k + 1:] if l.strip()), "")
                if _ff_date(_split(nxt)[0]) is not None:
                    start = k
                    break
        if start is None:
            raise MalformedRow("no header row followed by YYYYMMDD data found")
        scale = 0.01
    else:
        start = next((k for k, l in enumerate(lines) if l.strip()), None)
        if start is None:
            raise MalformedRow("empty input")
        scale = 1.0

    header = _split(lines[start])
    assets = header[1:]
    if len(assets) < 2:
        raise MalformedRow("header must name at least two assets", line=start + 1)

    dates, rows = [], []
    for k in range(start + 1, len(lines)):
        line = lines[k]
        lineno = k + 1
        if not line.strip():
            if format == FF_PERCENT:
                break
            continue
        fields = _split(line)
        if format == FF_PERCENT:
            date = _ff_date(fields[0])
            if date is None:
                break
        else:
            try:
                date = dt.date.fromisoformat(fields[0])
            except ValueError:
                raise MalformedRow(f"bad ISO date {fields[0]!r}", line=lineno) from None
        if len(fields) != len(header):
            raise MalformedRow(
                f"expected {len(header)} fields, got {len(fields)}", line=lineno
            )
        if dates and not dates[-1] < date:
            raise NonMonotoneDates(f"date {date} does not follow {dates[-1]}", line=lineno)
        rows.append([_parse_value(v, lineno, a) * scale for v, a in zip(fields[1:], assets)])
        dates.append(date)

    if not rows:
        raise MalformedRow("no data rows")
    return ReturnPanel(dates, assets, np.array(rows))


def format_returns_csv(panel: ReturnPanel) -> str:
    """Render a panel in ``plain_decimal`` form; ``repr`` keeps it lossless."""
    out = io.StringIO()
    out.write(",".join(("date",) + panel.assets) + "\n")
    for date, row in zip(panel.dates, panel.returns):
        out.write(date.isoformat() + "," + ",".join(repr(float(v)) for v in row) + "\n")
    return out.getvalue()


# -- samples ----------------------------------------------------------------


def covariance_estimate(window) -> np.ndarray:
    """Unbiased (L-1) two-pass sample covariance, exactly symmetric, unchecked."""
    w = np.asarray(window, dtype=float)
    if w.ndim != 2 or w.shape[0] < 2:
        raise DegenerateWindow(f"need at least 2 observations, got shape {w.shape}")
    centered = w - w.mean(axis=0)
    c = centered.T @ centered / (w.shape[0] - 1)
    return 0.5 * (c + c.T)


def sample_covariance(window, ridge: float = DEFAULT_RIDGE) -> CovMatrix:
    """:func:`covariance_estimate` plus ``ridge * I``, validated positive definite."""
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    c = covariance_estimate(window)
    c[np.diag_indices_from(c)] += ridge
    return CovMatrix(c, ridge)


def make_samples(
    panel: ReturnPanel, lookback: int = DEFAULT_LOOKBACK, ridge: float = DEFAULT_RIDGE
) -> list[Sample]:
    T = len(panel)
    if lookback < 2:
        raise DegenerateWindow("lookback must be at least 2")
    if T <= lookback:
        raise InsufficientHistory(f"{T} rows cannot feed a {lookback}-day lookback")
    r = panel.returns
    samples = []
    for k in range(T - lookback):
        window = r[k:k + lookback]
        samples.append(
            Sample(
                date=panel.dates[k + lookback],
                features=window.T,
                target_mu=r[k + lookback],
                cov=sample_covariance(window, ridge),
            )
        )
    return samples


def split_samples(samples: Sequence[Sample], spec: SplitSpec = SplitSpec()):
    if len(samples) < spec.total:
        raise InsufficientHistory(
            f"split needs {spec.total} samples, only {len(samples)} available"
        )
    a = spec.train_len
    b = a + spec.valid_len
    c = b + spec.test_len
    return list(samples[:a]), list(samples[a:b]), list(samples[b:c])


# -- synthetic data ---------------------------------------------------------


def generate_synthetic(
    seed: int,
    n_assets: int = 10,
    n_days: int = 630,
    k_factors: int = 3,
    noise_scale: float = 1.0,
    vol: float = 0.01,
    persistence: float = 0.5,
    start: dt.date = dt.date(2019, 1, 2),
) -> ReturnPanel:
    """AR(1) factor model ``r_t = drift + D (B f_t + noise_scale * eps_t)``.

    Factors have unit stationary variance and lag-one autocorrelation
    ``persistence``. ``D`` normalises each asset to a population daily
    volatility drawn from ``vol * [0.7, 1.4]``. The first factor loads
    positively on every asset so ``noise_scale=0, k_factors=1`` yields
    perfectly correlated returns.
    """
    if n_assets < 2 or n_days <= 31 or k_factors < 1:
        raise ValueError("need n_assets >= 2, n_days > 31, k_factors >= 1")
    if noise_scale < 0 or vol <= 0 or not (0 <= persistence < 1):
        raise ValueError("invalid noise_scale, vol or persistence")
    rng = np.random.default_rng(seed)

    loadings = rng.normal(0.0, 1.0, size=(n_assets, k_factors))
    loadings[:, 0] = rng.uniform(0.5, 1.5, size=n_assets)
    asset_vol = vol * rng.uniform(0.7, 1.4, size=n_assets)
    drift = rng.normal(2e-4, 2e-4, size=n_assets)

    burn_in = 100
    innovations = rng.normal(size=(n_days + burn_in, k_factors))
    f = np.zeros(k_factors)
    factors = np.empty((n_days, k_factors))
    gain = math.sqrt(1.0 - persistence**2)
    for t in range(n_days + burn_in):
        f = persistence * f + gain * innovations[t]
        if t >= burn_in:
            factors[t - burn_in] = f
    noise = rng.normal(size=(n_days, n_assets))

    norm = np.sqrt((loadings**2).sum(axis=1) + noise_scale**2)
    raw = factors @ loadings.T + noise_scale * noise
    returns = drift + raw * (asset_vol / norm)

    dates = []
    day = start
    while len(dates) < n_days:
        if day.weekday() < 5:
            dates.append(day)
        day += dt.timedelta(days=1)
    return ReturnPanel(dates, [f"A{i:02d}" for i in range(n_assets)], returns)
