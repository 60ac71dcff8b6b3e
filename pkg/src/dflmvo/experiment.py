"""The alpha x lambda x seed experiment grid and its report files.

Every cell runs in its own subdirectory of the output directory and is
marked complete by a ``done`` file written last, so an interrupted grid
resumes where it stopped. Per-lambda random NDQ baselines are computed
once and shared by every cell with that lambda.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DataError, DflError
from .evaluation import (
    CORRELATION_KEYS,
    NdqConfig,
    baseline_scale,
    correlation_report,
    fmt,
    random_baselines,
    run_backtest,
)
from .market_data import (
    PLAIN_DECIMAL,
    SplitSpec,
    format_returns_csv,
    generate_synthetic,
    make_samples,
    parse_returns_csv,
    split_samples,
)
from .model import save_checkpoint
from .training import LossConfig, TrainConfig, train

CONFIG_VERSION = 1
METRIC_KEYS = ("ndq", "mvo_loss", "mse", "cosine", "sharpe", "cumulative_return")
REPORT_FILES = (
    "table1.csv",
    "table2.csv",
    "table3.csv",
    "figure2_data.csv",
    "figure3_data.csv",
    "summary.json",
)


class ConfigError(ValueError):
    """Invalid experiment configuration (a usage error)."""


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    data_path: str | None = None
    data_format: str = PLAIN_DECIMAL
    synthetic_seed: int = 7
    synthetic_assets: int = 10
    synthetic_days: int = 630
    lookback: int = 30
    ridge: float = 1e-8
    split_train: int = 400
    split_valid: int = 100
    split_test: int = 100
    alphas: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    lambdas: tuple = (1.0, 3.0, 5.0, 10.0)
    seeds: int = 5
    base_seed: int = 0
    max_iterations: int = 5000
    patience: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 32
    mse_scale: float = 10.0
    n_random: int = 1000
    ndq_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if not self.alphas or not self.lambdas:
            raise ConfigError("alpha and lambda grids must be non-empty")
        if self.seeds < 1:
            raise ConfigError("seeds must be at least 1")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ConfigError("alphas must lie in [0, 1]")
        if any(not v > 0 for v in self.lambdas):
            raise ConfigError("lambdas must be positive")
        try:
            self.train_config(0)
            self.ndq_config(1.0)
            self.split_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if "version" not in raw:
            raise ConfigError("config is missing the 'version' field")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        d["lambdas"] = list(self.lambdas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_train, self.split_valid, self.split_test)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            max_iterations=self.max_iterations,
            patience=self.patience,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=seed,
        )

    def ndq_config(self, scale: float) -> NdqConfig:
        return NdqConfig(self.n_random, scale, self.ndq_seed)

    def run_fingerprint(self) -> str:
        """Hash of every setting that affects a single run's result.

        The grid extents are left out, so extending a grid keeps existing
        cells valid.
        """
        d = self.to_dict()
        for k in ("alphas", "lambdas", "seeds"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @property
    def n_cells(self) -> int:
        return len(self.alphas) * len(self.lambdas)


def cell_seed(base_seed: int, alpha_index: int, lambda_index: int, rep: int) -> int:
    """Seed of one run, derived from grid coordinates rather than run order."""
    seq = np.random.SeedSequence([base_seed, alpha_index, lambda_index, rep])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


# -- data -------------------------------------------------------------------


@dataclass
class Dataset:
    panel: object
    train: list
    valid: list
    test: list
    checksum: str


def panel_checksum(panel) -> str:
    return hashlib.sha256(format_returns_csv(panel).encode()).hexdigest()


def load_panel(config: ExperimentConfig):
    if config.data_path is None:
        return generate_synthetic(
            config.synthetic_seed, n_assets=config.synthetic_assets, n_days=config.synthetic_days
        )
    try:
        with open(config.data_path, newline="") as fh:
            return parse_returns_csv(fh, config.data_format)
    except FileNotFoundError:
        raise DataError(f"data file not found: {config.data_path}") from None


def build_dataset(config: ExperimentConfig) -> Dataset:
    panel = load_panel(config)
    samples = make_samples(panel, lookback=config.lookback, ridge=config.ridge)
    tr, va, te = split_samples(samples, config.split_spec())
    return Dataset(panel, tr, va, te, panel_checksum(panel))


@lru_cache(maxsize=4)
def _dataset_for(config_json: str, fingerprint) -> Dataset:
    return build_dataset(ExperimentConfig.from_dict(json.loads(config_json)))


def _cached_dataset(config_json: str) -> Dataset:
    path = json.loads(config_json)["data_path"]
    fingerprint = None
    if path is not None and os.path.exists(path):
        st = os.stat(path)
        fingerprint = (st.st_mtime_ns, st.st_size)
    return _dataset_for(config_json, fingerprint)


# -- file helpers -----------------------------------------------------------


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def cell_dir(out_dir, ai: int, li: int, rep: int) -> Path:
    return Path(out_dir) / "cells" / f"a{ai}_l{li}_s{rep}"


def baseline_path(out_dir, li: int) -> Path:
    return Path(out_dir) / "baselines" / f"lambda{li}.json"


def ensure_baselines(config: ExperimentConfig, out_dir, data: Dataset | None = None) -> float:
    """Write missing per-lambda baseline files; returns seconds spent."""
    data = data or _cached_dataset(config.to_json())
    scale = baseline_scale(data.train)
    start = time.perf_counter()
    for li, lam in enumerate(config.lambdas):
        path = baseline_path(out_dir, li)
        if path.exists():
            old = json.loads(path.read_text())
            if old.get("fingerprint") == config.run_fingerprint() and old.get("lambda") == lam:
                continue
        path.parent.mkdir(parents=True, exist_ok=True)
        values = random_baselines(data.test, lam, config.ndq_config(scale))
        payload = {
            "lambda": lam,
            "scale": scale,
            "checksum": data.checksum,
            "fingerprint": config.run_fingerprint(),
            "values": values.tolist(),
        }
        _write_atomic(path, _dump(payload))
    return time.perf_counter() - start


def _load_baselines(out_dir, li: int, checksum: str) -> np.ndarray:
    payload = json.loads(baseline_path(out_dir, li).read_text())
    if payload["checksum"] != checksum:
        raise DataError(f"baseline file {baseline_path(out_dir, li)} belongs to another dataset")
    return np.array(payload["values"])


# -- one cell ---------------------------------------------------------------


def run_cell(config: ExperimentConfig, out_dir, ai: int, li: int, rep: int) -> dict:
    """Train and backtest one run; writes its files and the done marker last."""
    data = _cached_dataset(config.to_json())
    alpha, lam = config.alphas[ai], config.lambdas[li]
    seed = cell_seed(config.base_seed, ai, li, rep)
    d = cell_dir(out_dir, ai, li, rep)
    d.mkdir(parents=True, exist_ok=True)
    (d / "done").unlink(missing_ok=True)

    start = time.perf_counter()
    log_lines = []
    model, record = train(
        data.train,
        data.valid,
        seed,
        LossConfig(alpha, lam, config.mse_scale),
        config.train_config(seed),
        log=lambda r: log_lines.append(r.to_line()),
    )
    save_checkpoint(model, d / "model.bin")
    _write_atomic(d / "train_log.jsonl", "\n".join(log_lines) + "\n")

    baselines = _load_baselines(out_dir, li, data.checksum)
    scale = baseline_scale(data.train)
    bt = run_backtest(model, data.test, lam, config.ndq_config(scale), baselines, config.mse_scale)
    _write_atomic(d / "backtest.csv", bt.to_csv())
    corr = correlation_report([bt])
    metrics = {
        "alpha": alpha,
        "lambda": lam,
        "alpha_index": ai,
        "lambda_index": li,
        "rep": rep,
        "seed": seed,
        "dataset_checksum": data.checksum,
        "run_fingerprint": config.run_fingerprint(),
        "ndq": bt.mean_ndq,
        "mvo_loss": bt.mean_regret,
        "mse": bt.mean_mse,
        "cosine": bt.mean_cosine,
        "sharpe": bt.sharpe,
        "cumulative_return": bt.cumulative_return,
        "correlations": corr.per_run[0],
        "correlation_skipped_days": corr.skipped_days,
        "degenerate_ndq_days": bt.degenerate_days,
        "stopping_iteration": record.stopping_iteration,
        "best_iteration": record.best_iteration,
        "best_valid_loss": record.best_valid_loss,
        "degenerate_jacobian_events": record.degenerate_events,
        "solver_calls": record.solver_calls,
        "monitor": record.monitor,
    }
    text = _dump(metrics)
    _write_atomic(d / "metrics.json", text)
    _write_atomic(d / "timing.json", _dump({"seconds": time.perf_counter() - start}))
    _write_atomic(d / "done", hashlib.sha256(text.encode()).hexdigest() + "\n")
    return metrics


def load_done_cell(out_dir, ai: int, li: int, rep: int) -> dict | None:
    """Metrics of a completed cell, or None if it has to be (re)computed."""
    d = cell_dir(out_dir, ai, li, rep)
    try:
        marker = (d / "done").read_text().strip()
        text = (d / "metrics.json").read_text()
    except FileNotFoundError:
        return None
    if hashlib.sha256(text.encode()).hexdigest() != marker:
        return None
    return json.loads(text)


def _cell_worker(args):
    config_json, out_dir, ai, li, rep = args
    config = ExperimentConfig.from_dict(json.loads(config_json))
    try:
        return (ai, li, rep), run_cell(config, out_dir, ai, li, rep), None
    except DflError as exc:
        return (ai, li, rep), None, {"type": type(exc).__name__, "message": str(exc)}
    except Exception as exc:  # keep the rest of the grid running
        return (ai, li, rep), None, {
            "type": type(exc).__name__,
            "message": str(exc),
            "traceback": traceback.format_exc(),
        }


# -- the grid ---------------------------------------------------------------


@dataclass
class GridOutcome:
    records: dict
    failures: dict
    computed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def run_grid(config: ExperimentConfig, out_dir, jobs: int = 1, progress=None) -> GridOutcome:
    """Run every missing cell, then write the report files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = _cached_dataset(config.to_json())
    _write_atomic(out_dir / "config.json", config.to_json() + "\n")
    ensure_baselines(config, out_dir, data)

    records, failures, todo, skipped = {}, {}, [], []
    for ai in range(len(config.alphas)):
        for li in range(len(config.lambdas)):
            for rep in range(config.seeds):
                done = load_done_cell(out_dir, ai, li, rep)
                if (
                    done is not None
                    and done.get("dataset_checksum") == data.checksum
                    and done.get("run_fingerprint") == config.run_fingerprint()
                    and done.get("alpha") == config.alphas[ai]
                    and done.get("lambda") == config.lambdas[li]
                ):
                    records[(ai, li, rep)] = done
                    skipped.append((ai, li, rep))
                else:
                    todo.append((ai, li, rep))

    args = [(config.to_json(), str(out_dir), *key) for key in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_worker, args))
    else:
        results = []
        for a in args:
            results.append(_cell_worker(a))
            if progress is not None:
                progress(results[-1])
    for key, metrics, err in results:
        if err is None:
            records[key] = metrics
        else:
            failures[key] = err

    write_reports(config, out_dir, records, failures, data.checksum)
    return GridOutcome(records, failures, todo, skipped)


# -- aggregation ------------------------------------------------------------


def _mean_std(values):
    arr = np.array(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(np.mean(arr)), float(np.std(arr))


def _csv(header, rows) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) if isinstance(v, float) else v for v in r])
    return out.getvalue()


def aggregate_cells(config: ExperimentConfig, records: dict) -> list:
    """One summary entry per (alpha, lambda) cell, in grid order."""
    cells = []
    for ai, alpha in enumerate(config.alphas):
        for li, lam in enumerate(config.lambdas):
            runs = [records[(ai, li, r)] for r in range(config.seeds) if (ai, li, r) in records]
            entry = {"alpha": alpha, "lambda": lam, "n_runs": len(runs), "mean": {}, "std": {}}
            for k in METRIC_KEYS:
                entry["mean"][k], entry["std"][k] = _mean_std([r[k] for r in runs])
            for k in CORRELATION_KEYS:
                m, s = _mean_std([r["correlations"][k] for r in runs])
                entry["mean"]["corr_" + k], entry["std"]["corr_" + k] = m, s
            entry["runs"] = [
                {"rep": r["rep"], "seed": r["seed"], **{k: r[k] for k in METRIC_KEYS},
                 **{"corr_" + k: r["correlations"][k] for k in CORRELATION_KEYS}}
                for r in runs
            ]
            cells.append(entry)
    return cells


def write_reports(config, out_dir, records, failures, checksum) -> None:
    out_dir = Path(out_dir)
    cells = aggregate_cells(config, records)

    def cell_rows(keys):
        for c in cells:
            row = [c["alpha"], c["lambda"]]
            for k in keys:
                row += [c["mean"][k], c["std"][k]]
            yield row + [c["n_runs"]]

    def header(keys):
        h = ["alpha", "lambda"]
        for k in keys:
            h += [f"{k}_mean", f"{k}_std"]
        return h + ["n_runs"]

    t1 = ("ndq", "mvo_loss", "mse")
    _write_atomic(out_dir / "table1.csv", _csv(header(t1), cell_rows(t1)))
    _write_atomic(out_dir / "table2.csv", _csv(header(("cosine",)), cell_rows(("cosine",))))
    t3 = tuple("corr_" + k for k in CORRELATION_KEYS)
    _write_atomic(out_dir / "table3.csv", _csv(header(t3), cell_rows(t3)))

    runs = sorted(records.items())
    _write_atomic(
        out_dir / "figure2_data.csv",
        _csv(
            ["alpha", "lambda", "rep", "seed", "sharpe", "cumulative_return"],
            ([r["alpha"], r["lambda"], r["rep"], r["seed"], r["sharpe"], r["cumulative_return"]] for _, r in runs),
        ),
    )
    _write_atomic(
        out_dir / "figure3_data.csv",
        _csv(
            ["alpha", "lambda", "rep", "seed", "corr_target_vs_pred"],
            ([r["alpha"], r["lambda"], r["rep"], r["seed"], r["correlations"]["target_vs_pred"]] for _, r in runs),
        ),
    )
    summary = {
        "version": CONFIG_VERSION,
        "config": config.to_dict(),
        "dataset_checksum": checksum,
        "n_cells": config.n_cells,
        "n_runs_expected": config.n_cells * config.seeds,
        "n_runs_completed": len(records),
        "failures": [{"alpha_index": k[0], "lambda_index": k[1], "rep": k[2], **v} for k, v in sorted(failures.items())],
        "cells": cells,
    }
    _write_atomic(out_dir / "summary.json", _dump(summary))


# -- report -----------------------------------------------------------------


def _read_report_inputs(run_dir):
    run_dir = Path(run_dir)
    for name in REPORT_FILES:
        if not (run_dir / name).is_file():
            raise DataError(f"missing report input: {run_dir / name}")
    try:
        summary = json.loads((run_dir / "summary.json").read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{run_dir / 'summary.json'}: invalid JSON ({exc})") from None
    if summary.get("n_runs_completed") != summary.get("n_runs_expected"):
        raise DataError(
            f"partial grid output: {summary.get('n_runs_completed')} of "
            f"{summary.get('n_runs_expected')} runs completed"
        )
    return summary


def _lam_label(lam: float) -> str:
    return f"{lam:g}"


def trend_verdicts(summary: dict) -> list:
    """Monotonicity in alpha, one verdict per metric and lambda."""
    cells = summary["cells"]
    lambdas = sorted({c["lambda"] for c in cells})
    rules = (("NDQ", "ndq", 1), ("MVO loss", "mvo_loss", -1), ("Cosine", "cosine", 1))
    out = []
    for name, key, sign in rules:
        for lam in lambdas:
            series = [c["mean"][key] for c in sorted(cells, key=lambda c: c["alpha"]) if c["lambda"] == lam]
            ok = len(series) > 1 and all(sign * (b - a) > 0 for a, b in zip(series, series[1:]))
            out.append((name, lam, ok))
    return out


def endpoint_verdicts(summary: dict) -> list:
    """Pure regret training (max alpha) against pure MSE training (min alpha)."""
    cells = summary["cells"]
    lo = min(c["alpha"] for c in cells)
    hi = max(c["alpha"] for c in cells)
    if lo == hi:
        return []
    by = {(c["alpha"], c["lambda"]): c["mean"] for c in cells}
    out = []
    for lam in sorted({c["lambda"] for c in cells}):
        a, b = by[(lo, lam)], by[(hi, lam)]
        out.append(("NDQ", lam, b["ndq"] > a["ndq"]))
        out.append(("MVO loss", lam, b["mvo_loss"] < a["mvo_loss"]))
        out.append(("Cosine", lam, b["cosine"] > a["cosine"]))
    return out


def _table(headers, rows) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = lambda cols: "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    return "\n".join([line(headers), line(["-" * w for w in widths])] + [line(r) for r in rows])


def _pm(mean: float, std: float, digits: int = 3) -> str:
    if math.isnan(mean):
        return "nan"
    return f"{mean:.{digits}f} (±{std:.{digits}f})"


def render_report(run_dir) -> str:
    summary = _read_report_inputs(run_dir)
    cells = sorted(summary["cells"], key=lambda c: (c["lambda"], c["alpha"]))
    parts = [f"dataset sha256 {summary['dataset_checksum']}", ""]

    def section(title, cols, digits=3):
        rows = [
            [_lam_label(c["lambda"]), f"{c['alpha']:g}"]
            + [_pm(c["mean"][k], c["std"][k], digits) for k, _ in cols]
            for c in cells
        ]
        parts.extend([title, _table(["lambda", "alpha"] + [h for _, h in cols], rows), ""])

    section("NDQ, MVO loss and MSE", [("ndq", "NDQ"), ("mvo_loss", "MVO loss"), ("mse", "MSE x10")], 4)
    section("Cosine similarity of optimal and model portfolios", [("cosine", "cosine")])
    section(
        "Cross-sectional correlations",
        [
            ("corr_inv_cov_vs_pred", "inv-cov & pred"),
            ("corr_sq_error_vs_pred", "sq-error & pred"),
            ("corr_inv_cov_vs_weights", "inv-cov & w"),
            ("corr_target_vs_pred", "target & pred"),
        ],
    )
    section("Backtest", [("sharpe", "Sharpe"), ("cumulative_return", "cum. return")])

    parts.append("Trend verdicts (strict monotonicity in alpha)")
    for name, lam, ok in trend_verdicts(summary):
        parts.append(f"{name} trend: {'PASS' if ok else 'FAIL'} (λ={_lam_label(lam)})")
    parts.append("")
    parts.append("Endpoint verdicts (largest vs smallest alpha)")
    for name, lam, ok in endpoint_verdicts(summary):
        parts.append(f"{name} endpoint: {'PASS' if ok else 'FAIL'} (λ={_lam_label(lam)})")
    if summary["failures"]:
        parts.append("")
        parts.append(f"{len(summary['failures'])} failed runs recorded in summary.json")
    return "\n".join(parts) + "\n"
