"""``dflmvo`` command line: prepare, train, grid and report.

Exit codes: 0 success, 1 usage, 2 input or data error, 3 numerical
failure, 4 partial grid failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from .errors import DataError, NumericalError
from .experiment import (
    ConfigError,
    ExperimentConfig,
    build_dataset,
    render_report,
    run_grid,
)
from .market_data import FF_PERCENT, PLAIN_DECIMAL, format_returns_csv, generate_synthetic, parse_returns_csv
from .model import save_checkpoint
from .training import LossConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return ExperimentConfig.load(args.config)


# -- prepare ----------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.synthetic == (args.input is not None):
        raise UsageError("give exactly one of --synthetic or --input")
    if args.synthetic:
        panel = generate_synthetic(args.seed, n_assets=args.assets, n_days=args.days)
        source = {"synthetic": {"seed": args.seed, "assets": args.assets, "days": args.days}}
    else:
        try:
            with open(args.input, newline="") as fh:
                panel = parse_returns_csv(fh, args.format)
        except FileNotFoundError:
            raise DataError(f"input file not found: {args.input}") from None
        except DataError as exc:
            raise DataError(f"{args.input}: {exc}") from None
        source = {"input": os.path.basename(args.input), "format": args.format}
    text = format_returns_csv(panel)
    out = Path(args.output_dir)
    data_path = out / f"{args.name}.csv"
    _write(data_path, text)
    manifest = {
        "file": data_path.name,
        "format": PLAIN_DECIMAL,
        "sha256": hashlib.sha256(text.encode()).hexdigest(),
        "assets": list(panel.assets),
        "n_days": len(panel),
        "first_date": panel.dates[0].isoformat(),
        "last_date": panel.dates[-1].isoformat(),
        "source": source,
    }
    _write(out / f"{args.name}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {data_path} ({len(panel)} days, {len(panel.assets)} assets)")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def _config_with_data(args) -> ExperimentConfig:
    config = _load_config(args)
    if getattr(args, "data", None) is not None:
        d = config.to_dict()
        d["data_path"] = args.data
        d["data_format"] = PLAIN_DECIMAL
        config = ExperimentConfig.from_dict(d)
    return config


def cmd_train(args) -> int:
    if not 0.0 <= args.alpha <= 1.0:
        raise UsageError(f"--alpha must lie in [0, 1], got {args.alpha}")
    if not args.lam > 0:
        raise UsageError(f"--lambda must be positive, got {args.lam}")
    config = _config_with_data(args)
    data = build_dataset(config)
    run_dir = Path(args.output_dir) / f"train_a{args.alpha:g}_l{args.lam:g}_s{args.seed}"
    log_lines = []
    model, record = train(
        data.train,
        data.valid,
        args.seed,
        LossConfig(args.alpha, args.lam, config.mse_scale),
        config.train_config(args.seed),
        log=lambda r: log_lines.append(r.to_line()),
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, run_dir / "model.bin")
    _write(run_dir / "train_log.jsonl", "\n".join(log_lines) + "\n")
    rec = record.to_dict()
    rec["dataset_checksum"] = data.checksum
    _write(run_dir / "train_record.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")
    print(
        f"stopped at iteration {record.stopping_iteration}, best validation loss "
        f"{record.best_valid_loss:.6g} at iteration {record.best_iteration}; wrote {run_dir}"
    )
    return EXIT_OK


# -- grid and report --------------------------------------------------------


def cmd_grid(args) -> int:
    config = _config_with_data(args)
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")

    def progress(result):
        key, metrics, err = result
        status = "failed: " + err["message"] if err else f"NDQ {metrics['ndq']:.4f}"
        print(f"cell alpha#{key[0]} lambda#{key[1]} rep {key[2]}: {status}", flush=True)

    outcome = run_grid(config, args.output_dir, jobs=args.jobs, progress=progress)
    print(
        f"{len(outcome.computed)} runs computed, {len(outcome.skipped)} reused, "
        f"{len(outcome.failures)} failed; reports in {args.output_dir}"
    )
    return EXIT_OK if outcome.ok else EXIT_PARTIAL


def cmd_report(args) -> int:
    run_dir = args.run_dir or args.output_dir
    sys.stdout.write(render_report(run_dir))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dflmvo", description="Decision-focused learning for mean-variance portfolios.")
    p.add_argument("--output-dir", default=".", help="directory all outputs are written to")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the grid")
    p.add_argument("--config", default=None, help="JSON experiment config")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pp = sub.add_parser("prepare", help="parse or generate a returns panel")
    pp.add_argument("--synthetic", action="store_true")
    pp.add_argument("--input")
    pp.add_argument("--format", choices=[FF_PERCENT, PLAIN_DECIMAL], default=FF_PERCENT)
    pp.add_argument("--seed", type=int, default=7)
    pp.add_argument("--assets", type=int, default=10)
    pp.add_argument("--days", type=int, default=630)
    pp.add_argument("--name", default="dataset")
    pp.set_defaults(func=cmd_prepare)

    pt = sub.add_parser("train", help="train one model")
    pt.add_argument("--data", help="prepared plain-decimal CSV (default: config data source)")
    pt.add_argument("--alpha", type=float, required=True)
    pt.add_argument("--lambda", dest="lam", type=float, required=True)
    pt.add_argument("--seed", type=int, default=0)
    pt.set_defaults(func=cmd_train)

    pg = sub.add_parser("grid", help="run the alpha x lambda x seed grid")
    pg.add_argument("--data", help="prepared plain-decimal CSV (default: config data source)")
    pg.set_defaults(func=cmd_grid)

    pr = sub.add_parser("report", help="summarise a finished grid")
    pr.add_argument("run_dir", nargs="?", default=None)
    pr.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dflmvo: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dflmvo: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"dflmvo: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
