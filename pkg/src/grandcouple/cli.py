"""Command-line harness: seeded experiments emitting CSV plus a JSON sidecar.

Usage::

    grandcouple <subcommand> --config cfg.json [--seed N] [--reps N]
                [--workers N] [--out path.csv]

Subcommands: ``multimarginal``, ``meet``, ``runtime``, ``diagnose``,
``harmonize``.  Exit codes: 0 success, 2 configuration error, 3 runtime or
censoring-threshold breach.  The config schema is documented in
``docs/config.md``; CLI flags override config fields.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

from . import experiments
from .experiments import ExperimentError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_COMMANDS = ("multimarginal", "meet", "runtime", "diagnose", "harmonize")


def _format_cell(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    """Stable byte layout: comma separators, '.' decimals, LF endings."""
    lines = [",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(_format_cell(row[k]) for k in fieldnames))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_sidecar(csv_path: Path, config: dict, wall_time_s: float, extra: dict | None = None) -> None:
    meta = {
        "config": config,
        "config_hash": _config_hash(config),
        "seed": config.get("seed"),
        "git_revision": "unknown",
        "wall_time_s": wall_time_s,
    }
    if extra:
        meta.update(extra)
    side = csv_path.with_suffix(csv_path.suffix + ".meta.json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> dict:
    config: dict = {}
    if args.config is not None:
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ExperimentError(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"config is not valid JSON: {exc}")
        if not isinstance(config, dict):
            raise ExperimentError("config root must be a JSON object")
    if args.seed is not None:
        config["seed"] = args.seed
    if args.reps is not None:
        config["replicates"] = args.reps
    if args.workers is not None:
        config["workers"] = args.workers
    if "seed" not in config:
        raise ExperimentError("a seed is required (config key 'seed' or --seed)")
    config.setdefault("replicates", 1000)
    config.setdefault("workers", 1)
    if not isinstance(config["seed"], int) or config["seed"] < 0:
        raise ExperimentError("seed must be a nonnegative integer")
    if int(config["replicates"]) < 1:
        raise ExperimentError("replicates must be >= 1")
    return config


def _censor_breach(rows, config) -> bool:
    threshold = float(config.get("max_censor_rate", 1.0))
    for row in rows:
        rate = row.get("censor_rate")
        if rate is None and "censored" in row and row.get("n"):
            rate = row["censored"] / row["n"]
        if rate is not None and rate > threshold:
            return True
    return False


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="grandcouple",
        description="Coupling experiments: expected cluster counts, meeting times, "
        "runtime scaling, convergence diagnostics, weight harmonization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--reps", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output CSV path")
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
    except ExperimentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out) if args.out else Path(f"{args.command}.csv")
    t0 = time.monotonic()
    try:
        if args.command == "multimarginal":
            rows, fields = experiments.run_multimarginal(config)
        elif args.command == "meet":
            rows, fields = experiments.run_meet(config)
        elif args.command == "runtime":
            rows, fields = experiments.run_runtime(config)
        elif args.command == "diagnose":
            rows, fields, alpha_rows, alpha_fields = experiments.run_diagnose(config)
        elif args.command == "harmonize":
            rows, fields = experiments.run_harmonize(config)
        else:  # pragma: no cover - argparse guards this
            raise ExperimentError(f"unknown command {args.command}")
    except ExperimentError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    wall = time.monotonic() - t0
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, fields, rows)
    extra = {}
    if args.command == "diagnose":
        alpha_path = out.with_name(out.stem + "_alpha" + out.suffix)
        write_csv(alpha_path, alpha_fields, alpha_rows)
        extra["alpha_table"] = str(alpha_path)
    censored_total = sum(int(r.get("censored", 0)) for r in rows) + sum(
        int(round(r.get("censor_rate", 0.0) * r.get("n", 0))) for r in rows
    )
    extra["censored_total"] = censored_total
    write_sidecar(out, config, wall, extra)

    if _censor_breach(rows, config):
        print("censoring threshold breached", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
