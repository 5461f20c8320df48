"""Command line entry point: ``silofed {generate,run,sweep,inspect}``.

Exit status: 0 on success, 2 for a bad configuration (the JSON error line on
stderr names the offending key path), 1 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from silofed import config as cfgmod
from silofed import data, ensemble, harness, nncore
from silofed.config import ConfigError

log = logging.getLogger("silofed")

PACKAGED = ("example", "benchmark")


def packaged_config(name: str) -> Path:
    return Path(str(resources.files("silofed") / "configs" / f"{name}.toml"))


def _resolve_config(arg: Optional[str]) -> Path:
    if arg is None:
        return packaged_config("example")
    path = Path(arg)
    if path.exists():
        return path
    if arg in PACKAGED:
        return packaged_config(arg)
    raise ConfigError("<file>", f"no such config file {arg!r} (packaged configs: {', '.join(PACKAGED)})")


def _emit(obj: dict, stream=None) -> None:
    print(json.dumps(obj, sort_keys=True, default=str), file=stream or sys.stdout)


def _load(args: argparse.Namespace) -> cfgmod.RunConfig:
    cfg = cfgmod.load(_resolve_config(args.config))
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg.threads = args.threads
    return cfg


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _load(argparse.Namespace(config=args.config))
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if cfg.data["source"] != "synthetic":
        raise ConfigError("data.source", "generate needs a synthetic data section")
    silos, _ = cfgmod.load_silos(cfg)
    out = Path(args.out_dir) / "data.csv"
    data.write_csv(silos, out)
    _emit({"status": "ok", "command": "generate", "path": out, "silos": len(silos), "records": sum(len(s) for s in silos)})
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _load(args)
    silos, cfg = cfgmod.load_silos(cfg, args.data)
    report = harness.run_matrix(cfg.experiment, cfg.regimes, cfg.years, cfg.seeds, silos, cfg.threads)
    out_dir = Path(args.out_dir)
    paths = report.write(out_dir)
    if args.save_models:
        paths.update(harness.save_models(cfg.experiment, silos, cfg.years[0], cfg.seeds[0], out_dir))
    failed = report.failures()
    _emit(
        {
            "status": "ok" if len(failed) < len(report.cells) else "failed",
            "command": "run",
            "config_hash": report.config_hash,
            "cells": len(report.cells),
            "failed": len(failed),
            "regime_means": {k: float(harness.fmt(v)) for k, v in report.regime_means().items()},
            "files": {k: str(v) for k, v in paths.items()},
        }
    )
    return 0 if len(failed) < len(report.cells) else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if cfg.experiment.privacy is None:
        raise ConfigError("privacy", "the sweep needs a [privacy] section")
    silos, cfg = cfgmod.load_silos(cfg, args.data)
    year = cfg.sweep_year if cfg.sweep_year is not None else cfg.years[0]
    points = harness.sweep_epsilon(cfg.experiment, cfg.budgets, cfg.seeds, silos, year, cfg.threads)
    path = harness.write_curve(points, Path(args.out_dir) / "curves" / "epsilon.csv")
    rho = harness.spearman([p.epsilon for p in points], [p.median_rmse for p in points]) if len(points) > 1 else None
    _emit({"status": "ok", "command": "sweep", "path": path, "points": len(points), "spearman": rho})
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    if path.is_dir() or path.name == ensemble.MANIFEST_NAME:
        bundles, h = ensemble.read_manifest(path)
        info = {
            "kind": "ensemble",
            "config_hash": h,
            "bundles": [
                {
                    "silo_id": b.silo_id,
                    "location": [b.train_location.lat, b.train_location.lon],
                    "parameters": b.params.num_values(),
                    "epsilon": b.epsilon,
                }
                for b in bundles
            ],
        }
    elif path.suffix == ".csv":
        rows = harness.read_report_csv(path)
        regimes = sorted({r["regime"] for r in rows})
        info = {
            "kind": "report",
            "rows": len(rows),
            "failed": sum(r["status"] == "failed" for r in rows),
            "regimes": regimes,
        }
    else:
        params = nncore.load_params(path)
        info = {"kind": "checkpoint", "parameters": params.num_values(), "tensors": nncore.describe_checkpoint(params)}
    _emit({"status": "ok", "command": "inspect", "path": path, **info})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silofed", description="Cross-silo federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic silos to data.csv")
    g.add_argument("--config", help="config file or packaged name (default: example)")
    g.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    g.add_argument("--out-dir", default=".")
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (
        ("run", cmd_run, "run the regime matrix and write report.csv and summary.txt"),
        ("sweep", cmd_sweep, "federated LDP runs over privacy budgets; writes curves/epsilon.csv"),
    ):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("config", nargs="?", help="config file or packaged name (default: example)")
        r.add_argument("--data", help="CSV of silo records (overrides the config's data source)")
        r.add_argument("--seed", type=int, help="run this single seed instead of the config's list")
        r.add_argument("--threads", type=int, help="worker threads for independent jobs")
        r.add_argument("--out-dir", default=".")
        if name == "run":
            r.add_argument("--save-models", action="store_true", help="also store the first job's models")
        r.set_defaults(func=func)

    i = sub.add_parser("inspect", help="summarize a checkpoint, ensemble manifest or report.csv")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit({"status": "error", "error": "config", "key": exc.key, "message": exc.message}, sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        log.debug("command failed", exc_info=True)
        _emit({"status": "error", "error": "runtime", "type": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
