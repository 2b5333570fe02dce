"""Command-line entry point: ``ppap run | report | verify``.

Exit codes: 0 success, 1 runtime failure (failed cell, failing suite),
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ._io import atomic_write_text
from .config import load_config
from .errors import ConfigError, PPAPError

log = logging.getLogger("ppap")


def _env_int(name):
    v = os.environ.get(name)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"expected an integer, got {v!r}", name) from None


def cmd_run(args):
    from .experiment import execute, plan_cells, write_outputs

    overrides = {}
    seed = args.seed_override if args.seed_override is not None else _env_int("PPAP_SEED_OVERRIDE")
    if seed is not None:
        overrides["seeds"] = [seed]
    workers = args.workers if args.workers is not None else _env_int("PPAP_WORKERS")
    if workers is not None:
        overrides["workers"] = workers
    out = args.out or os.environ.get("PPAP_OUT") or None
    if out:
        overrides["output"] = str(out)
    cfg = load_config(args.config, overrides=overrides)
    out = Path(cfg.output)
    cells = plan_cells(cfg)
    atomic_write_text(out / "effective_config.yaml", cfg.to_yaml())
    log.info("%s protocol: %d cells, %d worker(s), output %s", cfg.protocol, len(cells), cfg.workers, out)
    results = execute(cfg, cells, cfg.workers)
    failed = write_outputs(cfg, results, out)
    if failed:
        log.error("%d of %d cells failed; see %s", failed, len(cells), out / "failures.txt")
        return 1
    log.info("wrote %s (%d rows)", out / "metrics.csv", sum(len(r.rows) for r in results))
    return 0


def cmd_report(args):
    from .harness import read_metrics_csv
    from .report import render

    rows = read_metrics_csv(args.csv)
    out = Path(args.out or ".")
    for name, svg in render(rows, args.style).items():
        atomic_write_text(out / name, svg)
        print(out / name)
    return 0


def cmd_verify(args):
    from . import verify

    for name in args.suite or []:
        if name not in verify.SUITES:
            raise ConfigError(f"unknown suite {name!r}; choose from {list(verify.SUITES)}", "--suite")
    results = verify.run_all(args.suite or None)
    sys.stdout.write(verify.format_table(results))
    out = args.out or os.environ.get("PPAP_OUT")
    if out:
        atomic_write_text(Path(out) / "verify.csv", verify.format_csv(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ppap", description="Plateau-phase activity profiles for continual learning")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the experiment matrix described by a YAML config")
    r.add_argument("--config", default=os.environ.get("PPAP_CONFIG"), required="PPAP_CONFIG" not in os.environ,
                   help="experiment YAML")
    r.add_argument("--out", help="output directory (overrides config 'output')")
    r.add_argument("--workers", type=int, help="parallel cells (default from config)")
    r.add_argument("--seed-override", type=int, help="replace the config's seed list with this seed")
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="render SVG charts from metrics CSVs")
    rep.add_argument("csv", nargs="+", help="metrics CSV file(s) sharing the schema")
    rep.add_argument("--style", choices=("bars", "scatter"), required=True)
    rep.add_argument("--out", help="directory for the SVG files (default: current)")
    rep.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", help="run the invariant/oracle suites")
    v.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    v.add_argument("--out", help="also write verify.csv here")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PPAPError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
