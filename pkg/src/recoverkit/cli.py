"""Command line entry point: ``recoverkit <subcommand> --config run.json``."""
from __future__ import annotations

import argparse
import json
import sys

from . import config as C

BENCH = "bench"


def _parser():
    ap = argparse.ArgumentParser(prog="recoverkit", description="Fall, push-recovery and transfer experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for task in C.TASK_BLOCKS:
        p = sub.add_parser(task, help=f"run {task} from a JSON config")
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="JSON config file")
        src.add_argument("--template", action="store_true", help="print a default config and exit")
        p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    b = sub.add_parser(BENCH, help="run acceptance targets")
    b.add_argument("targets", nargs="*", help="target names (default: all)")
    b.add_argument("--out", default="bench_results", help="directory for result files")
    b.add_argument("--list", action="store_true", help="list target names")
    return ap


def _fail(payload, code=2):
    print(json.dumps(payload), file=sys.stderr)
    return code


def _bench(args):
    from .bench import TARGETS, run_targets
    if args.list:
        print("\n".join(TARGETS))
        return 0
    names = args.targets or list(TARGETS)
    unknown = [n for n in names if n not in TARGETS]
    if unknown:
        return _fail({"error": "unknown benchmark target(s)", "fields": unknown})
    results = run_targets(names, args.out, log=lambda m: print(m, flush=True))
    return 0 if all(r.passed for r in results) else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == BENCH:
        return _bench(args)
    if args.template:
        print(json.dumps(C.template(args.command), indent=2))
        return 0
    try:
        rc = C.load(args.config, args.command)
    except C.ConfigError as exc:
        return _fail(exc.to_dict())
    if args.dry_run:
        print(json.dumps(rc.to_dict(), indent=2))
        return 0
    from .runs import run
    try:
        record = run(rc)
    except C.ConfigError as exc:
        return _fail(exc.to_dict())
    except (FileNotFoundError, ValueError) as exc:
        return _fail({"error": str(exc), "fields": []}, code=1)
    print(json.dumps({"status": record["status"], "output_dir": rc.output_dir}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
