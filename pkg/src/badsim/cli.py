"""``badsim`` command line: run scenarios, tabulate overhead, inspect threat DBs."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .encoding import MalformedInput
from .metrics import annual_fork_broadcast, curve_csv, overhead_curve
from .scenario import ScenarioError, bundled, run_scenario
from .threat import ThreatDatabase

EXIT_OK, EXIT_ASSERT, EXIT_USAGE = 0, 1, 2

DEFAULT_SWEEP = [150.0, 175.0, 200.0, 225.0, 250.0, 275.0, 300.0]


class BadArgument(ValueError):
    pass


def parse_m_list(text: str | None) -> list[float]:
    if not text:
        return list(DEFAULT_SWEEP)
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise BadArgument(f"--m expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise BadArgument("--m is empty")
    if any(v <= 0 for v in values):
        raise BadArgument("--m values must be positive")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise BadArgument("--m values must be strictly ascending")
    return values


def overhead_cmd(n_orphans: float = 141, max_block_mb: float = 0.993201, out_degree: float = 32,
                 m_list: list[float] | None = None) -> str:
    if min(n_orphans, max_block_mb, out_degree) < 0:
        raise BadArgument("orphans, block size and degree must be non-negative")
    annual = annual_fork_broadcast(n_orphans, max_block_mb, out_degree)
    return curve_csv(overhead_curve(annual, m_list if m_list is not None else DEFAULT_SWEEP))


def db_cmd(action: str, path: str) -> str:
    db = ThreatDatabase.deserialize(Path(path).read_bytes())
    if action == "export-json":
        return db.to_json() + "\n"
    lines = [f"k={db.k}"]
    for s in db.sequences:
        lines.append(f"id={s.id} length={s.length} first_seen={s.first_seen} label={s.label}")
    return "\n".join(lines) + "\n"


def _resolve_scenario(name: str) -> str:
    if os.path.exists(name):
        return name
    candidate = bundled(name if name.endswith(".toml") else name + ".toml")
    return str(candidate) if candidate.exists() else name


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="badsim", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a scenario file (or a bundled scenario name)")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="directory for trace.jsonl, report.json, summary.txt")

    ov = sub.add_parser("overhead", help="fork-broadcast overhead table as CSV")
    ov.add_argument("--orphans", type=float, default=141)
    ov.add_argument("--block-mb", type=float, default=0.993201)
    ov.add_argument("--degree", type=float, default=32)
    ov.add_argument("--m", default=None, help="ascending monthly bandwidths in GB, comma separated")

    db = sub.add_parser("db", help="threat database files")
    db.add_argument("action", choices=["inspect", "export-json"])
    db.add_argument("path")
    return p


def main(argv=None) -> int:
    level = os.environ.get("BADSIM_LOG", "info")
    logging.basicConfig(level=logging.DEBUG if level == "debug" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "run":
            result = run_scenario(_resolve_scenario(args.scenario), seed=args.seed, out_dir=args.out)
            sys.stdout.write(result.summary())
            return result.exit_code
        if args.cmd == "overhead":
            sys.stdout.write(overhead_cmd(args.orphans, args.block_mb, args.degree, parse_m_list(args.m)))
            return EXIT_OK
        sys.stdout.write(db_cmd(args.action, args.path))
        return EXIT_OK
    except ScenarioError as exc:
        print(f"badsim: parse error: {exc}", file=sys.stderr)
    except BadArgument as exc:
        print(f"badsim: bad argument: {exc}", file=sys.stderr)
    except MalformedInput as exc:
        print(f"badsim: malformed input: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"badsim: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
