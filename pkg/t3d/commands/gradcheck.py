# t3d/commands/gradcheck.py
from __future__ import annotations

import argparse
import logging

from t3d.commands import seeds_arg
from t3d.common import ConfigError, NumericError
from t3d.gradcheck import CASES, format_rows, run_suite

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    names = list(CASES) if args.all or not args.layer else args.layer
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise ConfigError(f"unknown layer(s) {unknown}", {"known": list(CASES)})
    seeds = seeds_arg(args.seeds, tuple(range(5)))
    rows = run_suite(names, seeds, args.max_elements or None)
    print(format_rows(rows))
    failed = sorted({r.name for r in rows if not r.ok})
    if failed:
        worst = {n: max(r.max_error for r in rows if r.name == n) for n in failed}
        raise NumericError(f"gradient check failed for {', '.join(failed)}", {"max_error": worst})
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("gradcheck", help="finite-difference gradient checks, 64-bit")
    which = p.add_mutually_exclusive_group()
    which.add_argument("--all", action="store_true", help="every registered layer (default)")
    which.add_argument("--layer", action="append", help=f"one of: {', '.join(CASES)}; repeatable")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--max-elements", type=int, default=16, help="elements checked per tensor; 0 checks all")
    p.set_defaults(func=run)
