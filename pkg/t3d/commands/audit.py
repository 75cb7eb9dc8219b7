# t3d/commands/audit.py
from __future__ import annotations

import argparse

from t3d.architectures import BASELINES, audit, get_preset, parameter_ratio, parse_shape, resolve_arch, with_input
from t3d.common import ConfigError
from t3d.schemas import ArchChoice


def run(args: argparse.Namespace) -> int:
    spec = resolve_arch(ArchChoice(num_classes=args.classes), args.arch)
    if args.input:
        spec = with_input(spec, parse_shape(args.input))
    spec.check()
    report = audit(spec)
    print(report.table())

    if args.compare:
        name = args.compare if args.compare != "auto" else BASELINES.get(args.arch)
        if name is None:
            raise ConfigError(f"no baseline registered for {args.arch!r}", {"known": sorted(BASELINES)})
        base = get_preset(name).model_copy(update={"input_shape": spec.input_shape, "num_classes": spec.num_classes})
        ratio = parameter_ratio(spec, base)
        print(f"\nparams {spec.name} / {base.name}: {report.params:,} / {audit(base).params:,} = {ratio:.3f}")
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("audit", help="per-stage output shapes, parameter and MAC counts")
    p.add_argument("--arch", default="t3d-121", help="preset name or architecture file")
    p.add_argument("--input", help="c x t x h x w, e.g. 3x16x224x224")
    p.add_argument("--classes", type=int, help="classifier width")
    p.add_argument(
        "--compare",
        nargs="?",
        const="auto",
        help="report the parameter ratio against a baseline (default: the arch's plain-transition twin)",
    )
    p.set_defaults(func=run)
