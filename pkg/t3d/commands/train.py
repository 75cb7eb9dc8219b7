# t3d/commands/train.py
from __future__ import annotations

import argparse
import logging

from t3d.architectures import BASELINES, build, get_preset, resolve_arch
from t3d.commands import add_common, emit, load_run, open_store, seeds_arg
from t3d.common import ConfigError
from t3d.config import run_dir, with_overrides
from t3d.training import compare_architectures, train

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = load_run(args)
    tcfg = with_overrides(cfg.train, schedule=args.schedule, max_epochs=args.epochs)
    sampler = with_overrides(cfg.sampler, stride=args.stride)
    out = run_dir(args.out, "ablation" if args.ablation else "train", tcfg.seed)

    if args.ablation:
        name = args.arch or cfg.arch.preset
        if name not in BASELINES:
            raise ConfigError(f"no transition-only baseline for {name!r}", {"known": sorted(BASELINES)})
        # speed-only variant: one direction, so only temporal evidence separates the classes
        store = open_store(args, with_overrides(cfg.data, directions=["right"]))
        runs = {name: get_preset(name), BASELINES[name]: get_preset(BASELINES[name])}
        rows = compare_architectures(runs, store, tcfg, sampler, seeds_arg(args.seeds, (0, 1, 2)), out)
        emit({"out": str(out), "summary": [r for r in rows if r["seed"] == "mean"]})
        return 0

    store = open_store(args, cfg.data)
    spec = resolve_arch(cfg.arch, args.arch)
    if cfg.arch.num_classes is None:
        spec = spec.model_copy(update={"num_classes": store.num_classes})
    model = build(spec, seed=tcfg.seed)
    history = train(model, store, tcfg, sampler, out)
    final = history.final("val") or history.final("train")
    emit(
        {
            "out": str(out),
            "arch": spec.name,
            "epochs": tcfg.max_epochs,
            "final": None if final is None else {"split": final.split, "loss": final.loss, "accuracy": final.accuracy},
            "best_val_accuracy": history.best_accuracy if history.best_epoch is not None else None,
        }
    )
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="train a network from scratch on the synthetic store")
    add_common(p)
    p.add_argument("--arch", help="preset name or architecture file (overrides [arch])")
    p.add_argument("--schedule", choices=["step", "plateau"])
    p.add_argument("--epochs", type=int, help="overrides [train].max_epochs")
    p.add_argument("--stride", type=int, help="temporal sampling stride (overrides [sampler].stride)")
    p.add_argument("--ablation", action="store_true", help="TTL vs plain transitions on the speed-only variant")
    p.add_argument("--seeds", help="comma-separated seeds for --ablation (default 0,1,2)")
    p.set_defaults(func=run)
