# t3d/commands/finetune.py
from __future__ import annotations

import argparse
import logging

from t3d.architectures import build, resolve_arch
from t3d.checkpoint import load_checkpoint
from t3d.commands import add_common, emit, load_run, open_store
from t3d.config import run_dir, with_overrides
from t3d.transfer import finetune, summarize, write_comparison

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = load_run(args)
    tcfg = with_overrides(cfg.train, max_epochs=args.epochs)
    out = run_dir(args.out, "finetune", tcfg.seed)
    store = open_store(args, cfg.data)

    if args.checkpoint:
        student = load_checkpoint(args.checkpoint)
        init = "transfer"
    else:
        student = build(resolve_arch(cfg.arch, args.arch), seed=tcfg.seed)
        init = "scratch"
    spec = student.spec.model_copy(deep=True)

    histories = {}
    _, histories[init] = finetune(student, store, tcfg, cfg.sampler, init=init, out_dir=out / init)
    if args.compare_scratch and init != "scratch":
        scratch = build(spec, seed=tcfg.seed)
        _, histories["scratch"] = finetune(scratch, store, tcfg, cfg.sampler, init="scratch", out_dir=out / "scratch")

    if len(histories) > 1:
        write_comparison(histories, out / "comparison.csv")
    emit({"out": str(out), "runs": summarize(histories)})
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("finetune", help="attach a classifier to a student and train it on labels")
    add_common(p)
    p.add_argument("--checkpoint", help="transferred student; omitted means a scratch-initialized network")
    p.add_argument("--arch", help="architecture for the scratch arm when no checkpoint is given")
    p.add_argument("--compare-scratch", action="store_true", help="also fine-tune a scratch network and compare")
    p.add_argument("--epochs", type=int, help="overrides [train].max_epochs")
    p.set_defaults(func=run)
