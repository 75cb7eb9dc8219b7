# t3d/commands/evaluate.py
from __future__ import annotations

import argparse
import logging

from t3d.checkpoint import load_checkpoint
from t3d.commands import emit, load_run, open_store
from t3d.common import SpecError
from t3d.inference import evaluate

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = load_run(args)
    model = load_checkpoint(args.checkpoint)
    store = open_store(args, cfg.data)
    if model.num_classes != store.num_classes:
        raise SpecError(
            f"model predicts {model.num_classes} classes, dataset has {store.num_classes}",
            {"model": model.num_classes, "dataset": store.num_classes},
        )
    split = None if args.split == "all" else args.split
    result = evaluate(model, store, cfg.sampler, split=split, workers=args.workers)
    emit({"accuracy": result.accuracy, "loss": result.loss, "videos": result.count, "split": args.split})
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="video-level accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (generated from [data] if missing)")
    p.add_argument("--split", choices=["train", "val", "all"], default="val")
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1, help="videos evaluated concurrently")
    p.set_defaults(func=run)
