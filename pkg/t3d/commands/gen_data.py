# t3d/commands/gen_data.py
from __future__ import annotations

import argparse
import logging

from t3d.commands import emit, load_run
from t3d.config import with_overrides
from t3d.data import default_store_root, generate_dataset

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = load_run(args)
    spec = with_overrides(cfg.data, count=args.count, seed=args.seed)
    root = args.out or default_store_root(spec, spec.count)
    store = generate_dataset(spec, root=root)
    emit(
        {
            "root": str(store.root),
            "videos": len(store),
            "train": len(store.ids("train")),
            "val": len(store.ids("val")),
            "classes": store.class_names,
        }
    )
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("gen-data", help="render the synthetic moving-object dataset")
    p.add_argument("--config")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--count", type=int, help="number of videos (overrides [data].count)")
    p.add_argument("--seed", type=int, help="dataset seed (overrides [data].seed)")
    p.set_defaults(func=run)
