# t3d/commands/__init__.py
"""
One module per subcommand. Each exposes `register(subparsers)`, which adds
its parser and sets `func`, the way routers are included into an app.
"""
from __future__ import annotations

import argparse
import json
from typing import Any, Dict, Optional, Tuple

from t3d.common import ConfigError
from t3d.config import load_config, with_overrides
from t3d.data import VideoStore, ensure_store
from t3d.schemas import RunConfig, SyntheticVideoSpec


def add_common(p: argparse.ArgumentParser, data: bool = True, seed: bool = True, out: bool = True) -> None:
    p.add_argument("--config", help="TOML run config; defaults apply when omitted")
    if data:
        p.add_argument("--data", help="dataset directory (generated from [data] if missing)")
    if seed:
        p.add_argument("--seed", type=int, help="overrides [train].seed")
    if out:
        p.add_argument("--out", help="output directory (default: $T3D_RUNS_DIR/<command>/seed<N>)")


def load_run(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.model_copy(update={"train": with_overrides(cfg.train, seed=seed)})
    return cfg


def open_store(args: argparse.Namespace, spec: SyntheticVideoSpec) -> VideoStore:
    return ensure_store(spec, getattr(args, "data", None))


def emit(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, sort_keys=True, default=str))


def seeds_arg(text: Optional[str], default: Tuple[int, ...]) -> Tuple[int, ...]:
    if not text:
        return default
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}")
