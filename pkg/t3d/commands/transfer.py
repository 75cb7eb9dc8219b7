# t3d/commands/transfer.py
from __future__ import annotations

import argparse
import logging
from pathlib import Path

import numpy as np

from t3d.architectures import build, resolve_arch
from t3d.checkpoint import save_checkpoint
from t3d.commands import add_common, emit, load_run, open_store
from t3d.config import run_dir, with_overrides
from t3d.data import make_pairs
from t3d.transfer import load_teacher, pretrain_teacher, save_teacher, transfer_train

logger = logging.getLogger(__name__)


def run(args: argparse.Namespace) -> int:
    cfg = load_run(args)
    tcfg = with_overrides(cfg.transfer.train, seed=cfg.train.seed, max_epochs=args.epochs)
    xcfg = with_overrides(cfg.transfer, num_pairs=args.pairs).model_copy(update={"train": tcfg})
    seed = tcfg.seed
    out = run_dir(args.out, "transfer", seed)
    store = open_store(args, cfg.data)

    teacher_path = Path(args.teacher_checkpoint) if args.teacher_checkpoint else out / "teacher.ckpt"
    if teacher_path.is_file():
        teacher = load_teacher(teacher_path)
        logger.info("teacher loaded from %s", teacher_path)
    else:
        teacher, _ = pretrain_teacher(store, cfg.sampler, xcfg, seed=seed, out_dir=out)
        save_teacher(teacher, teacher_path)
        logger.info("teacher pre-trained and saved to %s", teacher_path)

    X = xcfg.frames or cfg.sampler.clip_len
    rng = np.random.default_rng(seed)
    pairs = make_pairs(store, X, rng, xcfg.num_pairs, cfg.sampler, split="train")
    eval_pairs = None
    if len(store.ids("val")) >= 2:
        eval_pairs = make_pairs(store, X, rng, xcfg.eval_pairs, cfg.sampler, split="val")

    spec = resolve_arch(cfg.arch, args.arch)
    student = build(spec, seed=seed)
    result = transfer_train(teacher, student, pairs, xcfg, eval_pairs, out_dir=out, max_steps=args.steps)

    student_path = Path(args.out_student) if args.out_student else out / "student.ckpt"
    save_checkpoint(result.student, student_path, {"init": "transfer", "steps": result.steps, "seed": seed})
    final = result.history.final("val") or result.history.final("train")
    emit(
        {
            "out": str(out),
            "student": str(student_path),
            "teacher": str(teacher_path),
            "steps": result.steps,
            "pair_accuracy": None if final is None else final.accuracy,
            "split": None if final is None else final.split,
        }
    )
    return 0


def register(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("transfer", help="train a 3D student against a frozen per-frame teacher")
    add_common(p)
    p.add_argument("--teacher-checkpoint", help="teacher to load; pre-trained on frames and saved here if missing")
    p.add_argument("--pairs", type=int, help="number of training pairs (overrides [transfer].num_pairs)")
    p.add_argument("--out-student", help="student checkpoint path (default <out>/student.ckpt)")
    p.add_argument("--arch", help="student preset or architecture file")
    p.add_argument("--epochs", type=int, help="overrides [transfer.train].max_epochs")
    p.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=run)
