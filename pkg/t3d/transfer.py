# t3d/transfer.py
"""
Transfer from a frozen per-frame network to a 3D student.

The teacher embeds X frames one at a time and averages the embeddings;
the student embeds the clip. A small head classifies whether frames and
clip come from the same video at the same timestamp. Only the student
and the head receive gradients.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from t3d import kernels as K
from t3d.architectures import get_preset
from t3d.autograd import Node, NodeGraph
from t3d.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from t3d.common import InvariantError, SpecError
from t3d.data import PairBatch, VideoStore, render_clip
from t3d.models.layers import Linear, Module
from t3d.models.network import Network3D
from t3d.schemas import SamplerConfig, TrainConfig, TransferConfig
from t3d.training import (
    EpochRecord,
    History,
    SGDState,
    apply_gradients,
    make_schedule,
    progress,
    train,
)

logger = logging.getLogger(__name__)


# -----------------------------
# models
# -----------------------------
class FrameEncoder2D(Module):
    """Spatial-only dense network plus a projection to the shared embedding width."""

    def __init__(self, net: Network3D, embed_dim: int, proj_seed: int = 0):
        if not net.spec.spatial_only:
            raise SpecError(f"{net.spec.name} is not a per-frame network", {"arch": net.spec.name})
        self.net = net
        self.proj_seed = proj_seed
        self.proj = Linear(net.feature_dim, embed_dim, np.random.default_rng(proj_seed), net.dtype)

    @property
    def embed_dim(self) -> int:
        return self.proj.out_features

    def __call__(self, g: NodeGraph, frames: Node) -> Node:
        """(m, 3, 1, h, w) single frames -> (m, embed_dim)."""
        return self.proj(g, self.net.features(g, frames))


class TransferHead(Module):
    """Student projection, then concat(teacher, student) -> fc1 -> fc2 -> 2-way logits."""

    def __init__(
        self,
        student_dim: int,
        embed_dim: int,
        fc_sizes: Tuple[int, int],
        rng: np.random.Generator,
        dtype: Any = K.FLOAT,
    ):
        self.student_proj = Linear(student_dim, embed_dim, rng, dtype)
        self.fc1 = Linear(2 * embed_dim, fc_sizes[0], rng, dtype)
        self.fc2 = Linear(fc_sizes[0], fc_sizes[1], rng, dtype)
        self.classifier = Linear(fc_sizes[1], 2, rng, dtype)

    def __call__(self, g: NodeGraph, teacher_emb: Node, student_feat: Node) -> Node:
        x = g.concat_features([teacher_emb, self.student_proj(g, student_feat)])
        x = g.relu(self.fc1(g, x))
        x = g.relu(self.fc2(g, x))
        return self.classifier(g, x)


def frames_to_batch(frames: np.ndarray) -> np.ndarray:
    """(n, 3, X, h, w) -> (n * X, 3, 1, h, w), frames of one sample consecutive."""
    n, c, x, h, w = frames.shape
    return np.ascontiguousarray(frames.transpose(0, 2, 1, 3, 4).reshape(n * x, c, 1, h, w))


def embed_frames(g: NodeGraph, teacher: FrameEncoder2D, frames: np.ndarray) -> Node:
    n, _, x, _, _ = frames.shape
    per_frame = teacher(g, g.leaf(frames_to_batch(frames).astype(teacher.net.dtype, copy=False)))
    return g.group_mean(per_frame, x)


def teacher_embed(frames: np.ndarray, teacher: FrameEncoder2D) -> np.ndarray:
    """Mean of per-frame embeddings; (n, 3, X, h, w) -> (n, embed_dim), or (3, X, h, w) -> (embed_dim,)."""
    single = frames.ndim == 4
    batch = frames[None] if single else frames
    was_training = teacher.training
    teacher.eval()
    try:
        out = embed_frames(NodeGraph(), teacher, batch).value
    finally:
        teacher.train(was_training)
    return out[0] if single else out


def save_teacher(teacher: FrameEncoder2D, path: Union[str, Path]) -> Path:
    """The network goes in the checkpoint; the projection is rebuilt from its seed."""
    return save_checkpoint(
        teacher.net, path, {"role": "teacher", "embed_dim": teacher.embed_dim, "proj_seed": teacher.proj_seed}
    )


def load_teacher(path: Union[str, Path]) -> FrameEncoder2D:
    _, meta, _ = read_checkpoint(path)
    if meta.get("role") != "teacher":
        raise SpecError(f"{path} is not a teacher checkpoint", {"meta": meta})
    teacher = FrameEncoder2D(load_checkpoint(path), int(meta["embed_dim"]), int(meta["proj_seed"]))
    return teacher.freeze().eval()  # type: ignore[return-value]


def parameter_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, arr in module.named_tensors():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -----------------------------
# teacher pre-training on single frames
# -----------------------------
def build_teacher(cfg: TransferConfig, crop_size: int, seed: int = 0) -> FrameEncoder2D:
    spec = get_preset(cfg.teacher_arch).model_copy(update={"input_shape": (3, 1, crop_size, crop_size)})
    net = Network3D(spec, np.random.default_rng(seed))
    return FrameEncoder2D(net, cfg.embed_dim, proj_seed=seed)


def pretrain_teacher(
    store: VideoStore,
    sampler: SamplerConfig,
    cfg: TransferConfig,
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[FrameEncoder2D, History]:
    """
    Train the per-frame network to name the quadrant holding the object,
    a label any single frame decides. Returns the encoder frozen, in eval mode.
    """
    teacher = build_teacher(cfg, sampler.crop_size, seed)
    net = teacher.net
    if net.num_classes != 4:
        net.reset_classifier(4, np.random.default_rng(seed + 1))
    tcfg = cfg.train.model_copy(update={"max_epochs": cfg.teacher_epochs, "seed": seed})
    rng = np.random.default_rng(seed)
    schedule = make_schedule(tcfg)
    params = net.parameters()
    state = SGDState.zeros(params)
    history = History(init="frames")
    ids = store.ids("train")

    for epoch in progress(range(tcfg.max_epochs), tcfg.quiet, desc="teacher", unit="epoch"):
        lr = schedule.lr(epoch)
        net.train()
        loss_sum, correct, seen = 0.0, 0, 0
        order = rng.permutation(len(ids))
        for lo in range(0, len(ids), tcfg.batch_size):
            frames, labels = [], []
            for i in order[lo : lo + tcfg.batch_size]:
                video = store.load(ids[int(i)])
                f = int(rng.integers(0, video.num_frames))
                frames.append(render_clip(video, np.asarray([f]), sampler))
                labels.append(video.quadrant(f))
            y = np.asarray(labels, dtype=np.int64)
            g = NodeGraph()
            logits = net(g, g.leaf(np.stack(frames)))
            value = apply_gradients(g, g.softmax_cross_entropy(logits, y), params, state, tcfg, lr)
            loss_sum += value * y.size
            correct += int((logits.value.argmax(axis=1) == y).sum())
            seen += y.size
        history.add(EpochRecord(epoch, "train", loss_sum / max(seen, 1), correct / max(seen, 1), lr))
        schedule.observe(loss_sum / max(seen, 1))
        logger.info("teacher epoch %d loss %.4f quadrant acc %.3f", epoch, loss_sum / max(seen, 1), correct / max(seen, 1))

    if out_dir is not None:
        history.write_csv(Path(out_dir) / "teacher_metrics.csv")
    teacher.freeze().eval()
    return teacher, history


# -----------------------------
# transfer
# -----------------------------
@dataclass
class TransferResult:
    student: Network3D
    head: TransferHead
    history: History
    steps: int


def pair_logits(
    g: NodeGraph,
    teacher: FrameEncoder2D,
    student: Network3D,
    head: TransferHead,
    frames: np.ndarray,
    clips: np.ndarray,
) -> Node:
    t = embed_frames(g, teacher, frames)
    s = student.features(g, g.leaf(clips.astype(student.dtype, copy=False)))
    return head(g, t, s)


def pair_accuracy(
    teacher: FrameEncoder2D,
    student: Network3D,
    head: TransferHead,
    pairs: PairBatch,
    batch_size: int = 32,
) -> Tuple[float, float]:
    """(loss, accuracy) of the correspondence head, everything in eval mode."""
    modes = [m.training for m in (student, head)]
    student.eval()
    head.eval()
    teacher.eval()
    loss_sum, correct = 0.0, 0
    try:
        for lo in range(0, len(pairs), batch_size):
            sel = list(range(lo, min(lo + batch_size, len(pairs))))
            frames, clips, labels = pairs.arrays(sel)
            g = NodeGraph()
            logits = pair_logits(g, teacher, student, head, frames, clips)
            loss = g.softmax_cross_entropy(logits, labels)
            loss_sum += float(loss.value.reshape(-1)[0]) * len(sel)
            correct += int((logits.value.argmax(axis=1) == labels).sum())
    finally:
        student.train(modes[0])
        head.train(modes[1])
    return loss_sum / len(pairs), correct / len(pairs)


def transfer_train(
    teacher: FrameEncoder2D,
    student: Network3D,
    pairs: PairBatch,
    cfg: TransferConfig,
    eval_pairs: Optional[PairBatch] = None,
    out_dir: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    head: Optional[TransferHead] = None,
) -> TransferResult:
    """
    Train student and head on correspondence labels with 2-way cross
    entropy. The teacher is frozen first; its parameters are hashed before
    and after, and any change raises InvariantError.
    """
    tcfg = cfg.train
    teacher.freeze().eval()
    before = parameter_digest(teacher)

    rng = np.random.default_rng(tcfg.seed)
    if head is None:
        head = TransferHead(student.feature_dim, teacher.embed_dim, cfg.fc_sizes, rng, student.dtype)
    params = student.parameters() + head.parameters()
    state = SGDState.zeros(params)
    schedule = make_schedule(tcfg)
    history = History(init="transfer")
    steps = 0
    out = Path(out_dir) if out_dir is not None else None

    for epoch in progress(range(tcfg.max_epochs), tcfg.quiet, desc="transfer", unit="epoch"):
        lr = schedule.lr(epoch)
        student.train()
        head.train()
        loss_sum, correct, seen = 0.0, 0, 0
        order = rng.permutation(len(pairs))
        for lo in range(0, len(pairs), tcfg.batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            sel = [int(i) for i in order[lo : lo + tcfg.batch_size]]
            frames, clips, labels = pairs.arrays(sel)
            g = NodeGraph()
            logits = pair_logits(g, teacher, student, head, frames, clips)
            value = apply_gradients(g, g.softmax_cross_entropy(logits, labels), params, state, tcfg, lr)
            loss_sum += value * len(sel)
            correct += int((logits.value.argmax(axis=1) == labels).sum())
            seen += len(sel)
            steps += 1
        if seen:
            history.add(EpochRecord(epoch, "train", loss_sum / seen, correct / seen, lr))
        watched = loss_sum / max(seen, 1)
        if eval_pairs is not None:
            vloss, vacc = pair_accuracy(teacher, student, head, eval_pairs, tcfg.batch_size)
            history.add(EpochRecord(epoch, "val", vloss, vacc, lr))
            history.best_accuracy = max(history.best_accuracy, vacc)
            watched = vloss
        schedule.observe(watched)
        last = history.records[-1] if history.records else None
        if last is not None:
            logger.info("transfer epoch %d step %d %s pair acc %.3f", epoch, steps, last.split, last.accuracy)
        if out is not None:
            history.write_csv(out / "pair_accuracy.csv")
        if max_steps is not None and steps >= max_steps:
            break

    after = parameter_digest(teacher)
    if after != before:
        raise InvariantError("teacher parameters changed during transfer", {"before": before, "after": after})
    return TransferResult(student=student, head=head, history=history, steps=steps)


# -----------------------------
# fine-tuning
# -----------------------------
def finetune(
    student: Network3D,
    store: VideoStore,
    cfg: TrainConfig,
    sampler: SamplerConfig,
    num_classes: Optional[int] = None,
    init: str = "transfer",
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[Network3D, History]:
    """
    Attach a fresh `num_classes` head and train on the labeled store.
    Zero epochs returns the model untouched.
    """
    n = store.num_classes if num_classes is None else num_classes
    if n != store.num_classes:
        raise SpecError(
            f"head has {n} classes, dataset has {store.num_classes}",
            {"head": n, "dataset": store.num_classes},
        )
    if cfg.max_epochs == 0:
        return student, History(init=init)
    student.reset_classifier(n, np.random.default_rng(cfg.seed))
    history = train(student, store, cfg, sampler, out_dir, init=init)
    return student, history


def write_comparison(histories: Dict[str, History], path: Union[str, Path]) -> Path:
    """One row per (init, epoch, split) so both arms can be plotted together."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["init", "epoch", "split", "loss", "accuracy", "lr"])
        for init, hist in histories.items():
            for r in hist.records:
                w.writerow([init, r.epoch, r.split, f"{r.loss:.6f}", f"{r.accuracy:.6f}", f"{r.lr:.6g}"])
    return out


def summarize(histories: Dict[str, History]) -> List[Dict[str, Any]]:
    rows = []
    for init, hist in histories.items():
        final = hist.final("val") or hist.final("train")
        rows.append({"init": init, "final_accuracy": final.accuracy if final else float("nan"), "best": hist.best_accuracy})
    return rows
