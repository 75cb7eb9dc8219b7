# t3d/training.py
from __future__ import annotations

import csv
import logging
import queue
import sys
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Generator, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from t3d.architectures import build
from t3d.autograd import Node, NodeGraph, backward
from t3d.checkpoint import save_checkpoint
from t3d.common import NumericError, SpecError
from t3d.data import VideoStore, iter_batches
from t3d.inference import evaluate
from t3d.models.layers import Parameter
from t3d.models.network import Network3D
from t3d.schemas import SamplerConfig, TrainConfig

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "loss", "accuracy", "lr")
PREFETCH_THREAD = "t3d-prefetch"


# -----------------------------
# optimizer
# -----------------------------
@dataclass
class SGDState:
    velocity: List[np.ndarray]

    @classmethod
    def zeros(cls, params: Sequence[Parameter]) -> "SGDState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: SGDState,
    cfg: TrainConfig,
    lr: float,
) -> None:
    """
    In place, with g' = g + wd * w for decayed weights:
        v <- mu * v + g'
        w <- w - lr * (g' + mu * v)     (Nesterov)
        w <- w - lr * v                 (plain momentum)
    Every gradient is checked before any parameter moves.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise SpecError(
            "params, grads and optimizer state disagree in length",
            {"params": len(params), "grads": len(grads), "state": len(state.velocity)},
        )
    for p, g in zip(params, grads):
        if g.shape != p.data.shape:
            raise SpecError(f"{p.name}: gradient shape {g.shape} vs parameter {p.data.shape}", {"param": p.name})
        if not np.all(np.isfinite(g)):
            raise NumericError(
                f"non-finite gradient for {p.name or 'parameter'}",
                {"param": p.name, "nonfinite": int((~np.isfinite(g)).sum())},
            )

    mu = cfg.momentum
    for p, g, v in zip(params, grads, state.velocity):
        if not p.requires_grad:
            continue
        gd = g + cfg.weight_decay * p.data if (p.decay and cfg.weight_decay) else g
        v *= mu
        v += gd
        update = gd + mu * v if cfg.nesterov else v
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def apply_gradients(
    g: NodeGraph,
    loss: Node,
    params: Sequence[Parameter],
    state: SGDState,
    cfg: TrainConfig,
    lr: float,
) -> float:
    """Backward from `loss`, then one sgd_step; returns the loss value."""
    value = float(loss.value.reshape(-1)[0])
    if not np.isfinite(value):
        raise NumericError("loss is not finite", {"loss": value})
    backward(g, loss)
    sgd_step(params, [g.grad_of(p) for p in params], state, cfg, lr)
    return value


# -----------------------------
# schedules
# -----------------------------
class StepEvery:
    """lr0 * factor ** (epoch // every)."""

    def __init__(self, lr0: float, every: int, factor: float = 0.1):
        self.lr0 = lr0
        self.every = every
        self.factor = factor

    def lr(self, epoch: int) -> float:
        return self.lr0 * self.factor ** (epoch // self.every)

    def observe(self, val_loss: float) -> None:
        pass


class Plateau:
    """Multiply by `factor` after `patience` epochs without an improvement larger than `threshold`."""

    def __init__(self, lr0: float, patience: int, factor: float = 0.1, threshold: float = 1e-4):
        self.current = lr0
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = float("inf")
        self.bad_epochs = 0

    def lr(self, epoch: int) -> float:
        return self.current

    def observe(self, val_loss: float) -> None:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.current *= self.factor
            self.bad_epochs = 0
            logger.info("plateau: lr -> %.3g", self.current)


def make_schedule(cfg: TrainConfig) -> Union[StepEvery, Plateau]:
    if cfg.schedule == "plateau":
        return Plateau(cfg.lr0, cfg.patience, cfg.lr_factor, cfg.plateau_threshold)
    return StepEvery(cfg.lr0, cfg.step_epochs, cfg.lr_factor)


# -----------------------------
# history
# -----------------------------
@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    init: str = "scratch"
    best_epoch: Optional[int] = None
    best_accuracy: float = -1.0
    checkpoint: Optional[Path] = None

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    def split(self, name: str) -> List[EpochRecord]:
        return [r for r in self.records if r.split == name]

    def final(self, name: str) -> Optional[EpochRecord]:
        rows = self.split(name)
        return rows[-1] if rows else None

    def write_csv(self, path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            w.writeheader()
            for r in self.records:
                row = asdict(r)
                row["loss"] = f"{r.loss:.6f}"
                row["accuracy"] = f"{r.accuracy:.6f}"
                row["lr"] = f"{r.lr:.6g}"
                w.writerow(row)
        return out


def progress(iterable: Iterable[Any], quiet: bool, **kwargs: Any) -> Any:
    return tqdm(iterable, disable=quiet or not sys.stderr.isatty(), leave=False, **kwargs)


def prefetched(source: Iterator[Any], depth: int, poll: float = 0.1) -> Generator[Any, None, None]:
    """
    Run `source` in a producer thread feeding a bounded queue; depth 0
    iterates inline. Closing the generator early stops the producer and
    drops whatever it had queued.
    """
    if depth <= 0:
        yield from source
        return
    q: "queue.Queue[Any]" = queue.Queue(maxsize=depth)
    stop = threading.Event()
    done = object()

    def put(item: Any) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=poll)
                return True
            except queue.Full:
                continue
        return False

    def produce() -> None:
        try:
            for item in source:
                if not put(item):
                    return
        except BaseException as e:  # re-raised in the consumer
            put(e)
        put(done)

    t = threading.Thread(target=produce, name=PREFETCH_THREAD, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        while True:
            try:
                q.get_nowait()
            except queue.Empty:
                break
        t.join()


# -----------------------------
# supervised loop
# -----------------------------
def train(
    model: Network3D,
    store: VideoStore,
    cfg: TrainConfig,
    sampler: SamplerConfig,
    out_dir: Optional[Union[str, Path]] = None,
    init: str = "scratch",
) -> History:
    """
    Mini-batch SGD on the train split, video-level validation after every
    epoch. With `out_dir`: metrics.csv, best.ckpt (best val accuracy) and,
    on divergence, last_good.ckpt before NumericError is raised.
    """
    if model.num_classes != store.num_classes:
        raise SpecError(
            f"model predicts {model.num_classes} classes, dataset has {store.num_classes}",
            {"model": model.num_classes, "dataset": store.num_classes},
        )
    out = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    schedule = make_schedule(cfg)
    params = model.parameters()
    state = SGDState.zeros(params)
    history = History(init=init)
    has_val = bool(store.ids("val"))
    last_good = model.state_dict()

    epochs = progress(range(cfg.max_epochs), cfg.quiet, desc=f"train {model.spec.name}", unit="epoch")
    for epoch in epochs:
        lr = schedule.lr(epoch)
        model.train()
        loss_sum = 0.0
        correct = seen = 0
        batches = prefetched(iter_batches(store, "train", sampler, cfg.batch_size, rng), cfg.prefetch)
        for step, batch in enumerate(batches):
            g = NodeGraph()
            logits = model(g, g.leaf(batch.clips.astype(model.dtype, copy=False)))
            loss = g.softmax_cross_entropy(logits, batch.labels)
            try:
                value = apply_gradients(g, loss, params, state, cfg, lr)
            except NumericError as e:
                batches.close()
                model.load_state_dict(last_good)
                if out is not None:
                    save_checkpoint(model, out / "last_good.ckpt", {"epoch": epoch - 1, "init": init})
                    history.write_csv(out / "metrics.csv")
                e.detail.update({"epoch": epoch, "step": step})
                logger.error("diverged at epoch %d step %d: %s", epoch, step, e.msg)
                raise
            n = batch.labels.size
            loss_sum += value * n
            correct += int((logits.value.argmax(axis=1) == batch.labels).sum())
            seen += n
        history.add(EpochRecord(epoch, "train", loss_sum / max(seen, 1), correct / max(seen, 1), lr))
        watched = loss_sum / max(seen, 1)

        if has_val:
            result = evaluate(model, store, sampler, split="val")
            history.add(EpochRecord(epoch, "val", result.loss, result.accuracy, lr))
            watched = result.loss
            if result.accuracy > history.best_accuracy:
                history.best_accuracy = result.accuracy
                history.best_epoch = epoch
                if out is not None:
                    history.checkpoint = save_checkpoint(
                        model, out / "best.ckpt", {"epoch": epoch, "val_accuracy": result.accuracy, "init": init}
                    )
        schedule.observe(watched)
        last_good = model.state_dict()

        tr = history.records[-2] if has_val else history.records[-1]
        va = history.final("val")
        logger.info(
            "epoch %d lr %.3g train loss %.4f acc %.3f%s",
            epoch,
            lr,
            tr.loss,
            tr.accuracy,
            f" val loss {va.loss:.4f} acc {va.accuracy:.3f}" if has_val and va else "",
        )
        if out is not None:
            history.write_csv(out / "metrics.csv")

    if out is not None:
        history.write_csv(out / "metrics.csv")
        save_checkpoint(model, out / "last.ckpt", {"epoch": cfg.max_epochs - 1, "init": init})
    return history


# -----------------------------
# architecture comparison
# -----------------------------
def compare_architectures(
    runs: Dict[str, Any],
    store: VideoStore,
    cfg: TrainConfig,
    sampler: SamplerConfig,
    seeds: Sequence[int],
    out_dir: Optional[Union[str, Path]] = None,
) -> List[Dict[str, Any]]:
    """
    Train every (arch name -> ArchSpec) for every seed on one store.
    Returns one summary row per run plus a mean row per architecture.
    """
    out = Path(out_dir) if out_dir is not None else None
    rows: List[Dict[str, Any]] = []
    for name, spec in runs.items():
        finals = []
        for seed in seeds:
            model = build(spec.model_copy(update={"num_classes": store.num_classes}), seed=seed)
            run_cfg = cfg.model_copy(update={"seed": seed})
            hist = train(model, store, run_cfg, sampler, out / f"{name}-seed{seed}" if out else None)
            final = hist.final("val") or hist.final("train")
            acc = final.accuracy if final else 0.0
            finals.append(acc)
            rows.append({"arch": name, "seed": seed, "final_val_accuracy": acc, "best_val_accuracy": hist.best_accuracy})
        rows.append(
            {"arch": name, "seed": "mean", "final_val_accuracy": float(np.mean(finals)), "best_val_accuracy": ""}
        )
        logger.info("%s: mean final val accuracy %.3f over %d seeds", name, float(np.mean(finals)), len(seeds))

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with (out / "summary.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["arch", "seed", "final_val_accuracy", "best_val_accuracy"])
            w.writeheader()
            w.writerows(rows)
    return rows
