# t3d/inference.py
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from t3d.data import Video, VideoStore, sample_clip
from t3d.models.network import Network3D
from t3d.schemas import SamplerConfig

logger = logging.getLogger(__name__)


@dataclass
class VideoPrediction:
    clip_probs: np.ndarray  # (clips, classes)
    probs: np.ndarray  # mean over clips
    label: int
    num_clips: int

    @classmethod
    def from_clip_probs(cls, clip_probs: np.ndarray) -> "VideoPrediction":
        clip_probs = np.asarray(clip_probs, dtype=np.float64)
        probs = clip_probs.mean(axis=0)
        return cls(clip_probs=clip_probs, probs=probs, label=int(probs.argmax()), num_clips=int(clip_probs.shape[0]))


def predict_video(model: Network3D, video: Video, cfg: SamplerConfig) -> VideoPrediction:
    """Softmax on every non-overlapping centre-cropped clip, averaged in probability space."""
    was_training = model.training
    model.eval()
    try:
        batch = np.stack([c.data for c in sample_clip(video, cfg, "test")])
        return VideoPrediction.from_clip_probs(model.predict_proba(batch))
    finally:
        model.train(was_training)


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    predictions: List[VideoPrediction] = field(default_factory=list)
    labels: Optional[np.ndarray] = None

    @property
    def count(self) -> int:
        return len(self.predictions)


def evaluate(
    model: Network3D,
    store: VideoStore,
    cfg: SamplerConfig,
    split: Optional[str] = "val",
    workers: int = 1,
) -> EvalResult:
    """
    Video-level cross-entropy and accuracy over a split. workers > 1 runs
    videos on a thread pool; results come back in split order either way.
    """
    ids = store.ids(split)
    labels = store.labels(ids)
    if not ids:
        return EvalResult(loss=float("nan"), accuracy=float("nan"), labels=labels)

    was_training = model.training
    model.eval()
    try:
        videos: Sequence[Video] = [store.load(i) for i in ids]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(lambda v: predict_video(model, v, cfg), videos))
        else:
            preds = [predict_video(model, v, cfg) for v in videos]
    finally:
        model.train(was_training)

    probs = np.stack([p.probs for p in preds])
    picked = np.clip(probs[np.arange(len(ids)), labels], 1e-12, None)
    loss = float(-np.log(picked).mean())
    accuracy = float((probs.argmax(axis=1) == labels).mean())
    logger.debug("evaluated %d videos on %s: loss %.4f acc %.3f", len(ids), split, loss, accuracy)
    return EvalResult(loss=loss, accuracy=accuracy, predictions=preds, labels=labels)
