# t3d/data.py
"""
Synthetic motion videos, the on-disk video store, clip sampling and
correspondence pairs.

A video is one square moving on a torus: the frame at f is the first
frame rolled by `direction * speed * f` pixels. A fast video's frame f
equals a slow video's frame 2f, so speed is invisible in any single frame.

Store layout:

    <root>/manifest.json      spec, count, per-channel train means
    <root>/index.jsonl        one line per video: id, label, split, jitter fields
    <root>/videos/00000.t5    tensor file, shape (1, 3, T, H, W)
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from t3d import kernels as K
from t3d.common import CheckpointError, ConfigError, DimensionError, execute_or_fail
from t3d.schemas import SamplerConfig, SyntheticVideoSpec
from t3d.settings import get_settings

logger = logging.getLogger(__name__)

Mode = Literal["train", "test"]

# (dy, dx) per frame for one pixel of speed
DIRECTIONS: Dict[str, Tuple[int, int]] = {
    "up": (-1, 0),
    "down": (1, 0),
    "left": (0, -1),
    "right": (0, 1),
}

CROP_POSITIONS = ("top_left", "top_right", "bottom_left", "bottom_right", "center")

STORE_FORMAT = 1


# -----------------------------
# videos
# -----------------------------
@dataclass
class Video:
    id: int
    label: int
    frames: np.ndarray  # (3, T, H, W)
    origin: Tuple[int, int]
    color: Tuple[float, float, float]
    step: Tuple[int, int]  # (dy, dx) pixels per frame
    object_size: int
    means: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[1])

    def position(self, frame: int) -> Tuple[int, int]:
        """Top-left corner of the object at `frame` (toroidal)."""
        size = self.frames.shape[2:]
        return (
            (self.origin[0] + self.step[0] * frame) % size[0],
            (self.origin[1] + self.step[1] * frame) % size[1],
        )

    def quadrant(self, frame: int) -> int:
        """Which image quadrant holds the object's centre: 0 TL, 1 TR, 2 BL, 3 BR."""
        h, w = self.frames.shape[2:]
        y, x = self.position(frame)
        cy = (y + self.object_size // 2) % h
        cx = (x + self.object_size // 2) % w
        return 2 * int(cy >= h // 2) + int(cx >= w // 2)


def render_video(
    spec: SyntheticVideoSpec,
    label: int,
    origin: Tuple[int, int],
    color: Sequence[float],
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    direction, speed = spec.classes[label]
    dy, dx = DIRECTIONS[direction]
    v = spec.speed_pixels(speed)
    s = spec.frame_size

    first = np.zeros((3, s, s), dtype=K.FLOAT)
    patch = np.asarray(color, dtype=K.FLOAT).reshape(3, 1, 1)
    first[:, : spec.object_size, : spec.object_size] = patch
    first = np.roll(first, origin, axis=(1, 2))

    frames = np.stack(
        [np.roll(first, (dy * v * f, dx * v * f), axis=(1, 2)) for f in range(spec.num_frames)], axis=1
    )
    if spec.noise_std > 0:
        if rng is None:
            raise ValueError("noise needs an rng")
        frames = frames + rng.normal(0.0, spec.noise_std, frames.shape).astype(K.FLOAT)
    return frames


def _jitter(spec: SyntheticVideoSpec, video_id: int) -> Tuple[np.random.Generator, Tuple[int, int], Tuple[float, ...]]:
    rng = np.random.default_rng([spec.seed, video_id])
    origin = (int(rng.integers(0, spec.frame_size)), int(rng.integers(0, spec.frame_size)))
    color = tuple(float(c) for c in rng.uniform(0.5, 1.0, size=3))
    return rng, origin, color


def split_of(spec: SyntheticVideoSpec, count: int, video_id: int) -> str:
    """The last round(val_fraction * n_c) videos of each class are validation."""
    n_cls = len(spec.classes)
    label = video_id % n_cls
    per_class = len(range(label, count, n_cls))
    rank = video_id // n_cls
    n_val = int(round(spec.val_fraction * per_class))
    return "val" if rank >= per_class - n_val else "train"


# -----------------------------
# store
# -----------------------------
class VideoStore:
    def __init__(self, root: Path, spec: SyntheticVideoSpec, entries: List[Dict[str, Any]], means: np.ndarray):
        self.root = root
        self.spec = spec
        self.entries = entries
        self.means = means
        self._cache: Dict[int, Video] = {}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def num_classes(self) -> int:
        return len(self.spec.classes)

    @property
    def class_names(self) -> List[str]:
        return self.spec.class_names

    def ids(self, split: Optional[str] = None) -> List[int]:
        return [e["id"] for e in self.entries if split is None or e["split"] == split]

    def labels(self, ids: Sequence[int]) -> np.ndarray:
        return np.asarray([self.entries[i]["label"] for i in ids], dtype=np.int64)

    def load(self, video_id: int) -> Video:
        cached = self._cache.get(video_id)
        if cached is not None:
            return cached
        e = self.entries[video_id]
        path = self.root / e["file"]
        frames = execute_or_fail(lambda: K.load_tensor(path), f"cannot read video {video_id}")[0]
        dy, dx = DIRECTIONS[e["direction"]]
        v = self.spec.speed_pixels(e["speed"])
        video = Video(
            id=e["id"],
            label=e["label"],
            frames=frames,
            origin=tuple(e["origin"]),  # type: ignore[arg-type]
            color=tuple(e["color"]),  # type: ignore[arg-type]
            step=(dy * v, dx * v),
            object_size=self.spec.object_size,
            means=self.means,
        )
        self._cache[video_id] = video
        return video

    def videos(self, split: Optional[str] = None) -> Iterator[Video]:
        for i in self.ids(split):
            yield self.load(i)

    @classmethod
    def open(cls, root: Union[str, Path]) -> "VideoStore":
        root = Path(root)
        try:
            manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
            lines = (root / "index.jsonl").read_text(encoding="utf-8").splitlines()
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot open video store {root}", {"error": str(e)})
        if manifest.get("format") != STORE_FORMAT:
            raise CheckpointError(f"unsupported store format in {root}", {"format": manifest.get("format")})
        spec = SyntheticVideoSpec.model_validate(manifest["spec"])
        entries = [json.loads(line) for line in lines if line.strip()]
        return cls(root, spec, entries, np.asarray(manifest["means"], dtype=K.FLOAT))


def default_store_root(spec: SyntheticVideoSpec, count: int) -> Path:
    key = json.dumps({"spec": spec.model_dump(mode="json"), "count": count}, sort_keys=True)
    digest = hashlib.sha256(key.encode("utf-8")).hexdigest()[:12]
    return get_settings().runs_dir / "data" / digest


def generate_dataset(
    spec: SyntheticVideoSpec, count: Optional[int] = None, root: Optional[Union[str, Path]] = None
) -> VideoStore:
    """
    Write `count` videos (default `spec.count`), classes assigned round-robin.
    The same (spec, count) always produces the same bytes.
    """
    count = spec.count if count is None else count
    if count < 1:
        raise ConfigError("count must be >= 1", {"count": count})
    out = Path(root) if root is not None else default_store_root(spec, count)
    (out / "videos").mkdir(parents=True, exist_ok=True)

    n_cls = len(spec.classes)
    entries: List[Dict[str, Any]] = []
    total = np.zeros(3, dtype=np.float64)
    n_pix = 0
    for vid in range(count):
        label = vid % n_cls
        rng, origin, color = _jitter(spec, vid)
        frames = render_video(spec, label, origin, color, rng)
        rel = f"videos/{vid:05d}.t5"
        K.save_tensor(out / rel, frames[None])
        direction, speed = spec.classes[label]
        split = split_of(spec, count, vid)
        entries.append(
            {
                "id": vid,
                "label": label,
                "class": spec.class_names[label],
                "direction": direction,
                "speed": speed,
                "frames": spec.num_frames,
                "split": split,
                "origin": list(origin),
                "color": list(color),
                "file": rel,
            }
        )
        if split == "train":
            total += frames.sum(axis=(1, 2, 3), dtype=np.float64)
            n_pix += frames[0].size

    if n_pix == 0:
        means = np.zeros(3)
    else:
        means = total / n_pix

    with (out / "index.jsonl").open("w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    manifest = {
        "format": STORE_FORMAT,
        "spec": spec.model_dump(mode="json"),
        "count": count,
        "seed": spec.seed,
        "means": [float(m) for m in means],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("wrote %d videos (%d classes) to %s", count, n_cls, out)
    return VideoStore(out, spec, entries, means.astype(K.FLOAT))


def ensure_store(spec: SyntheticVideoSpec, root: Optional[Union[str, Path]] = None) -> VideoStore:
    """Open the store at `root` (or the default location for `spec`) if it exists, else generate it."""
    path = Path(root) if root is not None else default_store_root(spec, spec.count)
    if (path / "manifest.json").is_file():
        return VideoStore.open(path)
    return generate_dataset(spec, root=path)


# -----------------------------
# clip sampling
# -----------------------------
@dataclass
class Clip:
    data: np.ndarray  # (3, clip_len, h, w)
    label: int
    video_id: int
    start: int
    stride: int
    indices: np.ndarray
    position: str = "center"
    flipped: bool = False


@dataclass
class ClipBatch:
    clips: np.ndarray  # (n, 3, t, h, w)
    labels: np.ndarray
    provenance: List[Tuple[int, int, int]] = field(default_factory=list)  # (video id, start, stride)

    @classmethod
    def collate(cls, clips: Sequence[Clip]) -> "ClipBatch":
        return cls(
            clips=np.stack([c.data for c in clips]),
            labels=np.asarray([c.label for c in clips], dtype=np.int64),
            provenance=[(c.video_id, c.start, c.stride) for c in clips],
        )


def frame_indices(start: int, clip_len: int, stride: int, num_frames: int) -> np.ndarray:
    """start, start + stride, ...; indices past the end loop back to frame 0."""
    return (start + stride * np.arange(clip_len)) % num_frames


def resize_short_side(frames: np.ndarray, short: int) -> np.ndarray:
    """Upscale (3, t, H, W) so min(H, W) == short; larger frames are left alone."""
    h, w = frames.shape[2:]
    if min(h, w) >= short:
        return frames
    scale = short / float(min(h, w))
    nh, nw = int(round(h * scale)), int(round(w * scale))
    out = np.empty(frames.shape[:2] + (nh, nw), dtype=frames.dtype)
    for t in range(frames.shape[1]):
        img = np.ascontiguousarray(frames[:, t].transpose(1, 2, 0))
        out[:, t] = cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR).transpose(2, 0, 1)
    return out


def crop(frames: np.ndarray, size: int, position: str) -> np.ndarray:
    h, w = frames.shape[2:]
    if size > h or size > w:
        raise DimensionError(
            f"crop {size} does not fit {h}x{w} frames",
            axis="height" if size > h else "width",
        )
    top = {"top_left": 0, "top_right": 0, "bottom_left": h - size, "bottom_right": h - size}.get(
        position, (h - size) // 2
    )
    left = {"top_left": 0, "bottom_left": 0, "top_right": w - size, "bottom_right": w - size}.get(
        position, (w - size) // 2
    )
    return frames[:, :, top : top + size, left : left + size]


def flip(frames: np.ndarray) -> np.ndarray:
    """Reverse the width axis."""
    return frames[..., ::-1]


def render_clip(
    video: Video,
    indices: np.ndarray,
    cfg: SamplerConfig,
    position: str = "center",
    flipped: bool = False,
) -> np.ndarray:
    x = video.frames[:, indices]
    if cfg.resize_short_side is not None:
        x = resize_short_side(x, cfg.resize_short_side)
    x = crop(x, cfg.crop_size, position)
    if flipped:
        x = flip(x)
    if cfg.mean_subtract and video.means is not None:
        x = x - video.means.reshape(3, 1, 1, 1)
    return np.ascontiguousarray(x, dtype=K.FLOAT)


def clip_starts(num_frames: int, cfg: SamplerConfig) -> List[int]:
    """
    Test-mode starts: k = max(1, T // clip_len) clips of consecutive frames
    tiling [0, k * clip_len). The sampling stride applies to training only.
    """
    return [i * cfg.clip_len for i in range(max(1, num_frames // cfg.clip_len))]


def sample_clip(video: Video, cfg: SamplerConfig, mode: Mode, rng: Optional[np.random.Generator] = None) -> List[Clip]:
    """
    Train mode: one clip at a random start, random crop position, optional
    flip. Test mode: every non-overlapping clip, centre crop, no flip.
    """
    T = video.num_frames
    if mode == "test":
        clips = []
        for s in clip_starts(T, cfg):
            idx = frame_indices(s, cfg.clip_len, 1, T)
            clips.append(Clip(render_clip(video, idx, cfg), video.label, video.id, s, 1, idx))
        return clips
    if mode != "train":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ConfigError("train-mode sampling needs an rng")

    span = cfg.clip_len * cfg.stride
    start = int(rng.integers(0, T - span + 1)) if T >= span else 0
    position = CROP_POSITIONS[int(rng.integers(0, 5))] if cfg.num_crops == 5 else "center"
    flipped = bool(cfg.flip and rng.random() < 0.5)
    idx = frame_indices(start, cfg.clip_len, cfg.stride, T)
    data = render_clip(video, idx, cfg, position, flipped)
    return [Clip(data, video.label, video.id, start, cfg.stride, idx, position, flipped)]


def iter_batches(
    store: VideoStore,
    split: str,
    cfg: SamplerConfig,
    batch_size: int,
    rng: np.random.Generator,
) -> Iterator[ClipBatch]:
    """One shuffled pass over a split, one train-mode clip per video."""
    ids = store.ids(split)
    order = rng.permutation(len(ids))
    for lo in range(0, len(ids), batch_size):
        chunk = [ids[i] for i in order[lo : lo + batch_size]]
        yield ClipBatch.collate([sample_clip(store.load(v), cfg, "train", rng)[0] for v in chunk])


# -----------------------------
# correspondence pairs
# -----------------------------
@dataclass
class PairBatch:
    """
    Index-level pairs; `arrays` renders them. Positives take frames and clip
    from one video at one timestamp, negatives from two different videos.
    """

    store: VideoStore
    cfg: SamplerConfig
    labels: np.ndarray  # 1 = same video and timestamp
    frame_video: np.ndarray
    clip_video: np.ndarray
    frame_indices: np.ndarray  # (n, X)
    clip_indices: np.ndarray  # (n, clip_len)

    def __len__(self) -> int:
        return int(self.labels.size)

    def arrays(self, sel: Optional[Sequence[int]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(frames (n, 3, X, h, w), clips (n, 3, clip_len, h, w), labels)."""
        rows = range(len(self)) if sel is None else sel
        frames = np.stack(
            [render_clip(self.store.load(int(self.frame_video[i])), self.frame_indices[i], self.cfg) for i in rows]
        )
        clips = np.stack(
            [render_clip(self.store.load(int(self.clip_video[i])), self.clip_indices[i], self.cfg) for i in rows]
        )
        return frames, clips, self.labels[list(rows)]


def _timestamp(video: Video, cfg: SamplerConfig, X: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    T = video.num_frames
    span = cfg.clip_len * cfg.stride
    start = int(rng.integers(0, T - span + 1)) if T >= span else 0
    clip_idx = frame_indices(start, cfg.clip_len, cfg.stride, T)
    if X == cfg.clip_len:
        return clip_idx.copy(), clip_idx
    pick = np.sort(rng.choice(cfg.clip_len, size=X, replace=False))
    return clip_idx[pick], clip_idx


def make_pairs(
    store: VideoStore,
    X: int,
    rng: np.random.Generator,
    count: int,
    cfg: SamplerConfig,
    split: Optional[str] = None,
) -> PairBatch:
    """count // 2 positives, the rest negatives, in shuffled order."""
    ids = store.ids(split)
    if len(ids) < 2:
        raise ConfigError("pairs need at least two videos", {"videos": len(ids)})
    if not 1 <= X <= cfg.clip_len:
        raise ConfigError(f"X={X} frames must lie in [1, clip_len={cfg.clip_len}]")

    n_pos = count // 2
    labels = np.zeros(count, dtype=np.int64)
    labels[:n_pos] = 1
    fv = np.zeros(count, dtype=np.int64)
    cv = np.zeros(count, dtype=np.int64)
    fi = np.zeros((count, X), dtype=np.int64)
    ci = np.zeros((count, cfg.clip_len), dtype=np.int64)
    for k in range(count):
        if labels[k]:
            v = ids[int(rng.integers(0, len(ids)))]
            frames, clip_idx = _timestamp(store.load(v), cfg, X, rng)
            fv[k], cv[k], fi[k], ci[k] = v, v, frames, clip_idx
        else:
            a, b = rng.choice(len(ids), size=2, replace=False)
            fv[k], cv[k] = ids[int(a)], ids[int(b)]
            fi[k] = _timestamp(store.load(fv[k]), cfg, X, rng)[0]
            ci[k] = _timestamp(store.load(cv[k]), cfg, X, rng)[1]

    order = rng.permutation(count)
    return PairBatch(store, cfg, labels[order], fv[order], cv[order], fi[order], ci[order])
