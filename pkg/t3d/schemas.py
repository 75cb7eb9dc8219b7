# t3d/schemas.py
from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from t3d.common import SpecError
from t3d.kernels import out_extent, pad_pairs

Triple = Tuple[int, int, int]
PadPair = Tuple[int, int]
Pads = Tuple[PadPair, PadPair, PadPair]


class StrictModel(BaseModel):
    # unknown keys are rejected
    model_config = ConfigDict(extra="forbid")


def same_padding(kernel: int) -> PadPair:
    # even kernels cannot be centred: the extra zero goes in front
    return (kernel // 2, (kernel - 1) // 2)


def split_width(total: int, parts: int) -> List[int]:
    """Even split, remainder to the first part."""
    base = total // parts
    widths = [base] * parts
    widths[0] += total - base * parts
    return widths


# -----------------------------
# tensor-core kernels
# -----------------------------
class ConvKernelSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    spatial: int = Field(ge=1)
    temporal: int = Field(ge=1)
    in_channels: int = Field(ge=1)
    out_channels: int = Field(ge=1)
    stride: Triple = (1, 1, 1)
    padding: Pads = ((0, 0), (0, 0), (0, 0))
    bias: bool = False

    @field_validator("spatial")
    @classmethod
    def _odd_spatial(cls, v: int) -> int:
        if v % 2 == 0:
            raise ValueError(f"spatial kernel size must be odd, got {v}")
        return v

    @field_validator("padding", mode="before")
    @classmethod
    def _pads(cls, v: Any) -> Pads:
        return pad_pairs(v)

    @classmethod
    def same(cls, in_channels: int, out_channels: int, spatial: int, temporal: int) -> "ConvKernelSpec":
        """Stride-1 kernel whose padding preserves (t, h, w)."""
        sp = same_padding(spatial)
        return cls(
            spatial=spatial,
            temporal=temporal,
            in_channels=in_channels,
            out_channels=out_channels,
            padding=(same_padding(temporal), sp, sp),
        )

    @property
    def kernel(self) -> Triple:
        return (self.temporal, self.spatial, self.spatial)

    @property
    def weight_shape(self) -> Tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels, self.temporal, self.spatial, self.spatial)

    def output_shape(self, thw: Triple) -> Triple:
        return tuple(  # type: ignore[return-value]
            out_extent(n, k, s, p, axis)
            for n, k, s, p, axis in zip(thw, self.kernel, self.stride, self.padding, (2, 3, 4))
        )


class PoolSpec(StrictModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["max", "avg"] = "avg"
    kernel: Triple = (2, 2, 2)
    stride: Triple = (2, 2, 2)
    padding: Pads = ((0, 0), (0, 0), (0, 0))

    @field_validator("padding", mode="before")
    @classmethod
    def _pads(cls, v: Any) -> Pads:
        return pad_pairs(v)

    def output_shape(self, thw: Triple) -> Triple:
        return tuple(  # type: ignore[return-value]
            out_extent(n, k, s, p, axis)
            for n, k, s, p, axis in zip(thw, self.kernel, self.stride, self.padding, (2, 3, 4))
        )


# -----------------------------
# architectures
# -----------------------------
TransitionKind = Literal["none", "transition", "ttl"]


class StemSpec(StrictModel):
    channels: Optional[int] = Field(default=None, ge=1)  # None -> 2 * growth
    spatial: int = 7
    temporal: int = 3
    stride: Triple = (1, 2, 2)
    pool: PoolSpec = PoolSpec(mode="max", kernel=(3, 3, 3), stride=(1, 2, 2), padding=1)


class StageSpec(StrictModel):
    layers: int = Field(ge=0)
    transition: TransitionKind = "none"
    depths: Tuple[int, ...] = ()
    theta: float = Field(default=0.5, gt=0.0, le=1.0)


class ArchSpec(StrictModel):
    name: str = "custom"
    growth: int = Field(default=32, ge=1)
    bottleneck_factor: int = Field(default=4, ge=1)
    stem: StemSpec = StemSpec()
    stages: List[StageSpec] = Field(min_length=1)
    num_classes: int = Field(default=400, ge=1)
    input_shape: Tuple[int, int, int, int] = (3, 16, 224, 224)  # (c, t, h, w)
    spatial_only: bool = False

    def check(self) -> None:
        """Raise SpecError naming the stage that breaks the chaining rules."""
        last = len(self.stages) - 1
        for i, st in enumerate(self.stages):
            if i == last and st.transition != "none":
                raise SpecError(
                    f"stage {i + 1}: the last stage feeds the classifier and takes no transition",
                    {"stage": i + 1, "transition": st.transition},
                )
            if st.transition == "ttl" and not st.depths:
                raise SpecError(f"stage {i + 1}: ttl needs at least one branch depth", {"stage": i + 1})
            if st.transition != "ttl" and st.depths:
                raise SpecError(
                    f"stage {i + 1}: branch depths given for a '{st.transition}' stage",
                    {"stage": i + 1, "depths": list(st.depths)},
                )
            if any(d < 1 for d in st.depths):
                raise SpecError(f"stage {i + 1}: branch depths must be >= 1", {"stage": i + 1})
            if self.spatial_only and st.transition == "ttl":
                raise SpecError(f"stage {i + 1}: spatial-only networks use plain transitions", {"stage": i + 1})
        self.channel_plan()

    @property
    def stem_channels(self) -> int:
        return self.stem.channels if self.stem.channels is not None else 2 * self.growth

    def channel_plan(self) -> List[Dict[str, Any]]:
        """Per stage: input channels, block output, transition output and branch widths."""
        plan: List[Dict[str, Any]] = []
        c = self.stem_channels
        for i, st in enumerate(self.stages):
            block_out = c + st.layers * self.growth
            entry: Dict[str, Any] = {"stage": i + 1, "in": c, "block_out": block_out, "out": block_out, "widths": []}
            if st.transition != "none":
                total = int(st.theta * block_out)
                if total < 1:
                    raise SpecError(
                        f"stage {i + 1}: compression {st.theta} leaves no channels",
                        {"stage": i + 1, "channels": block_out},
                    )
                k = len(st.depths) if st.transition == "ttl" else 1
                if total < k:
                    raise SpecError(
                        f"stage {i + 1}: {total} channels cannot feed {k} branches",
                        {"stage": i + 1, "channels": total, "branches": k},
                    )
                entry["widths"] = split_width(total, k)
                entry["out"] = total
            plan.append(entry)
            c = entry["out"]
        return plan


# -----------------------------
# data
# -----------------------------
Direction = Literal["up", "down", "left", "right"]
Speed = Literal["slow", "fast"]


class SyntheticVideoSpec(StrictModel):
    count: int = Field(default=200, ge=1)
    directions: List[Direction] = ["up", "down", "left", "right"]
    speeds: List[Speed] = ["slow", "fast"]
    slow_pixels: int = Field(default=1, ge=1)
    fast_pixels: int = Field(default=2, ge=1)
    frame_size: int = Field(default=32, ge=4)
    num_frames: int = Field(default=16, ge=1)
    object_size: int = Field(default=6, ge=1)
    noise_std: float = Field(default=0.0, ge=0.0)
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)
    seed: int = 0

    @property
    def classes(self) -> List[Tuple[str, str]]:
        return [(d, s) for d in self.directions for s in self.speeds]

    @property
    def class_names(self) -> List[str]:
        return [f"{d}-{s}" for d, s in self.classes]

    def speed_pixels(self, speed: str) -> int:
        return self.slow_pixels if speed == "slow" else self.fast_pixels


class SamplerConfig(StrictModel):
    clip_len: int = Field(default=32, ge=1)
    stride: int = Field(default=2, ge=1)
    resize_short_side: Optional[int] = Field(default=256, ge=1)
    crop_size: int = Field(default=224, ge=1)
    num_crops: Literal[1, 5] = 5
    flip: bool = True
    mean_subtract: bool = True


# -----------------------------
# training / transfer
# -----------------------------
class TrainConfig(StrictModel):
    lr0: float = Field(default=0.1, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    nesterov: bool = True
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=64, ge=1)
    schedule: Literal["step", "plateau"] = "step"
    step_epochs: int = Field(default=30, ge=1)
    lr_factor: float = Field(default=0.1, gt=0.0, lt=1.0)
    patience: int = Field(default=2, ge=1)
    plateau_threshold: float = Field(default=1e-4, ge=0.0)
    max_epochs: int = Field(default=200, ge=0)
    seed: int = 0
    prefetch: int = Field(default=0, ge=0)  # bounded queue depth, 0 = load inline
    quiet: bool = False


class TransferConfig(StrictModel):
    frames: Optional[int] = Field(default=None, ge=1)  # X; None -> sampler clip_len
    embed_dim: int = Field(default=1024, ge=1)
    fc_sizes: Tuple[int, int] = (512, 128)
    num_pairs: int = Field(default=500, ge=2)
    eval_pairs: int = Field(default=100, ge=2)
    teacher_arch: str = "tiny-densenet2d"
    teacher_epochs: int = Field(default=10, ge=0)
    train: TrainConfig = TrainConfig(batch_size=32, max_epochs=150)


class ArchChoice(StrictModel):
    preset: str = "tiny-t3d"
    file: Optional[str] = None
    num_classes: Optional[int] = Field(default=None, ge=1)


class RunConfig(StrictModel):
    data: SyntheticVideoSpec = SyntheticVideoSpec()
    sampler: SamplerConfig = SamplerConfig()
    arch: ArchChoice = ArchChoice()
    train: TrainConfig = TrainConfig()
    transfer: TransferConfig = TransferConfig()
