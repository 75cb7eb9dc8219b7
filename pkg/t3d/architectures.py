# t3d/architectures.py
"""
Architecture presets, the builder, shape/parameter audit and the
line-oriented architecture file format:

    # comment
    name t3d-121
    growth 32
    input 3x16x224x224
    classes 400
    stage 6 ttl 1,3,6
    stage 12 ttl 1,3,4
    stage 24 ttl 1,3,4
    stage 16 none
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from t3d import kernels as K
from t3d.common import ConfigError
from t3d.models.blocks import DOWNSAMPLE, DOWNSAMPLE_2D
from t3d.models.network import Network3D, stage_names, stem_specs
from t3d.schemas import ArchChoice, ArchSpec, StageSpec

logger = logging.getLogger(__name__)

T3D_DEPTHS = ((1, 3, 6), (1, 3, 4), (1, 3, 4))
TINY_DEPTHS = ((1, 2, 4), (1, 2, 4), (1, 2, 4))


def _stages(layers: Sequence[int], kind: str, depths: Sequence[Sequence[int]] = ()) -> List[StageSpec]:
    stages = []
    for i, n in enumerate(layers):
        if i == len(layers) - 1:
            stages.append(StageSpec(layers=n))
        elif kind == "ttl":
            stages.append(StageSpec(layers=n, transition="ttl", depths=tuple(depths[i])))
        else:
            stages.append(StageSpec(layers=n, transition="transition"))
    return stages


# -----------------------------
# presets
# -----------------------------
def densenet3d_121() -> ArchSpec:
    return ArchSpec(name="densenet3d-121", stages=_stages((6, 12, 24, 16), "transition"))


def densenet3d_169() -> ArchSpec:
    return ArchSpec(name="densenet3d-169", stages=_stages((6, 12, 32, 32), "transition"))


def t3d_121() -> ArchSpec:
    return ArchSpec(name="t3d-121", stages=_stages((6, 12, 24, 16), "ttl", T3D_DEPTHS))


def t3d_169() -> ArchSpec:
    return ArchSpec(name="t3d-169", stages=_stages((6, 12, 32, 32), "ttl", T3D_DEPTHS))


def tiny_t3d() -> ArchSpec:
    return ArchSpec(
        name="tiny-t3d",
        growth=8,
        stages=_stages((2, 2, 2, 2), "ttl", TINY_DEPTHS),
        num_classes=8,
        input_shape=(3, 8, 32, 32),
    )


def tiny_densenet3d() -> ArchSpec:
    return ArchSpec(
        name="tiny-densenet3d",
        growth=8,
        stages=_stages((2, 2, 2, 2), "transition"),
        num_classes=8,
        input_shape=(3, 8, 32, 32),
    )


def tiny_densenet2d() -> ArchSpec:
    """Per-frame network used as the frozen teacher."""
    return ArchSpec(
        name="tiny-densenet2d",
        growth=8,
        stages=_stages((2, 2, 2, 2), "transition"),
        num_classes=4,
        input_shape=(3, 1, 32, 32),
        spatial_only=True,
    )


PRESETS: Dict[str, Callable[[], ArchSpec]] = {
    "densenet3d-121": densenet3d_121,
    "densenet3d-169": densenet3d_169,
    "t3d-121": t3d_121,
    "t3d-169": t3d_169,
    "tiny-t3d": tiny_t3d,
    "tiny-densenet3d": tiny_densenet3d,
    "tiny-densenet2d": tiny_densenet2d,
}

# audit --compare pairs each T3D depth with its DenseNet3D counterpart
BASELINES = {"t3d-121": "densenet3d-121", "t3d-169": "densenet3d-169", "tiny-t3d": "tiny-densenet3d"}


def get_preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}", {"known": sorted(PRESETS)})


def with_input(spec: ArchSpec, input_shape: Sequence[int]) -> ArchSpec:
    if len(input_shape) != 4:
        raise ConfigError(f"input shape must be c x t x h x w, got {list(input_shape)}")
    return spec.model_copy(update={"input_shape": tuple(int(v) for v in input_shape)})


def parse_shape(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.lower().replace("×", "x").split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse shape {text!r}; expected e.g. 3x16x224x224")


def resolve_arch(choice: ArchChoice, arch: Optional[str] = None) -> ArchSpec:
    """`arch` may be a preset name or a path to an architecture file."""
    name = arch or choice.file or choice.preset
    if name in PRESETS:
        spec = get_preset(name)
    elif Path(name).is_file():
        spec = load_arch_file(name)
    else:
        raise ConfigError(f"{name!r} is neither a preset nor an architecture file", {"known": sorted(PRESETS)})
    if choice.num_classes is not None:
        spec = spec.model_copy(update={"num_classes": choice.num_classes})
    return spec


def build(spec: ArchSpec, seed: int = 0, dtype: Any = K.FLOAT) -> Network3D:
    """Same (spec, seed, dtype) gives bit-identical parameters."""
    return Network3D(spec, np.random.default_rng(seed), dtype)


# -----------------------------
# audit
# -----------------------------
@dataclass
class AuditRow:
    name: str
    shape: Tuple[int, ...]  # (c, t, h, w), or (classes,) for logits
    params: int
    macs: int


@dataclass
class AuditReport:
    name: str
    input_shape: Tuple[int, int, int, int]
    rows: List[AuditRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(r.name, r.shape) for r in self.rows]

    def table(self) -> str:
        lines = [
            f"# {self.name}  input {'x'.join(str(v) for v in self.input_shape)} (c x t x h x w)",
            f"{'stage':<12}{'output (h x w x t)':>20}{'channels':>10}{'params':>14}{'MACs':>18}",
        ]
        for r in self.rows:
            if len(r.shape) == 4:
                c, t, h, w = r.shape
                size = f"{h}x{w}x{t}"
            else:
                c, size = r.shape[0], "-"
            lines.append(f"{r.name:<12}{size:>20}{c:>10}{r.params:>14,}{r.macs:>18,}")
        lines.append(f"{'total':<12}{'':>20}{'':>10}{self.params:>14,}{self.macs:>18,}")
        return "\n".join(lines)


def _conv_cost(cin: int, cout: int, kvol: int, thw: Tuple[int, int, int]) -> Tuple[int, int]:
    params = cin * cout * kvol + 2 * cin  # pre-activation batch norm
    return params, int(np.prod(thw)) * cin * cout * kvol


def audit(spec: ArchSpec) -> AuditReport:
    """Output shape, parameter count and multiply-accumulates per stage, without building."""
    spec.check()
    report = AuditReport(name=spec.name, input_shape=spec.input_shape)
    conv, pool = stem_specs(spec)
    thw = tuple(spec.input_shape[1:])

    thw = conv.output_shape(thw)  # type: ignore[arg-type]
    kvol = conv.temporal * conv.spatial * conv.spatial
    c = conv.out_channels
    report.rows.append(
        AuditRow("stem", (c, *thw), conv.in_channels * c * kvol + 2 * c, int(np.prod(thw)) * conv.in_channels * c * kvol)
    )
    thw = pool.output_shape(thw)
    report.rows.append(AuditRow("stem_pool", (c, *thw), 0, 0))

    width = spec.bottleneck_factor * spec.growth
    main_kvol = 9 if spec.spatial_only else 27
    for i, (st, plan) in enumerate(zip(spec.stages, spec.channel_plan()), start=1):
        block_name, trans_name = stage_names(i, st.transition)
        params = macs = 0
        for j in range(st.layers):
            p1, m1 = _conv_cost(plan["in"] + j * spec.growth, width, 1, thw)  # type: ignore[arg-type]
            p2, m2 = _conv_cost(width, spec.growth, main_kvol, thw)  # type: ignore[arg-type]
            params += p1 + p2
            macs += m1 + m2
        c = plan["block_out"]
        report.rows.append(AuditRow(block_name, (c, *thw), params, macs))

        if st.transition == "none":
            continue
        params = macs = 0
        depths = st.depths if st.transition == "ttl" else (1,)
        for d, w in zip(depths, plan["widths"]):
            p, m = _conv_cost(c, w, 1 if d == 1 else 9 * d, thw)  # type: ignore[arg-type]
            params += p
            macs += m
        down = DOWNSAMPLE_2D if spec.spatial_only else DOWNSAMPLE
        thw = down.output_shape(thw)  # type: ignore[arg-type]
        c = plan["out"]
        report.rows.append(AuditRow(trans_name or "", (c, *thw), params, macs))

    report.rows.append(AuditRow("pool", (c, 1, 1, 1), 2 * c, 0))
    n = spec.num_classes
    report.rows.append(AuditRow("logits", (n,), c * n + n, c * n))
    return report


def parameter_ratio(spec: ArchSpec, baseline: ArchSpec) -> float:
    return audit(spec).params / audit(baseline).params


# -----------------------------
# architecture files
# -----------------------------
def _triple(text: str) -> Tuple[int, int, int]:
    t, h, w = (int(v) for v in text.split("x"))
    return (t, h, w)


def _parse_pads(text: str) -> Tuple[Tuple[int, int], ...]:
    # "1:1,1:1,1:1" = (before, after) per axis
    pairs = tuple(tuple(int(v) for v in axis.split(":")) for axis in text.split(","))
    if len(pairs) != 3 or any(len(p) != 2 for p in pairs):
        raise ValueError(f"padding {text!r} needs three before:after pairs")
    return pairs  # type: ignore[return-value]


def _shape_text(shape: Sequence[int]) -> str:
    return "x".join(str(v) for v in shape)


def _pads_text(pads: Sequence[Tuple[int, int]]) -> str:
    return ",".join(f"{a}:{b}" for a, b in pads)


def parse_arch_text(text: str, source: str = "<text>") -> ArchSpec:
    fields: Dict[str, Any] = {}
    stages: List[Dict[str, Any]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *args = line.split()
        where = {"file": source, "line": lineno}
        try:
            if key == "name":
                fields["name"] = args[0]
            elif key == "growth":
                fields["growth"] = int(args[0])
            elif key == "bottleneck":
                fields["bottleneck_factor"] = int(args[0])
            elif key == "stem_channels":
                fields.setdefault("stem", {})["channels"] = int(args[0])
            elif key == "stem_kernel":
                fields.setdefault("stem", {}).update(spatial=int(args[0]), temporal=int(args[1]))
            elif key == "stem_stride":
                fields.setdefault("stem", {})["stride"] = _triple(args[0])
            elif key == "stem_pool":
                pool: Dict[str, Any] = {"mode": args[0], "kernel": _triple(args[1]), "stride": _triple(args[2])}
                if len(args) > 3:
                    pool["padding"] = _parse_pads(args[3])
                fields.setdefault("stem", {})["pool"] = pool
            elif key == "input":
                fields["input_shape"] = parse_shape(args[0])
            elif key == "classes":
                fields["num_classes"] = int(args[0])
            elif key == "spatial_only":
                fields["spatial_only"] = True
            elif key == "stage":
                stage: Dict[str, Any] = {"layers": int(args[0])}
                rest = list(args[1:])
                if rest and not rest[0].startswith("theta="):
                    stage["transition"] = rest.pop(0)
                if rest and stage.get("transition") == "ttl" and not rest[0].startswith("theta="):
                    stage["depths"] = tuple(int(d) for d in rest.pop(0).split(","))
                for opt in rest:
                    k, _, v = opt.partition("=")
                    if k != "theta":
                        raise ConfigError(f"{source}:{lineno}: unknown stage option {k!r}", where)
                    stage["theta"] = float(v)
                stages.append(stage)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}", where)
        except (IndexError, ValueError) as e:
            raise ConfigError(f"{source}:{lineno}: cannot parse {raw.strip()!r}", {**where, "error": str(e)})
    try:
        spec = ArchSpec(stages=stages, **fields)
    except ValidationError as e:
        raise ConfigError(f"{source}: invalid architecture", {"errors": e.errors(include_url=False)})
    spec.check()
    return spec


def load_arch_file(path: Union[str, Path]) -> ArchSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read architecture file {p}", {"error": str(e)})
    return parse_arch_text(text, source=str(p))


def dump_arch_text(spec: ArchSpec) -> str:
    lines = [
        f"name {spec.name}",
        f"growth {spec.growth}",
        f"bottleneck {spec.bottleneck_factor}",
        f"input {_shape_text(spec.input_shape)}",
        f"classes {spec.num_classes}",
    ]
    stem = spec.stem
    if stem.channels is not None:
        lines.append(f"stem_channels {stem.channels}")
    lines.append(f"stem_kernel {stem.spatial} {stem.temporal}")
    lines.append(f"stem_stride {_shape_text(stem.stride)}")
    pool = stem.pool
    lines.append(f"stem_pool {pool.mode} {_shape_text(pool.kernel)} {_shape_text(pool.stride)} {_pads_text(pool.padding)}")
    if spec.spatial_only:
        lines.append("spatial_only")
    for st in spec.stages:
        parts = ["stage", str(st.layers), st.transition]
        if st.depths:
            parts.append(",".join(str(d) for d in st.depths))
        if st.theta != 0.5:
            parts.append(f"theta={st.theta}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
