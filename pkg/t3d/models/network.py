# t3d/models/network.py
from __future__ import annotations

from typing import Any, List, Optional, Tuple

import numpy as np

from t3d import kernels as K
from t3d.autograd import Node, NodeGraph
from t3d.common import DimensionError
from t3d.models.blocks import ClassifierHead, DenseBlock3D, TemporalTransition, Transition3D
from t3d.models.layers import ConvBNReLU, Linear, Module, Pool3d
from t3d.schemas import ArchSpec, ConvKernelSpec, PoolSpec, same_padding

Trace = List[Tuple[str, Tuple[int, ...]]]


def stem_specs(spec: ArchSpec) -> Tuple[ConvKernelSpec, PoolSpec]:
    """Stem convolution and pooling, with temporal extent removed for spatial-only specs."""
    st = spec.stem
    temporal = 1 if spec.spatial_only else st.temporal
    stride = (1, st.stride[1], st.stride[2]) if spec.spatial_only else st.stride
    sp = same_padding(st.spatial)
    conv = ConvKernelSpec(
        spatial=st.spatial,
        temporal=temporal,
        in_channels=spec.input_shape[0],
        out_channels=spec.stem_channels,
        stride=stride,
        padding=(same_padding(temporal), sp, sp),
    )
    pool = st.pool
    if spec.spatial_only:
        pool = PoolSpec(
            mode=pool.mode,
            kernel=(1, pool.kernel[1], pool.kernel[2]),
            stride=(1, pool.stride[1], pool.stride[2]),
            padding=((0, 0), pool.padding[1], pool.padding[2]),
        )
    return conv, pool


def stage_names(index: int, transition: str) -> Tuple[str, Optional[str]]:
    block = f"block{index}"
    if transition == "none":
        return block, None
    return block, f"{transition}{index}"


class Stage(Module):
    def __init__(self, block: DenseBlock3D, transition: Optional[Module]):
        self.block = block
        self.transition = transition

    @property
    def out_channels(self) -> int:
        if self.transition is None:
            return self.block.out_channels
        return self.transition.out_channels  # type: ignore[attr-defined]


class Network3D(Module):
    """Stem, dense stages, classifier head; built from an ArchSpec."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator, dtype: Any = K.FLOAT):
        spec.check()
        self.spec = spec
        self.dtype = dtype
        conv, pool = stem_specs(spec)
        self.stem = ConvBNReLU(conv, rng, dtype)
        self.stem_pool = Pool3d(pool)

        self.stages: List[Stage] = []
        for st, plan in zip(spec.stages, spec.channel_plan()):
            block = DenseBlock3D(
                plan["in"], st.layers, spec.growth, rng, spec.bottleneck_factor, spec.spatial_only, dtype
            )
            transition: Optional[Module] = None
            if st.transition == "transition":
                transition = Transition3D(plan["block_out"], plan["out"], rng, spec.spatial_only, dtype)
            elif st.transition == "ttl":
                transition = TemporalTransition(plan["block_out"], st.depths, plan["widths"], rng, dtype)
            self.stages.append(Stage(block, transition))

        self.classifier = ClassifierHead(self.stages[-1].out_channels, spec.num_classes, rng, dtype)

    @property
    def num_classes(self) -> int:
        return self.classifier.num_classes

    @property
    def feature_dim(self) -> int:
        return self.classifier.in_channels

    def _trunk(self, g: NodeGraph, x: Node, trace: Optional[Trace]) -> Node:
        c = self.spec.input_shape[0]
        if x.shape[1] != c:
            raise DimensionError(f"network expects {c} input channels, got {x.shape[1]}", axis="channel")

        def rec(name: str, node: Node) -> Node:
            if trace is not None:
                trace.append((name, tuple(node.shape[1:])))
            return node

        x = rec("stem", self.stem(g, x))
        x = rec("stem_pool", self.stem_pool(g, x))
        for i, (stage, st) in enumerate(zip(self.stages, self.spec.stages), start=1):
            block_name, trans_name = stage_names(i, st.transition)
            x = rec(block_name, stage.block(g, x))
            if stage.transition is not None:
                x = rec(trans_name or "", stage.transition(g, x))
        return x

    def features(self, g: NodeGraph, x: Node, trace: Optional[Trace] = None) -> Node:
        """Pooled (n, C) representation in front of the classifier's linear layer."""
        f = self.classifier.features(g, self._trunk(g, x, trace))
        if trace is not None:
            trace.append(("pool", (f.shape[1], 1, 1, 1)))
        return f

    def __call__(self, g: NodeGraph, x: Node, trace: Optional[Trace] = None) -> Node:
        logits = self.classifier.fc(g, self.features(g, x, trace))
        if trace is not None:
            trace.append(("logits", (logits.shape[1],)))
        return logits

    def logits(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on an array in whatever mode the model is in."""
        g = NodeGraph()
        return self(g, g.leaf(x.astype(self.dtype, copy=False))).value

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return K.softmax(self.logits(x))

    def reset_classifier(self, num_classes: int, rng: np.random.Generator) -> None:
        """
        Swap in a freshly initialized linear layer for `num_classes`. The
        head's final BN stays: it belongs to the transferred features.
        """
        self.classifier.fc = Linear(self.feature_dim, num_classes, rng, self.dtype)
        self.spec = self.spec.model_copy(update={"num_classes": num_classes})
