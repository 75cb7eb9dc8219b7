# t3d/models/blocks.py
"""
Dense blocks and the stages between them.

Each block is a Module called as `block(graph, node)`. The module-level
`*_forward` helpers run the same block on plain arrays in a throwaway graph.
"""
from __future__ import annotations

from typing import Any, List, Optional, Sequence

import numpy as np

from t3d import kernels as K
from t3d.autograd import Node, NodeGraph
from t3d.common import DimensionError, SpecError
from t3d.models.layers import BatchNorm3d, BNReLUConv, Linear, Module, Pool3d
from t3d.schemas import ConvKernelSpec, PoolSpec

DOWNSAMPLE = PoolSpec(mode="avg", kernel=(2, 2, 2), stride=(2, 2, 2))
DOWNSAMPLE_2D = PoolSpec(mode="avg", kernel=(1, 2, 2), stride=(1, 2, 2))


# -----------------------------
# dense connectivity
# -----------------------------
class DenseLayer3D(Module):
    """Bottleneck 1x1x1 to `bottleneck_factor * growth`, then 3x3x3 to `growth`."""

    def __init__(
        self,
        in_channels: int,
        growth: int,
        rng: np.random.Generator,
        bottleneck_factor: int = 4,
        spatial_only: bool = False,
        dtype: Any = K.FLOAT,
    ):
        self.in_channels = in_channels
        width = bottleneck_factor * growth
        self.bottleneck = BNReLUConv(ConvKernelSpec.same(in_channels, width, 1, 1), rng, dtype)
        self.main = BNReLUConv(ConvKernelSpec.same(width, growth, 3, 1 if spatial_only else 3), rng, dtype)

    def __call__(self, g: NodeGraph, inputs: Sequence[Node]) -> Node:
        x = inputs[0] if len(inputs) == 1 else g.concat(inputs)
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"dense layer built for {self.in_channels} channels, inputs carry {x.shape[1]}",
                axis="channel",
            )
        return self.main(g, self.bottleneck(g, x))


class DenseBlock3D(Module):
    def __init__(
        self,
        in_channels: int,
        num_layers: int,
        growth: int,
        rng: np.random.Generator,
        bottleneck_factor: int = 4,
        spatial_only: bool = False,
        dtype: Any = K.FLOAT,
    ):
        self.in_channels = in_channels
        self.out_channels = in_channels + num_layers * growth
        self.layers: List[DenseLayer3D] = [
            DenseLayer3D(in_channels + i * growth, growth, rng, bottleneck_factor, spatial_only, dtype)
            for i in range(num_layers)
        ]

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        if not self.layers:
            return x
        features = [x]
        for layer in self.layers:
            features.append(layer(g, features))
        return g.concat(features)


# -----------------------------
# transitions
# -----------------------------
class Transition3D(Module):
    """BN-ReLU-Conv 1x1x1 then 2x2x2 average pooling."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        spatial_only: bool = False,
        dtype: Any = K.FLOAT,
    ):
        self.unit = BNReLUConv(ConvKernelSpec.same(in_channels, out_channels, 1, 1), rng, dtype)
        self.pool = Pool3d(DOWNSAMPLE_2D if spatial_only else DOWNSAMPLE)

    @property
    def out_channels(self) -> int:
        return self.unit.out_channels

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return self.pool(g, self.unit(g, x))


class TemporalTransition(Module):
    """
    Parallel BN-ReLU-Conv branches of different temporal depth, concatenated
    in declaration order and average-pooled 2x2x2.

    Depth 1 is a 1x1x1 kernel; depth d > 1 is 3x3xd with "same" padding, the
    odd zero in front for even d.
    """

    def __init__(
        self,
        in_channels: int,
        depths: Sequence[int],
        widths: Sequence[int],
        rng: np.random.Generator,
        dtype: Any = K.FLOAT,
    ):
        if len(depths) != len(widths) or not depths:
            raise SpecError("ttl needs one width per branch depth", {"depths": list(depths), "widths": list(widths)})
        self.depths = tuple(depths)
        self.branches: List[BNReLUConv] = [
            BNReLUConv(ConvKernelSpec.same(in_channels, w, 1 if d == 1 else 3, d), rng, dtype)
            for d, w in zip(depths, widths)
        ]
        self.pool = Pool3d(DOWNSAMPLE)

    @property
    def widths(self) -> List[int]:
        return [b.out_channels for b in self.branches]

    @property
    def out_channels(self) -> int:
        return sum(self.widths)

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        outs = [branch(g, x) for branch in self.branches]
        y = outs[0] if len(outs) == 1 else g.concat(outs)
        return self.pool(g, y)


# -----------------------------
# classifier
# -----------------------------
class ClassifierHead(Module):
    """Final BN-ReLU, global average pool over what is left of (t, h, w), linear."""

    def __init__(self, in_channels: int, num_classes: int, rng: np.random.Generator, dtype: Any = K.FLOAT):
        self.in_channels = in_channels
        self.norm = BatchNorm3d(in_channels, dtype)
        self.fc = Linear(in_channels, num_classes, rng, dtype)

    @property
    def num_classes(self) -> int:
        return self.fc.out_features

    def features(self, g: NodeGraph, x: Node) -> Node:
        return g.flatten(g.global_avg_pool(g.relu(self.norm(g, x))))

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return self.fc(g, self.features(g, x))


# -----------------------------
# array-level entry points
# -----------------------------
def dense_layer_forward(inputs: Sequence[np.ndarray], layer: DenseLayer3D) -> np.ndarray:
    g = NodeGraph()
    return layer(g, [g.leaf(x) for x in inputs]).value


def dense_block_forward(x: np.ndarray, block: DenseBlock3D) -> np.ndarray:
    g = NodeGraph()
    return block(g, g.leaf(x)).value


def ttl_forward(x: np.ndarray, ttl: TemporalTransition) -> np.ndarray:
    g = NodeGraph()
    return ttl(g, g.leaf(x)).value


def transition_forward(x: np.ndarray, transition: Transition3D) -> np.ndarray:
    g = NodeGraph()
    return transition(g, g.leaf(x)).value


def classifier_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Global average pool then linear; weights are (num_classes, channels)."""
    pooled = K.global_avg_pool(K.check_tensor5(x))
    return K.linear(pooled.reshape(pooled.shape[0], -1), weights, bias)
