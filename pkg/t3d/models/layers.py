# t3d/models/layers.py
from __future__ import annotations

from collections import OrderedDict
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from t3d import kernels as K
from t3d.autograd import Node, NodeGraph
from t3d.common import DimensionError, SpecError
from t3d.schemas import ConvKernelSpec, PoolSpec


class Parameter:
    """A trainable array. `decay` marks conv/linear weights for weight decay."""

    __slots__ = ("data", "decay", "requires_grad", "name")

    def __init__(self, data: np.ndarray, decay: bool = True, name: str = ""):
        self.data = data
        self.decay = decay
        self.requires_grad = True
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.data.shape}, decay={self.decay})"


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype: Any) -> np.ndarray:
    """Zero-mean normal with variance 2 / fan_in."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# -----------------------------
# module tree
# -----------------------------
class Module:
    """
    Attributes are walked in assignment order: Parameters, RunningStats
    buffers, child Modules and lists of Modules. That order is the
    declaration order checkpoints are written in.
    """

    training: bool = True

    def _walk(self, prefix: str = "") -> Iterator[Tuple[str, Any]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, K.RunningStats)):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value._walk(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_parameters(self) -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._walk():
            if isinstance(value, Parameter):
                value.name = name
                yield name, value

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def named_tensors(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Parameters and running statistics, in declaration order."""
        for name, value in self._walk():
            if isinstance(value, Parameter):
                yield name, value.data
            else:
                yield f"{name}.running_mean", value.mean
                yield f"{name}.running_var", value.var

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, arr.copy()) for name, arr in self.named_tensors())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = OrderedDict(self.named_tensors())
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise SpecError(
                "state does not match the model",
                {"missing": missing[:10], "unexpected": extra[:10]},
            )
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.size != arr.size:
                raise SpecError(f"{name}: shape {src.shape} does not fit {arr.shape}", {"tensor": name})
            arr[...] = src.reshape(arr.shape)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self


# -----------------------------
# leaf layers
# -----------------------------
class Conv3d(Module):
    def __init__(self, spec: ConvKernelSpec, rng: np.random.Generator, dtype: Any = K.FLOAT):
        self.spec = spec
        fan_in = spec.in_channels * spec.temporal * spec.spatial * spec.spatial
        self.weight = Parameter(he_normal(rng, spec.weight_shape, fan_in, dtype), decay=True)
        self.bias: Optional[Parameter] = None
        if spec.bias:
            self.bias = Parameter(np.zeros(spec.out_channels, dtype=dtype), decay=False)

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(
                f"conv expects {self.spec.in_channels} input channels, got {x.shape[1]}",
                axis="channel",
            )
        b = g.param(self.bias) if self.bias is not None else None
        return g.conv3d(x, g.param(self.weight), b, stride=self.spec.stride, padding=self.spec.padding)


class BatchNorm3d(Module):
    def __init__(self, channels: int, dtype: Any = K.FLOAT):
        self.gamma = Parameter(np.ones(channels, dtype=dtype), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dtype), decay=False)
        self.stats = K.RunningStats.fresh(channels, dtype)

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return g.batchnorm3d(x, g.param(self.gamma), g.param(self.beta), self.stats, self.training)


class Pool3d(Module):
    def __init__(self, spec: PoolSpec):
        self.spec = spec

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        s = self.spec
        return g.pool3d(x, s.mode, s.kernel, s.stride, s.padding)


class Linear(Module):
    """y = x @ W.T + b, W stored (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype: Any = K.FLOAT):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(he_normal(rng, (out_features, in_features), in_features, dtype), decay=True)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False)

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return g.linear(x, g.param(self.weight), g.param(self.bias))


# -----------------------------
# composites
# -----------------------------
class BNReLUConv(Module):
    """Pre-activation unit: batch norm, ReLU, then convolution."""

    def __init__(self, spec: ConvKernelSpec, rng: np.random.Generator, dtype: Any = K.FLOAT):
        self.norm = BatchNorm3d(spec.in_channels, dtype)
        self.conv = Conv3d(spec, rng, dtype)

    @property
    def out_channels(self) -> int:
        return self.conv.spec.out_channels

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return self.conv(g, g.relu(self.norm(g, x)))


class ConvBNReLU(Module):
    """Post-activation unit used by the stem, where the input is raw pixels."""

    def __init__(self, spec: ConvKernelSpec, rng: np.random.Generator, dtype: Any = K.FLOAT):
        self.conv = Conv3d(spec, rng, dtype)
        self.norm = BatchNorm3d(spec.out_channels, dtype)

    def __call__(self, g: NodeGraph, x: Node) -> Node:
        return g.relu(self.norm(g, self.conv(g, x)))
