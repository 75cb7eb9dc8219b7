from t3d.models.blocks import (
    ClassifierHead,
    DenseBlock3D,
    DenseLayer3D,
    TemporalTransition,
    Transition3D,
)
from t3d.models.layers import BatchNorm3d, BNReLUConv, Conv3d, ConvBNReLU, Linear, Module, Parameter, Pool3d
from t3d.models.network import Network3D

__all__ = [
    "BatchNorm3d",
    "BNReLUConv",
    "ClassifierHead",
    "Conv3d",
    "ConvBNReLU",
    "DenseBlock3D",
    "DenseLayer3D",
    "Linear",
    "Module",
    "Network3D",
    "Parameter",
    "Pool3d",
    "TemporalTransition",
    "Transition3D",
]
