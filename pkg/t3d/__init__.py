"""Temporal 3D ConvNets in numpy: dense 3D blocks, temporal transition layers and 2D-to-3D supervision transfer."""

__version__ = "0.1.0"
