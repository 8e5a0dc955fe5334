"""Conditional WIRE implicit neural representations for longitudinal brain development."""

from .inr import InrNetwork, NetworkConfig, forward_backward, init_network
from .volume import VolumeImage, load_volume, save_volume

__all__ = [
    "InrNetwork",
    "NetworkConfig",
    "VolumeImage",
    "forward_backward",
    "init_network",
    "load_volume",
    "save_volume",
]
__version__ = "0.1.0"
