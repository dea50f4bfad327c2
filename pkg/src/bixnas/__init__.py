"""Two-phase bi-directional skip search over a multi-scale recurrent U-Net supernet."""

from bixnas.supernet import SuperNet, SuperNetConfig, build_supernet, dense_topology
from bixnas.complexity import macs, param_count, search_space_size

__all__ = [
    "SuperNet",
    "SuperNetConfig",
    "build_supernet",
    "dense_topology",
    "macs",
    "param_count",
    "search_space_size",
]
__version__ = "0.1.0"
