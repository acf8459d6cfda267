"""Rotation-equivariant graph attention for molecular point clouds.

A self-contained stack: float64 reverse-mode autodiff, radius-graph
geometry, per-channel attention message passing with explicitly
equivariant vector features, training machinery, and a property-check
kit that verifies the symmetry claims numerically.
"""

from .autodiff import DiffArray, Tape, finite_difference_check
from .dataio import MoleculeRecord, RunConfig, load_config, parse_xyz, split_dataset
from .equivariance import equivariance_check, random_rotation
from .geometry import NeighborGraph, PointCloud, build_radius_graph
from .layers import NodeState
from .model import EncoderConfig, Model, load_checkpoint, save_checkpoint
from .training import AdamOptimizer, PlateauScheduler, TargetNormalizer, mae, train

__version__ = "0.1.0"

__all__ = [
    "DiffArray",
    "Tape",
    "finite_difference_check",
    "MoleculeRecord",
    "RunConfig",
    "load_config",
    "parse_xyz",
    "split_dataset",
    "equivariance_check",
    "random_rotation",
    "NeighborGraph",
    "PointCloud",
    "build_radius_graph",
    "NodeState",
    "EncoderConfig",
    "Model",
    "load_checkpoint",
    "save_checkpoint",
    "AdamOptimizer",
    "PlateauScheduler",
    "TargetNormalizer",
    "mae",
    "train",
    "__version__",
]
