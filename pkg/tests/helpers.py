"""Shared fixtures-as-functions for the test suite."""

import numpy as np

from pointgat.geometry import PointCloud, build_radius_graph
from pointgat.layers import EdgeData
from pointgat.model import EncoderConfig


def tiny_config(**overrides) -> EncoderConfig:
    base = dict(num_layers=2, scalar_channels=8, vector_channels=4,
                rbf_count=6, cutoff=5.0, vocabulary=(1, 6, 7, 8, 9))
    base.update(overrides)
    return EncoderConfig(**base)


def overfit_config() -> EncoderConfig:
    return EncoderConfig(num_layers=2, scalar_channels=16, vector_channels=8,
                         rbf_count=8, cutoff=4.0, vocabulary=(1, 6, 7, 8))


def random_cloud(rng, n_atoms, vocabulary=(1, 6, 7, 8, 9), box=6.0) -> PointCloud:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    numbers = rng.choice(np.asarray(vocabulary, dtype=np.int64), size=n_atoms)
    return PointCloud(numbers, rng.uniform(0.0, box, size=(n_atoms, 3)))


def make_edges(cloud: PointCloud, cutoff: float, num_rbf: int) -> EdgeData:
    return EdgeData.from_graph(build_radius_graph(cloud, cutoff), num_rbf, cutoff)


def geometry_target(cloud: PointCloud) -> float:
    """Fixed smooth function of interatomic distances (the overfit target)."""
    pos = cloud.positions
    d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
    iu = np.triu_indices(cloud.size, k=1)
    return float(np.sin(2.0 * d[iu]).sum() / cloud.size)


def synthetic_molecules(seed: int, count: int = 16):
    """Random 5-12 atom structures labelled by ``geometry_target``."""
    rng = np.random.default_rng(seed)
    clouds, targets = [], []
    for _ in range(count):
        n = int(rng.integers(5, 13))
        cloud = PointCloud(rng.choice([1, 6, 7, 8], size=n),
                           rng.uniform(0.0, 4.0, size=(n, 3)))
        clouds.append(cloud)
        targets.append(geometry_target(cloud))
    return clouds, np.array(targets)
