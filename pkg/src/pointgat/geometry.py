"""Point clouds, radius graphs, and invariant distance featurization.

Everything here is plain numpy: distances, unit relative positions and
radial features depend only on atom positions, which are never
differentiated.  The model wraps the outputs as untracked constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError

__all__ = [
    "PointCloud",
    "NeighborGraph",
    "pairwise_distance",
    "build_radius_graph",
    "bessel_rbf",
    "cosine_cutoff",
]

# brute force is the correctness oracle; the cell list takes over for
# clouds large enough that O(N^2) hurts (protein-complex scale)
CELL_LIST_THRESHOLD = 2000


@dataclass(frozen=True)
class PointCloud:
    """Atomic numbers and Cartesian coordinates (angstrom) of one structure."""

    atomic_numbers: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        numbers = np.ascontiguousarray(self.atomic_numbers, dtype=np.int64)
        positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if numbers.ndim != 1 or numbers.size < 1:
            raise ValueError(f"atomic_numbers must be a non-empty vector, got shape {numbers.shape}")
        if positions.shape != (numbers.size, 3):
            raise ValueError(
                f"positions must have shape ({numbers.size}, 3), got {positions.shape}"
            )
        if not np.all(np.isfinite(positions)):
            raise ValueError("positions must be finite")
        if np.any(numbers < 1):
            raise ValueError("atomic numbers must be >= 1")
        object.__setattr__(self, "atomic_numbers", numbers)
        object.__setattr__(self, "positions", positions)

    @property
    def size(self) -> int:
        return self.atomic_numbers.size

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.atomic_numbers, self.positions + np.asarray(offset))

    def permuted(self, order) -> "PointCloud":
        order = np.asarray(order)
        return PointCloud(self.atomic_numbers[order], self.positions[order])


@dataclass(frozen=True)
class NeighborGraph:
    """Directed radius graph: edge (src j -> dst i) for every pair with 0 < d < cutoff.

    ``unit_rel[e] = (p[src] - p[dst]) / dist[e]``, the unit vector from the
    target toward the source.  Edges are sorted by (dst, src) so that all
    aggregation orders are fixed.
    """

    src: np.ndarray
    dst: np.ndarray
    dist: np.ndarray
    unit_rel: np.ndarray
    num_nodes: int
    cutoff: float = field(default=0.0)

    @property
    def num_edges(self) -> int:
        return self.src.size


def pairwise_distance(p_i, p_j) -> float:
    """Euclidean distance via the inner-product expansion.

    Clamped at zero before the square root so coincident points do not
    produce NaN from rounding.
    """
    p_i = np.asarray(p_i, dtype=np.float64)
    p_j = np.asarray(p_j, dtype=np.float64)
    squared = p_i @ p_i + p_j @ p_j - 2.0 * (p_i @ p_j)
    return float(np.sqrt(max(squared, 0.0)))


def _brute_force_pairs(positions: np.ndarray, cutoff: float):
    diff = positions[None, :, :] - positions[:, None, :]  # diff[i, j] = p_j - p_i
    dist = np.sqrt((diff * diff).sum(axis=-1))
    mask = dist < cutoff
    np.fill_diagonal(mask, False)
    dst, src = np.nonzero(mask)  # row-major: sorted by (dst, src)
    return src, dst, dist[dst, src], diff[dst, src]


def _cell_list_pairs(positions: np.ndarray, cutoff: float):
    n = positions.shape[0]
    cells = np.floor(positions / cutoff).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    for idx in range(n):
        buckets.setdefault(tuple(cells[idx]), []).append(idx)

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    src_parts, dst_parts = [], []
    for key, members in buckets.items():
        candidates = []
        for off in offsets:
            candidates.extend(buckets.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]), ()))
        cand = np.asarray(candidates, dtype=np.int64)
        mem = np.asarray(members, dtype=np.int64)
        diff = positions[cand][None, :, :] - positions[mem][:, None, :]
        dist = np.sqrt((diff * diff).sum(axis=-1))
        within = dist < cutoff
        within &= mem[:, None] != cand[None, :]
        rows, cols = np.nonzero(within)
        dst_parts.append(mem[rows])
        src_parts.append(cand[cols])
    if src_parts:
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
    else:
        src = dst = np.empty(0, dtype=np.int64)
    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    diff = positions[src] - positions[dst]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return src, dst, dist, diff


def build_radius_graph(cloud: PointCloud, cutoff: float,
                       method: str = "auto") -> NeighborGraph:
    """All directed edges with 0 < distance < cutoff, sorted by (dst, src).

    ``method`` is "auto" (cell list above CELL_LIST_THRESHOLD atoms),
    "brute", or "cell".  Coincident points inside the cutoff are an
    error: their relative direction is undefined and almost always means
    corrupt input.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if method == "auto":
        method = "cell" if cloud.size > CELL_LIST_THRESHOLD else "brute"
    if method == "brute":
        src, dst, dist, diff = _brute_force_pairs(cloud.positions, cutoff)
    elif method == "cell":
        src, dst, dist, diff = _cell_list_pairs(cloud.positions, cutoff)
    else:
        raise ValueError(f"unknown neighbor search method {method!r}")

    if np.any(dist == 0.0):
        bad = int(np.argmax(dist == 0.0))
        raise GeometryError(
            f"coincident points within cutoff: atoms {int(dst[bad])} and {int(src[bad])} "
            "share a position, so their relative direction is undefined"
        )
    unit_rel = diff / dist[:, None] if dist.size else diff.reshape(0, 3)
    return NeighborGraph(
        src=src.astype(np.int64),
        dst=dst.astype(np.int64),
        dist=dist,
        unit_rel=unit_rel,
        num_nodes=cloud.size,
        cutoff=float(cutoff),
    )


def bessel_rbf(distances, num_rbf: int, cutoff: float) -> np.ndarray:
    """Sine-over-distance radial basis, k = 1..num_rbf.

    Component k is sqrt(2/c) * sin(k pi d / c) / d; every component
    vanishes analytically at d = c.  Accepts a scalar or a vector of
    distances; returns shape (num_rbf,) or (n, num_rbf).
    """
    if num_rbf < 1:
        raise ValueError("num_rbf must be >= 1")
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distances must be positive")
    scalar = d.ndim == 0
    d = np.atleast_1d(d)
    k = np.arange(1, num_rbf + 1, dtype=np.float64)
    out = np.sqrt(2.0 / cutoff) * np.sin(np.outer(d, k) * (np.pi / cutoff)) / d[:, None]
    return out[0] if scalar else out


def cosine_cutoff(distances, cutoff: float) -> np.ndarray:
    """Smooth envelope: 1 at d = 0, 0 at d >= cutoff, monotone between."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    return 0.5 * (np.cos(np.pi * d / cutoff) + 1.0) * (d <= cutoff)
