"""Property-check utilities for rotation equivariance.

A function f on node states is equivariant when rotating its input and
then applying f gives the same result as applying f and rotating its
output.  Scalars carry the trivial action (untouched); positions and
vector channels are left-multiplied by the rotation.  Only proper
rotations are checked: the cross product inside the message function
anticommutes with reflections, so no claim is made about improper ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import PointCloud
from .layers import NodeState
from .model import Model

__all__ = [
    "random_rotation",
    "apply_rotation",
    "EquivarianceReport",
    "equivariance_check",
    "random_cloud",
    "with_vector_bias",
]


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def random_rotation(seed_or_rng=None) -> np.ndarray:
    """Uniformly distributed 3x3 proper rotation via a unit quaternion."""
    rng = _as_rng(seed_or_rng)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def apply_rotation(rotation: np.ndarray, obj):
    """Apply the group action to a cloud, node state, array, or tuple thereof.

    Scalars inside a NodeState are untouched; every geometric object is
    left-multiplied: positions and (N, 3) arrays rowwise, (N, 3, F)
    vector channels along the spatial axis, bare 3-vectors directly.
    Tuples and lists recurse elementwise.
    """
    if isinstance(obj, PointCloud):
        return PointCloud(obj.atomic_numbers, obj.positions @ rotation.T)
    if isinstance(obj, NodeState):
        return NodeState(obj.scalars, np.einsum("ab,nbf->naf", rotation, obj.vectors))
    if isinstance(obj, (tuple, list)):
        return type(obj)(apply_rotation(rotation, item) for item in obj)
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 1 and arr.shape == (3,):
        return rotation @ arr
    if arr.ndim == 2 and arr.shape[1] == 3:
        return arr @ rotation.T
    if arr.ndim == 3 and arr.shape[1] == 3:
        return np.einsum("ab,nbf->naf", rotation, arr)
    raise ValueError(f"cannot rotate object with shape {arr.shape}")


def _max_deviation(got, expected) -> float:
    if isinstance(got, (tuple, list)):
        if not isinstance(expected, (tuple, list)) or len(got) != len(expected):
            raise ValueError("equivariance check: structures differ between the two paths")
        return max(_max_deviation(g, e) for g, e in zip(got, expected))
    if isinstance(got, NodeState):
        return max(
            _max_deviation(got.scalars, expected.scalars),
            _max_deviation(got.vectors, expected.vectors),
        )
    got = np.asarray(got, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if got.shape != expected.shape:
        raise ValueError(
            f"equivariance check: shapes differ between the two paths "
            f"({got.shape} vs {expected.shape})"
        )
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - expected)))


@dataclass
class EquivarianceReport:
    trials: int
    max_deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tolerance

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "max_deviation": self.max_deviation,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def equivariance_check(f, inputs, trials: int = 50, tolerance: float = 1e-9,
                       seed=0) -> EquivarianceReport:
    """Compare f(rotate(x)) against rotate(f(x)) over random rotations.

    ``inputs`` is one input object or a sequence of them; trial t uses
    input t modulo the sequence length, with a fresh rotation each time.
    The report carries the worst componentwise deviation seen.
    """
    rng = _as_rng(seed)
    if isinstance(inputs, (PointCloud, NodeState, np.ndarray)):
        inputs = [inputs]
    inputs = list(inputs)
    worst = 0.0
    for t in range(trials):
        x = inputs[t % len(inputs)]
        rotation = random_rotation(rng)
        rotated_out = f(apply_rotation(rotation, x))
        expected = apply_rotation(rotation, f(x))
        worst = max(worst, _max_deviation(rotated_out, expected))
    return EquivarianceReport(trials=trials, max_deviation=worst, tolerance=tolerance)


def random_cloud(rng, n_atoms: int, vocabulary=(1, 6, 7, 8, 9),
                 box: float = 7.0) -> PointCloud:
    """Random structure inside a cube; box ~ 1.4x the cutoff keeps graphs dense."""
    rng = _as_rng(rng)
    numbers = rng.choice(np.asarray(vocabulary, dtype=np.int64), size=n_atoms)
    positions = rng.uniform(0.0, box, size=(n_atoms, 3))
    return PointCloud(numbers, positions)


def with_vector_bias(model: Model, seed: int = 0) -> Model:
    """Negative control: a copy whose vector value maps gain a bias term.

    A constant added to a vector channel does not rotate with the input,
    so the copy must fail the same check the real model passes.  Bias
    entries are drawn at the default weight-initialization scale.
    """
    rng = np.random.default_rng(seed)
    fv = model.config.vector_channels
    bound = 1.0 / np.sqrt(fv)
    broken = model.copy()
    for i in range(model.config.num_layers):
        name = f"layers.{i}.conv.vector_value_bias"
        broken.params[name] = ad.parameter(rng.uniform(-bound, bound, size=(3, fv)))
    return broken
