"""Encoder stack, readout heads, checkpoint IO, and parameter accounting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import DiffArray
from .errors import CheckpointError, ConfigError, VocabularyError
from .geometry import NeighborGraph, PointCloud, build_radius_graph
from .layers import NodeState

__all__ = [
    "HEAD_KINDS",
    "EncoderConfig",
    "ModelOutput",
    "Model",
    "sum_nodes",
    "lba_combine",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT_VERSION",
]

HEAD_KINDS = ("sum-pool-scalar", "mean-pool-scalar", "lba-geometric")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    """Architectural hyperparameters of the encoder plus the head choice."""

    num_layers: int = 7
    scalar_channels: int = 128
    vector_channels: int = 32
    rbf_count: int = 20
    cutoff: float = 5.0
    vocabulary: tuple[int, ...] = (1, 6, 7, 8, 9)
    head: str = "sum-pool-scalar"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        # the scalar layer norm needs at least two channels to have a variance
        if self.scalar_channels < 2:
            raise ConfigError("scalar_channels must be >= 2")
        if self.vector_channels < 1:
            raise ConfigError("vector_channels must be >= 1")
        if self.rbf_count < 1:
            raise ConfigError("rbf_count must be >= 1")
        if self.cutoff <= 0:
            raise ConfigError("cutoff must be positive")
        vocab = tuple(int(z) for z in self.vocabulary)
        if not vocab or any(z < 1 for z in vocab) or len(set(vocab)) != len(vocab):
            raise ConfigError("vocabulary must be distinct atomic numbers >= 1")
        object.__setattr__(self, "vocabulary", vocab)
        if self.head not in HEAD_KINDS:
            raise ConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "scalar_channels": self.scalar_channels,
            "vector_channels": self.vector_channels,
            "rbf_count": self.rbf_count,
            "cutoff": self.cutoff,
            "vocabulary": list(self.vocabulary),
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        known = {
            "num_layers", "scalar_channels", "vector_channels",
            "rbf_count", "cutoff", "vocabulary", "head",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        coerced = dict(data)
        if "vocabulary" in coerced:
            coerced["vocabulary"] = tuple(coerced["vocabulary"])
        return cls(**coerced)


@dataclass
class ModelOutput:
    """Final per-node states plus the pooled scalar prediction."""

    states: NodeState
    prediction: float


@dataclass
class PreparedGraph:
    """Geometry featurization cached per structure (reused every epoch)."""

    cloud: PointCloud
    graph: NeighborGraph
    edges: layers.EdgeData
    indices: np.ndarray  # vocabulary row per atom


# --------------------------------------------------------------------------
# parameter construction

def _init_params(config: EncoderConfig, seed: int) -> dict[str, DiffArray]:
    rng = np.random.default_rng(seed)
    fs, fv = config.scalar_channels, config.vector_channels
    params: dict[str, DiffArray] = {
        "embedding.table": ad.parameter(
            rng.uniform(-1.0, 1.0, size=(len(config.vocabulary), fs))
        )
    }
    for i in range(config.num_layers):
        params.update(layers.init_block(rng, f"layers.{i}.", fs, fv, config.rbf_count))
    params.update(_init_head(rng, config))
    return params


def _init_head(rng, config: EncoderConfig) -> dict[str, DiffArray]:
    fs, fv = config.scalar_channels, config.vector_channels
    kind = config.head
    if kind == "sum-pool-scalar":
        p = {
            "head.mlp1_weight": layers._uniform(rng, fs, (fs, fs)),
            "head.mlp1_bias": np.zeros(fs),
            "head.mlp2_weight": layers._uniform(rng, fs, (fs, 1)),
            "head.mlp2_bias": np.zeros(1),
        }
        return {k: ad.parameter(v) for k, v in p.items()}
    if kind == "mean-pool-scalar":
        params = layers.init_gated_block(rng, "head.gated.", fs, fv, fs, fv)
        hidden = max(fs // 2, 1)
        p = {
            "head.mlp1_weight": layers._uniform(rng, fs, (fs, hidden)),
            "head.mlp1_bias": np.zeros(hidden),
            "head.mlp2_weight": layers._uniform(rng, hidden, (hidden, 1)),
            "head.mlp2_bias": np.zeros(1),
        }
        params.update({k: ad.parameter(v) for k, v in p.items()})
        return params
    # lba-geometric: two gated blocks narrowing to one scalar and one vector
    s_mid, v_mid = max(fs // 2, 1), max(fv // 2, 1)
    params = layers.init_gated_block(rng, "head.gated1.", fs, fv, s_mid, v_mid)
    params.update(layers.init_gated_block(rng, "head.gated2.", s_mid, v_mid, 1, 1))
    return params


# --------------------------------------------------------------------------
# readout heads

def sum_nodes(s) -> DiffArray:
    """Permutation-invariant graph embedding: plain sum over nodes."""
    return ad.sum_reduce(s, axis=0)


def _mlp2(x, params: dict, prefix: str) -> DiffArray:
    hidden = ad.silu(ad.matmul(x, params[prefix + "mlp1_weight"]) + params[prefix + "mlp1_bias"])
    return ad.matmul(hidden, params[prefix + "mlp2_weight"]) + params[prefix + "mlp2_bias"]


def sum_pool_readout(s, params: dict) -> DiffArray:
    """Sum node scalars, then a two-layer MLP down to one number."""
    pooled = ad.expand(sum_nodes(s), axis=0)  # (1, F_s)
    return ad.sum_reduce(_mlp2(pooled, params, "head."))


def mean_pool_readout(s, v, params: dict, fs: int, fv: int) -> DiffArray:
    """Gated block per node, mean-pool the scalar outputs, then an MLP."""
    s_out, _ = layers.gated_block(params, "head.gated.", s, v, fs, fv, fs, fv)
    n = s_out.shape[0]
    pooled = ad.expand(ad.sum_reduce(s_out, axis=0) * (1.0 / n), axis=0)
    return ad.sum_reduce(_mlp2(pooled, params, "head."))


def lba_combine(scalar_per_node, vector_per_node, centered_positions) -> DiffArray:
    """Sum over nodes of the squared norm of (scalar * position + vector).

    The combined vector rotates with the cloud, so its norm is invariant.
    """
    combined = scalar_per_node * centered_positions + vector_per_node
    return ad.sum_reduce(combined * combined)


def lba_readout(s, v, positions: np.ndarray, params: dict, fs: int, fv: int) -> DiffArray:
    """Geometric head for binding-style targets; requires centered positions."""
    centroid_norm = float(np.linalg.norm(np.asarray(positions).mean(axis=0)))
    if centroid_norm > 1e-8:
        raise ValueError(
            f"positions are not centered (|mean| = {centroid_norm:.3e}); "
            "subtract the centroid before calling lba_readout"
        )
    s_mid, v_mid = max(fs // 2, 1), max(fv // 2, 1)
    s1, v1 = layers.gated_block(params, "head.gated1.", s, v, fs, fv, s_mid, v_mid)
    s2, v2 = layers.gated_block(params, "head.gated2.", s1, v1, s_mid, v_mid, 1, 1)
    vector = ad.sum_reduce(v2, axis=2)  # drop the single channel: (N, 3)
    return lba_combine(s2, vector, ad.constant(positions))


# --------------------------------------------------------------------------
# model

class Model:
    """Encoder stack plus readout head over one flat parameter dict."""

    def __init__(self, config: EncoderConfig, params: dict[str, DiffArray]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: EncoderConfig, seed: int = 0) -> "Model":
        return cls(config, _init_params(config, seed))

    # -- geometry featurization ------------------------------------------------
    def vocabulary_indices(self, atomic_numbers: np.ndarray) -> np.ndarray:
        lookup = {z: i for i, z in enumerate(self.config.vocabulary)}
        indices = np.empty(len(atomic_numbers), dtype=np.int64)
        for pos, z in enumerate(atomic_numbers):
            row = lookup.get(int(z))
            if row is None:
                raise VocabularyError(
                    f"atomic number {int(z)} not in vocabulary {self.config.vocabulary}"
                )
            indices[pos] = row
        return indices

    def prepare(self, cloud: PointCloud, graph: NeighborGraph | None = None) -> PreparedGraph:
        if graph is None:
            graph = build_radius_graph(cloud, self.config.cutoff)
        edges = layers.EdgeData.from_graph(graph, self.config.rbf_count, self.config.cutoff)
        return PreparedGraph(cloud, graph, edges,
                             self.vocabulary_indices(cloud.atomic_numbers))

    # -- forward passes ---------------------------------------------------------
    def node_states(self, prepared: PreparedGraph | PointCloud):
        """Differentiable encoder pass; returns (s, v) DiffArrays."""
        if isinstance(prepared, PointCloud):
            prepared = self.prepare(prepared)
        cfg = self.config
        fs, fv = cfg.scalar_channels, cfg.vector_channels
        s = ad.gather(self.params["embedding.table"], prepared.indices)
        v = ad.constant(np.zeros((prepared.cloud.size, 3, fv)))
        for i in range(cfg.num_layers):
            s, v = layers.block_forward(self.params, f"layers.{i}.", s, v,
                                        prepared.edges, fs, fv)
        return s, v

    def predict_diff(self, prepared: PreparedGraph | PointCloud) -> DiffArray:
        """Differentiable scalar prediction for one structure."""
        if isinstance(prepared, PointCloud):
            prepared = self.prepare(prepared)
        s, v = self.node_states(prepared)
        cfg = self.config
        if cfg.head == "sum-pool-scalar":
            return sum_pool_readout(s, self.params)
        if cfg.head == "mean-pool-scalar":
            return mean_pool_readout(s, v, self.params,
                                     cfg.scalar_channels, cfg.vector_channels)
        positions = prepared.cloud.positions
        centered = positions - positions.mean(axis=0)
        return lba_readout(s, v, centered, self.params,
                           cfg.scalar_channels, cfg.vector_channels)

    def forward(self, cloud: PointCloud, graph: NeighborGraph | None = None) -> ModelOutput:
        """Inference pass returning numpy states and the prediction."""
        prepared = self.prepare(cloud, graph)
        s, v = self.node_states(prepared)
        states = NodeState(s.numpy(), v.numpy())
        cfg = self.config
        if cfg.head == "sum-pool-scalar":
            pred = sum_pool_readout(s, self.params)
        elif cfg.head == "mean-pool-scalar":
            pred = mean_pool_readout(s, v, self.params,
                                     cfg.scalar_channels, cfg.vector_channels)
        else:
            positions = cloud.positions
            centered = positions - positions.mean(axis=0)
            pred = lba_readout(s, v, centered, self.params,
                               cfg.scalar_channels, cfg.vector_channels)
        return ModelOutput(states, float(pred.values))

    # -- bookkeeping --------------------------------------------------------------
    def parameter_count(self) -> dict:
        """Trainable-parameter totals grouped by module."""
        groups: dict[str, int] = {"embedding": 0, "head": 0}
        per_layer = [0] * self.config.num_layers
        for name, arr in self.params.items():
            size = arr.size
            if name.startswith("embedding."):
                groups["embedding"] += size
            elif name.startswith("head."):
                groups["head"] += size
            elif name.startswith("layers."):
                per_layer[int(name.split(".")[1])] += size
        total = groups["embedding"] + groups["head"] + sum(per_layer)
        return {
            "total": total,
            "embedding": groups["embedding"],
            "layers": sum(per_layer),
            "per_layer": per_layer,
            "head": groups["head"],
        }

    def copy(self) -> "Model":
        params = {name: ad.parameter(arr.values) for name, arr in self.params.items()}
        return Model(self.config, params)


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: Model, seed: int = 0, step: int = 0,
                    extra: dict | None = None) -> None:
    """Write the model as one JSON document.

    Floats serialize through Python's repr, which round-trips every
    float64 bit-exactly (shortest decimal form, never more than 17
    significant digits).
    """
    config = {"model": model.config.to_dict()}
    if extra:
        config.update(extra)
    document = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config,
        "seed": seed,
        "step": step,
        "params": {
            name: {"shape": list(arr.shape), "values": arr.values.reshape(-1).tolist()}
            for name, arr in sorted(model.params.items())
        },
    }
    Path(path).write_text(json.dumps(document))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Read a checkpoint; returns the model and the header fields."""
    try:
        document = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    try:
        version = document["format_version"]
        if version != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format_version {version}")
        config = EncoderConfig.from_dict(document["config"]["model"])
        params = {}
        for name, entry in document["params"].items():
            values = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
            params[name] = ad.parameter(values)
        model = Model(config, params)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from None
    reference = _init_params(config, 0)
    if set(params) != set(reference):
        missing = sorted(set(reference) - set(params))[:3]
        surplus = sorted(set(params) - set(reference))[:3]
        raise CheckpointError(
            f"checkpoint parameters do not match the config "
            f"(missing {missing}, unexpected {surplus})"
        )
    for name, ref in reference.items():
        if params[name].shape != ref.shape:
            raise CheckpointError(
                f"checkpoint parameter {name} has shape {params[name].shape}, "
                f"expected {ref.shape}"
            )
    header = {
        "format_version": version,
        "config": document["config"],
        "seed": document.get("seed", 0),
        "step": document.get("step", 0),
    }
    return model, header
