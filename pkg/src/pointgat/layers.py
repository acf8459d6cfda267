"""One attention convolution block over paired scalar/vector node features.

A node state is a tuple (s, v): s holds rotation-invariant channels of
width ``scalar_channels``, v holds 3-vector channels of shape
(3, vector_channels) that rotate with the input cloud.  Each block runs

    layer norm -> attention convolution -> residual add -> gated update

All maps applied to v are linear along the channel axis and carry no
bias: adding a constant to a vector channel would survive rotation on
one side of the equivariance identity and break it.

Weights are stored (in_dim, out_dim) and applied as ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .geometry import NeighborGraph, bessel_rbf, cosine_cutoff

__all__ = [
    "NodeState",
    "EdgeData",
    "VECTOR_EPS",
    "edge_embedding",
    "query_key",
    "feature_attention",
    "value_transform",
    "equivariant_messages",
    "aggregate",
    "residual_update",
    "gated_update",
    "gated_block",
    "scalar_vector_norm",
    "attention_conv",
    "block_forward",
]

# vector features start at exactly zero, so every norm goes through the
# softened form sqrt(sum v^2 + eps^2) to keep gradients finite there
VECTOR_EPS = 1e-8

# inside the scalar layer norm's square root
NORM_EPS = 1e-12


@dataclass
class NodeState:
    """Plain-numpy snapshot of per-node features: s (N, F_s), v (N, 3, F_v)."""

    scalars: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        self.scalars = np.asarray(self.scalars, dtype=np.float64)
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.scalars.ndim != 2 or self.vectors.ndim != 3 or self.vectors.shape[1] != 3:
            raise ValueError(
                f"expected scalars (N, F_s) and vectors (N, 3, F_v), "
                f"got {self.scalars.shape} and {self.vectors.shape}"
            )
        if self.scalars.shape[0] != self.vectors.shape[0]:
            raise ValueError("scalars and vectors disagree on node count")

    @property
    def num_nodes(self) -> int:
        return self.scalars.shape[0]


@dataclass
class EdgeData:
    """Radius-graph featurization pre-wrapped as untracked constants.

    Built once per structure and reused across layers and epochs; the
    radial features and the cutoff envelope depend only on geometry.
    """

    src: np.ndarray
    dst: np.ndarray
    num_nodes: int
    rbf: DiffArray
    kappa: DiffArray
    unit_rel: DiffArray

    @classmethod
    def from_graph(cls, graph: NeighborGraph, num_rbf: int, cutoff: float) -> "EdgeData":
        rbf = (bessel_rbf(graph.dist, num_rbf, cutoff)
               if graph.num_edges else np.zeros((0, num_rbf)))
        return cls(
            src=graph.src,
            dst=graph.dst,
            num_nodes=graph.num_nodes,
            rbf=ad.constant(rbf),
            kappa=ad.constant(cosine_cutoff(graph.dist, cutoff)),
            unit_rel=ad.constant(graph.unit_rel),
        )


# --------------------------------------------------------------------------
# initialization

def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_norm(prefix: str, fs: int) -> dict[str, DiffArray]:
    return {
        prefix + "norm.scale": ad.parameter(np.ones(fs)),
        prefix + "norm.shift": ad.parameter(np.zeros(fs)),
    }


def init_attention_conv(rng, prefix: str, fs: int, fv: int, num_rbf: int) -> dict[str, DiffArray]:
    wide = fs + 2 * fv
    p = {
        prefix + "conv.edge_weight": _uniform(rng, num_rbf, (num_rbf, fs)),
        prefix + "conv.edge_bias": np.zeros(fs),
        prefix + "conv.query_weight": _uniform(rng, fs, (fs, fs)),
        prefix + "conv.query_bias": np.zeros(fs),
        prefix + "conv.key_weight": _uniform(rng, fs, (fs, fs)),
        prefix + "conv.key_bias": np.zeros(fs),
        prefix + "conv.attn_weight": _uniform(rng, fs, (fs, wide)),
        prefix + "conv.scalar_value_weight": _uniform(rng, fs, (fs, wide)),
        prefix + "conv.scalar_value_bias": np.zeros(wide),
        prefix + "conv.vector_value_weight": _uniform(rng, fv, (fv, fv)),
    }
    return {name: ad.parameter(v) for name, v in p.items()}


def init_gated_update(rng, prefix: str, fs: int, fv: int) -> dict[str, DiffArray]:
    hidden = fs + fv
    p = {
        prefix + "update.mix_weight": _uniform(rng, fv, (fv, fv)),
        prefix + "update.norm_weight": _uniform(rng, fv, (fv, fv)),
        prefix + "update.mlp1_weight": _uniform(rng, fs + fv, (fs + fv, hidden)),
        prefix + "update.mlp1_bias": np.zeros(hidden),
        prefix + "update.mlp2_weight": _uniform(rng, hidden, (hidden, fs + 2 * fv)),
        prefix + "update.mlp2_bias": np.zeros(fs + 2 * fv),
    }
    return {name: ad.parameter(v) for name, v in p.items()}


def init_gated_block(rng, prefix: str, s_in: int, v_in: int,
                     s_out: int, v_out: int) -> dict[str, DiffArray]:
    hidden = s_in
    p = {
        prefix + "mix_weight": _uniform(rng, v_in, (v_in, v_out)),
        prefix + "norm_weight": _uniform(rng, v_in, (v_in, v_out)),
        prefix + "mlp1_weight": _uniform(rng, s_in + v_out, (s_in + v_out, hidden)),
        prefix + "mlp1_bias": np.zeros(hidden),
        prefix + "mlp2_weight": _uniform(rng, hidden, (hidden, s_out + 2 * v_out)),
        prefix + "mlp2_bias": np.zeros(s_out + 2 * v_out),
    }
    return {name: ad.parameter(v) for name, v in p.items()}


def init_block(rng, prefix: str, fs: int, fv: int, num_rbf: int) -> dict[str, DiffArray]:
    params = init_norm(prefix, fs)
    params.update(init_attention_conv(rng, prefix, fs, fv, num_rbf))
    params.update(init_gated_update(rng, prefix, fs, fv))
    return params


# --------------------------------------------------------------------------
# operations

def edge_embedding(rbf, kappa, weight, bias) -> DiffArray:
    """Learned radial filter, damped to zero at the cutoff.

    rbf (E, K) and kappa (E,) are untracked geometry; weight (K, F_s) and
    bias (F_s,) are the trainable filter.
    """
    filt = ad.matmul(rbf, weight) + bias
    return filt * ad.expand(kappa, axis=1)


def query_key(s_dst, s_src, query_weight, query_bias, key_weight, key_bias):
    """Affine query/key embeddings of the target and source scalars."""
    q = ad.matmul(s_dst, query_weight) + query_bias
    k = ad.matmul(s_src, key_weight) + key_bias
    return q, k


def feature_attention(q_dst, k_src, edge_emb, attn_weight, dst, num_nodes: int,
                      fs: int, fv: int):
    """Per-channel attention and the two vector-filter gates.

    The raw per-edge embedding q * k * e is projected (no bias) to
    F_s + 2 F_v channels and split into attention logits and two gates.
    Attention is a sigmoid numerator normalized over each target node's
    incoming edges, channelwise, so every channel's coefficients sum to
    one over the neighborhood.
    """
    raw = q_dst * k_src * edge_emb
    projected = ad.matmul(raw, attn_weight)
    logits, dir_gate, mix_gate = ad.split(projected, [fs, fv, fv], axis=1)
    numer = ad.sigmoid(logits)
    denom = ad.scatter_add(numer, dst, num_nodes)
    alpha = numer / ad.gather(denom, dst)
    return alpha, dir_gate, mix_gate


def value_transform(s, v, scalar_value_weight, scalar_value_bias,
                    vector_value_weight, fs: int, fv: int, vector_value_bias=None):
    """Pointwise value tensors for the scalar and vector channels.

    The scalar branch produces F_s + 2 F_v outputs, split into the scalar
    value and the two channel vectors that later gate the equivariant
    messages.  The vector branch is a bias-free channel mix; the optional
    ``vector_value_bias`` exists only so the test harness can prove that
    adding one breaks rotation equivariance.
    """
    wide = ad.matmul(s, scalar_value_weight) + scalar_value_bias
    scalar_value, dir_value, mix_value = ad.split(wide, [fs, fv, fv], axis=1)
    vector_value = ad.matmul(v, vector_value_weight)
    if vector_value_bias is not None:
        vector_value = vector_value + vector_value_bias
    return scalar_value, dir_value, mix_value, vector_value


def equivariant_messages(unit_rel, dir_msg, mix_msg, v_src, v_dst, vector_value_src):
    """Per-edge vector messages (each (E, 3, F_v)).

    The directional part lifts the invariant channel vector onto the edge
    direction by outer product.  The mixing part gates, channel by
    channel, the cross product of source and target vector features plus
    the transformed source vectors; the cross product commutes with
    proper rotations, so both parts rotate with the input.
    """
    directional = ad.expand(unit_rel, axis=2) * ad.expand(dir_msg, axis=1)
    mixed = ad.cross(v_src, v_dst, axis=1) + vector_value_src
    gated = ad.expand(mix_msg, axis=1) * mixed
    return directional, gated


def aggregate(alpha, scalar_value_src, directional, gated, dst, num_nodes: int):
    """Sum per-edge messages onto their target nodes, in edge order."""
    scalar_messages = alpha * scalar_value_src
    m_s = ad.scatter_add(scalar_messages, dst, num_nodes)
    m_v = ad.scatter_add(directional + gated, dst, num_nodes)
    return m_s, m_v


def residual_update(s, v, m_s, m_v):
    return s + m_s, v + m_v


def attention_conv(params: dict, prefix: str, s, v, edges: EdgeData,
                   fs: int, fv: int):
    """Full message-passing convolution; returns the aggregated messages."""
    edge = edge_embedding(edges.rbf, edges.kappa,
                          params[prefix + "conv.edge_weight"],
                          params[prefix + "conv.edge_bias"])
    q, k = query_key(s, s,
                     params[prefix + "conv.query_weight"],
                     params[prefix + "conv.query_bias"],
                     params[prefix + "conv.key_weight"],
                     params[prefix + "conv.key_bias"])
    q_dst = ad.gather(q, edges.dst)
    k_src = ad.gather(k, edges.src)
    alpha, dir_gate, mix_gate = feature_attention(
        q_dst, k_src, edge, params[prefix + "conv.attn_weight"],
        edges.dst, edges.num_nodes, fs, fv)

    scalar_value, dir_value, mix_value, vector_value = value_transform(
        s, v,
        params[prefix + "conv.scalar_value_weight"],
        params[prefix + "conv.scalar_value_bias"],
        params[prefix + "conv.vector_value_weight"],
        fs, fv,
        vector_value_bias=params.get(prefix + "conv.vector_value_bias"),
    )
    dir_msg = dir_gate * ad.gather(dir_value, edges.src)
    mix_msg = mix_gate * ad.gather(mix_value, edges.src)
    directional, gated = equivariant_messages(
        edges.unit_rel, dir_msg, mix_msg,
        ad.gather(v, edges.src), ad.gather(v, edges.dst),
        ad.gather(vector_value, edges.src))
    return aggregate(alpha, ad.gather(scalar_value, edges.src),
                     directional, gated, edges.dst, edges.num_nodes)


def _add_into_leading_channels(base, extra, base_width: int, extra_width: int):
    """Add ``extra`` onto the first channels of ``base``.

    The gated inner products carry one value per vector channel while the
    scalar track is usually wider, so the sum lands in the leading
    min(width) scalar channels and the rest pass through unchanged.
    """
    if base_width == extra_width:
        return base + extra
    k = min(base_width, extra_width)
    if extra_width > k:
        extra = ad.split(extra, [k, extra_width - k], axis=1)[0]
    head, tail = ad.split(base, [k, base_width - k], axis=1)
    return ad.concat([head + extra, tail], axis=1)


def gated_update(params: dict, prefix: str, s, v, fs: int, fv: int):
    """Residual pointwise update mixing vector norms into the scalars.

    Two bias-free channel mixes of v feed an invariant stack
    [s ; ||norm columns||] through a two-layer MLP whose output splits
    into a scalar shift, a gate on the per-channel inner products, and a
    gate on the mixed vectors.
    """
    mixed = ad.matmul(v, params[prefix + "update.mix_weight"])
    probe = ad.matmul(v, params[prefix + "update.norm_weight"])
    norms = ad.safe_norm(probe, axis=1, eps=VECTOR_EPS)
    hidden = ad.silu(ad.matmul(ad.concat([s, norms], axis=1),
                               params[prefix + "update.mlp1_weight"])
                     + params[prefix + "update.mlp1_bias"])
    out = ad.matmul(hidden, params[prefix + "update.mlp2_weight"]) \
        + params[prefix + "update.mlp2_bias"]
    scalar_shift, scalar_gate, vector_gate = ad.split(out, [fs, fv, fv], axis=1)
    inner = ad.sum_reduce(mixed * probe, axis=1)
    s_out = _add_into_leading_channels(s + scalar_shift, scalar_gate * inner, fs, fv)
    v_out = v + mixed * ad.expand(vector_gate, axis=1)
    return s_out, v_out


def gated_block(params: dict, prefix: str, s, v, s_in: int, v_in: int,
                s_out: int, v_out: int):
    """Non-residual gated block used by readout heads; may change widths."""
    mixed = ad.matmul(v, params[prefix + "mix_weight"])
    probe = ad.matmul(v, params[prefix + "norm_weight"])
    norms = ad.safe_norm(probe, axis=1, eps=VECTOR_EPS)
    hidden = ad.silu(ad.matmul(ad.concat([s, norms], axis=1),
                               params[prefix + "mlp1_weight"])
                     + params[prefix + "mlp1_bias"])
    out = ad.matmul(hidden, params[prefix + "mlp2_weight"]) + params[prefix + "mlp2_bias"]
    scalar_out, scalar_gate, vector_gate = ad.split(out, [s_out, v_out, v_out], axis=1)
    inner = ad.sum_reduce(mixed * probe, axis=1)
    scalars = _add_into_leading_channels(scalar_out, scalar_gate * inner, s_out, v_out)
    return scalars, mixed * ad.expand(vector_gate, axis=1)


def scalar_vector_norm(s, v, scale, shift, fv: int):
    """Layer normalization adapted to the paired representation.

    Scalars get the standard channelwise normalization with a learned
    affine.  Vectors are divided by the root mean square of their safe
    channel norms; no centering and no shift, which would break
    equivariance.
    """
    fs = s.shape[1]
    mean = ad.expand(ad.sum_reduce(s, axis=1) * (1.0 / fs), axis=1)
    centered = s - mean
    var = ad.sum_reduce(centered * centered, axis=1) * (1.0 / fs)
    std = ad.expand(ad.sqrt(var + ad.constant(NORM_EPS)), axis=1)
    s_out = (centered / std) * scale + shift

    norms = ad.safe_norm(v, axis=1, eps=VECTOR_EPS)
    mean_sq = ad.sum_reduce(norms * norms, axis=1) * (1.0 / fv)
    rms = ad.expand(ad.expand(ad.sqrt(mean_sq), axis=1), axis=1)
    return s_out, v / rms


def block_forward(params: dict, prefix: str, s, v, edges: EdgeData,
                  fs: int, fv: int):
    """One full block: norm, attention conv, residual, gated update."""
    s, v = scalar_vector_norm(s, v, params[prefix + "norm.scale"],
                              params[prefix + "norm.shift"], fv)
    m_s, m_v = attention_conv(params, prefix, s, v, edges, fs, fv)
    s, v = residual_update(s, v, m_s, m_v)
    return gated_update(params, prefix, s, v, fs, fv)
