"""Convolutional additive token mixer.

The mixer replaces dot-product attention with an additive similarity
function built from cheap convolutional context maps.  Queries and keys
pass through a shared context map ``phi`` (a sequence of spatial and
channel interactions), the two results are summed, mixed by a depthwise
3x3 convolution, and the outcome gates the value projection:

    out = dw3x3(phi(Q) + phi(K)) * V

Every stage is a convolution, a pooling, or an elementwise map, so the
cost is linear in the number of pixels.  All functions accept either
plain tensors or tape nodes and work on NCHW batches.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ConfigError, ConvSpec, ShapeError, Tensor

INTERACTION_KINDS = ("spatial", "channel")
PROJECTION_KINDS = ("depthwise_1x1", "dense_1x1")

# branch layouts for the standard ablation grid: (q_branch, k_branch)
ABLATIONS = {
    "base": (("spatial", "channel"), ("spatial", "channel")),
    "no_spatial": (("channel",), ("channel",)),
    "no_channel": (("spatial",), ("spatial",)),
    "split_sc": (("spatial",), ("channel",)),
    "swapped_full": (("spatial", "channel"), ("channel", "spatial")),
}


@dataclass(frozen=True)
class InteractionConfig:
    """Branch layout and projection choice for one mixer instance.

    ``q_branch`` and ``k_branch`` list the interactions applied, in
    order, to the query and key projections.  Each entry gates the
    tensor it receives, so ("spatial", "channel") means the channel
    gate sees the spatially gated tensor.
    """

    q_branch: tuple = ("spatial", "channel")
    k_branch: tuple = ("spatial", "channel")
    projection_kind: str = "depthwise_1x1"

    def __post_init__(self):
        for label, branch in (("q_branch", self.q_branch), ("k_branch", self.k_branch)):
            if not isinstance(branch, tuple):
                object.__setattr__(self, label, tuple(branch))
                branch = getattr(self, label)
            for kind in branch:
                if kind not in INTERACTION_KINDS:
                    raise ConfigError(f"unknown interaction {kind!r} in {label}")
            if len(set(branch)) != len(branch):
                raise ConfigError(f"{label} repeats an interaction: {branch}")
        if self.projection_kind not in PROJECTION_KINDS:
            raise ConfigError(f"unknown projection kind {self.projection_kind!r}")


def make_ablation(variant, projection_kind="depthwise_1x1"):
    """Return the InteractionConfig for a named ablation row."""
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; expected one of {sorted(ABLATIONS)}")
    q_branch, k_branch = ABLATIONS[variant]
    return InteractionConfig(q_branch, k_branch, projection_kind)


@dataclass
class CatmParams:
    """Weights and normalization buffers for one mixer.

    The context map is shared between the query and key branches, so
    there is a single set of spatial/channel gate parameters.  The
    ``spatial_bn_mean`` and ``spatial_bn_var`` fields are running
    statistics, not trainable weights.
    """

    wq_w: object
    wq_b: object
    wk_w: object
    wk_b: object
    wv_w: object
    wv_b: object
    spatial_dw_w: object
    spatial_bn_gamma: object
    spatial_bn_beta: object
    spatial_bn_mean: object
    spatial_bn_var: object
    spatial_pw_w: object
    spatial_pw_b: object
    channel_dw_w: object
    channel_dw_b: object
    gamma_dw_w: object
    gamma_dw_b: object

    BUFFER_FIELDS = ("spatial_bn_mean", "spatial_bn_var")

    # field name -> dotted key used in flat parameter dicts
    FLAT_KEYS = {
        "wq_w": "wq.w",
        "wq_b": "wq.b",
        "wk_w": "wk.w",
        "wk_b": "wk.b",
        "wv_w": "wv.w",
        "wv_b": "wv.b",
        "spatial_dw_w": "spatial.dw.w",
        "spatial_bn_gamma": "spatial.bn.gamma",
        "spatial_bn_beta": "spatial.bn.beta",
        "spatial_bn_mean": "spatial.bn.mean",
        "spatial_bn_var": "spatial.bn.var",
        "spatial_pw_w": "spatial.pw.w",
        "spatial_pw_b": "spatial.pw.b",
        "channel_dw_w": "channel.dw.w",
        "channel_dw_b": "channel.dw.b",
        "gamma_dw_w": "gamma.dw.w",
        "gamma_dw_b": "gamma.dw.b",
    }

    def weights(self):
        """Trainable fields as an ordered name -> value dict."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name not in self.BUFFER_FIELDS:
                out[f.name] = getattr(self, f.name)
        return out

    def buffers(self):
        return {name: getattr(self, name) for name in self.BUFFER_FIELDS}

    def to_flat(self, prefix=""):
        """Split into (weights, buffers) dicts keyed by dotted names."""
        weights, buffers = {}, {}
        for f in dataclasses.fields(self):
            key = prefix + self.FLAT_KEYS[f.name]
            (buffers if f.name in self.BUFFER_FIELDS else weights)[key] = getattr(self, f.name)
        return weights, buffers

    @classmethod
    def from_flat(cls, mapping, prefix=""):
        kw = {}
        for f in dataclasses.fields(cls):
            key = prefix + cls.FLAT_KEYS[f.name]
            if key not in mapping:
                raise ConfigError(f"missing mixer parameter {key!r}")
            kw[f.name] = mapping[key]
        return cls(**kw)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _trunc_normal(rng, shape, std, dtype):
    z = rng.standard_normal(shape)
    for _ in range(64):
        bad = np.abs(z) > 2.0
        if not bad.any():
            break
        z[bad] = rng.standard_normal(int(bad.sum()))
    return Tensor(np.asarray(z * std, dtype=dtype))


def init_catm_params(rng, channels, config=None, dtype=np.float32, std=0.02):
    """Freshly initialized mixer parameters for ``channels`` planes.

    Convolution weights draw from a truncated normal (resampled beyond
    two standard deviations), biases start at zero, and normalization
    starts as the identity map.
    """
    config = config or InteractionConfig()
    c = int(channels)
    if c <= 0:
        raise ConfigError("channels must be positive")

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=dtype))

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=dtype))

    if config.projection_kind == "dense_1x1":
        proj_shape = (c, c, 1, 1)
    else:
        proj_shape = (c, 1, 1, 1)
    return CatmParams(
        wq_w=_trunc_normal(rng, proj_shape, std, dtype),
        wq_b=zeros(c),
        wk_w=_trunc_normal(rng, proj_shape, std, dtype),
        wk_b=zeros(c),
        wv_w=_trunc_normal(rng, proj_shape, std, dtype),
        wv_b=zeros(c),
        spatial_dw_w=_trunc_normal(rng, (c, 1, 3, 3), std, dtype),
        spatial_bn_gamma=ones(c),
        spatial_bn_beta=zeros(c),
        spatial_bn_mean=zeros(c),
        spatial_bn_var=ones(c),
        spatial_pw_w=_trunc_normal(rng, (1, c, 1, 1), std, dtype),
        spatial_pw_b=zeros(1),
        channel_dw_w=_trunc_normal(rng, (c, 1, 1, 1), std, dtype),
        channel_dw_b=zeros(c),
        gamma_dw_w=_trunc_normal(rng, (c, 1, 3, 3), std, dtype),
        gamma_dw_b=zeros(c),
    )


def _channels(x):
    shape = ops.value_of(x).shape
    if len(shape) != 4:
        raise ShapeError(f"expected NCHW input, got shape {shape}")
    return shape[1]


def spatial_gate(x, p, *, train=False, pad_mode="zeros", eps=1e-5):
    """Per-pixel gate in (0, 1): sigmoid of a pixel-scoring subnetwork.

    A depthwise 3x3 gathers local context, normalization and ReLU shape
    it, and a pointwise projection collapses channels to a single score
    map of shape [B, 1, H, W].
    """
    c = _channels(x)
    t = ops.conv2d(x, p.spatial_dw_w, None,
                   spec=ConvSpec((3, 3), padding=(1, 1), groups=c, pad_mode=pad_mode))
    t = ops.batchnorm2d(t, p.spatial_bn_gamma, p.spatial_bn_beta,
                        p.spatial_bn_mean, p.spatial_bn_var, training=train, eps=eps)
    t = ops.relu(t)
    score = ops.conv2d(t, p.spatial_pw_w, p.spatial_pw_b, spec=ConvSpec((1, 1)))
    return ops.sigmoid(score)


def spatial_interaction(x, p, *, train=False, pad_mode="zeros", eps=1e-5):
    """x scaled by its spatial gate; the map broadcasts over channels."""
    with ops.scope_for("spatial", x):
        gate = spatial_gate(x, p, train=train, pad_mode=pad_mode, eps=eps)
        return ops.mul(x, gate)


def channel_gate(x, p):
    """Per-channel gate in (0, 1) of shape [B, C, 1, 1].

    Global average pooling summarizes each channel and a depthwise 1x1
    rescales the summary before the sigmoid.
    """
    c = _channels(x)
    pooled = ops.global_avg_pool(x)
    score = ops.conv2d(pooled, p.channel_dw_w, p.channel_dw_b,
                       spec=ConvSpec((1, 1), groups=c))
    return ops.sigmoid(score)


def channel_interaction(x, p):
    """x scaled by its channel gate; the map broadcasts over pixels."""
    with ops.scope_for("channel", x):
        gate = channel_gate(x, p)
        return ops.mul(x, gate)


def context_map_phi(x, p, order=("spatial", "channel"), *, train=False,
                    pad_mode="zeros", eps=1e-5):
    """Apply the listed interactions in sequence.

    Each interaction gates the tensor produced by the previous one, so
    the order matters: ("spatial", "channel") feeds the spatially gated
    tensor into the channel gate.
    """
    with ops.scope_for("phi", x):
        out = x
        for kind in order:
            if kind == "spatial":
                out = spatial_interaction(out, p, train=train, pad_mode=pad_mode, eps=eps)
            elif kind == "channel":
                out = channel_interaction(out, p)
            else:
                raise ConfigError(f"unknown interaction {kind!r}")
        return out


def _projection_spec(kind, c):
    if kind == "dense_1x1":
        return ConvSpec((1, 1))
    return ConvSpec((1, 1), groups=c)


def catm_forward(x, p, config=None, *, train=False, pad_mode="zeros", eps=1e-5):
    """Mix tokens additively: dw3x3(phi(Q) + phi(K)) * V.

    Q, K and V come from independent 1x1 projections of ``x``; the
    context map parameters are shared between the Q and K branches.
    Output shape equals input shape.
    """
    config = config or InteractionConfig()
    c = _channels(x)
    spec = _projection_spec(config.projection_kind, c)
    with ops.scope_for("catm", x):
        with ops.scope_for("proj", x):
            q = ops.conv2d(x, p.wq_w, p.wq_b, spec=spec)
            k = ops.conv2d(x, p.wk_w, p.wk_b, spec=spec)
            v = ops.conv2d(x, p.wv_w, p.wv_b, spec=spec)
        phi_q = context_map_phi(q, p, config.q_branch, train=train,
                                pad_mode=pad_mode, eps=eps)
        phi_k = context_map_phi(k, p, config.k_branch, train=train,
                                pad_mode=pad_mode, eps=eps)
        summed = ops.add(phi_q, phi_k)
        with ops.scope_for("gamma", x):
            mixed = ops.conv2d(summed, p.gamma_dw_w, p.gamma_dw_b,
                               spec=ConvSpec((3, 3), padding=(1, 1), groups=c,
                                             pad_mode=pad_mode))
        return ops.mul(mixed, v)
