"""Four-stage convolutional backbone built around the additive mixer.

A model is a plain config plus two flat dicts: ``weights`` (trainable
tensors) and ``buffers`` (normalization statistics).  Keys are dotted
paths like ``stages.0.blocks.1.mlp.fc1.w``; every forward function
reads a prefix view of that dict, so the same code runs pure (on
tensors) or taped (on nodes) without modification.

Stage layout: a two-conv downsampling stem (total stride 4), four
stages of residual blocks with stride-2 embeddings between them, and a
pooled classifier head.  Input height and width must be divisible by
32.  Each block chains three residual sub-layers:

    x = x + integration(x)          local depthwise stack
    x = x + mixer(norm(x))          token mixing (additive by default)
    x = x + mlp(norm(x))            pointwise expansion
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, fields

import numpy as np

from . import ops
from .catm import CatmParams, InteractionConfig, catm_forward, init_catm_params
from .mixers import msa_forward, pool_mixer, separable_attention, swift_attention
from .tensor import ConfigError, ConvSpec, ShapeError, Tensor

MIXER_KINDS = ("catm", "pool", "msa", "separable", "swift")

# named presets: (blocks per stage, channels per stage)
PRESETS = {
    "xs": ((2, 2, 4, 2), (48, 56, 112, 220)),
    "s": ((3, 3, 6, 3), (48, 64, 128, 256)),
    "m": ((3, 3, 6, 3), (64, 96, 192, 384)),
    "t": ((3, 3, 6, 3), (96, 128, 256, 512)),
    # desk-scale preset for the toy training loop; not part of the
    # published family
    "tiny": ((1, 1, 2, 1), (16, 24, 48, 64)),
}


@dataclass(frozen=True)
class VariantConfig:
    """Geometry and mixer choices for one model instance."""

    name: str
    blocks: tuple
    channels: tuple
    num_classes: int = 1000
    in_channels: int = 3
    mlp_ratio: float = 4.0
    projection_kind: str = "depthwise_1x1"
    mixer: str = "catm"
    q_branch: tuple = ("spatial", "channel")
    k_branch: tuple = ("spatial", "channel")
    pool_kernel: int = 3
    norm_eps: float = 1e-5

    def __post_init__(self):
        for label in ("blocks", "channels", "q_branch", "k_branch"):
            object.__setattr__(self, label, tuple(getattr(self, label)))
        if len(self.blocks) != 4 or len(self.channels) != 4:
            raise ConfigError("backbone takes exactly four stages")
        if any(int(b) < 1 for b in self.blocks):
            raise ConfigError("every stage needs at least one block")
        if any(int(c) < 1 for c in self.channels):
            raise ConfigError("channel counts must be positive")
        if self.channels[0] % 2:
            raise ConfigError("first stage width must be even (stem halves it)")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.mixer not in MIXER_KINDS:
            raise ConfigError(f"unknown mixer {self.mixer!r}; expected one of {MIXER_KINDS}")
        # validates branch layouts and projection kind
        self.interaction()

    def interaction(self) -> InteractionConfig:
        return InteractionConfig(self.q_branch, self.k_branch, self.projection_kind)

    def mlp_hidden(self, stage: int) -> int:
        return int(round(self.channels[stage] * self.mlp_ratio))

    def to_json(self) -> str:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return json.dumps(out, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "VariantConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**raw)


def variant_config(name: str, **overrides) -> VariantConfig:
    """Config for a named preset; overrides may replace any field."""
    if "blocks" in overrides and "channels" in overrides:
        geometry = (overrides.pop("blocks"), overrides.pop("channels"))
    elif name not in PRESETS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(PRESETS)}")
    else:
        geometry = PRESETS[name]
    return VariantConfig(name=name, blocks=geometry[0], channels=geometry[1],
                         **overrides)


# ---------------------------------------------------------------------------
# initialization

def trunc_normal(rng, shape, std=0.02, dtype=np.float32) -> Tensor:
    """Normal draw with resampling outside two standard deviations."""
    z = rng.standard_normal(shape)
    for _ in range(64):
        bad = np.abs(z) > 2.0
        if not bad.any():
            break
        z[bad] = rng.standard_normal(int(bad.sum()))
    return Tensor(np.asarray(z * std, dtype=dtype))


class _Store:
    """Accumulates weights/buffers under a running name prefix."""

    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.weights: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def conv(self, name, cout, cin_per_group, kh, kw, bias=False, std=0.02):
        self.weights[name + ".w"] = trunc_normal(self.rng, (cout, cin_per_group, kh, kw),
                                                 std, self.dtype)
        if bias:
            self.weights[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype))

    def bn(self, name, c):
        self.weights[name + ".gamma"] = Tensor(np.ones(c, dtype=self.dtype))
        self.weights[name + ".beta"] = Tensor(np.zeros(c, dtype=self.dtype))
        self.buffers[name + ".mean"] = Tensor(np.zeros(c, dtype=self.dtype))
        self.buffers[name + ".var"] = Tensor(np.ones(c, dtype=self.dtype))

    def dense(self, name, cin, cout, std=0.02):
        self.weights[name + ".w"] = trunc_normal(self.rng, (cin, cout), std, self.dtype)
        self.weights[name + ".b"] = Tensor(np.zeros(cout, dtype=self.dtype))


def _init_block(store: _Store, prefix: str, cfg: VariantConfig, stage: int):
    c = cfg.channels[stage]
    for k in range(3):
        store.conv(f"{prefix}integration.{k}.conv", c, 1, 3, 3)
        store.bn(f"{prefix}integration.{k}.bn", c)
    store.bn(f"{prefix}norm1", c)
    if cfg.mixer == "catm":
        p = init_catm_params(store.rng, c, cfg.interaction(), store.dtype)
        w, b = p.to_flat(prefix + "catm.")
        store.weights.update(w)
        store.buffers.update(b)
    elif cfg.mixer == "msa":
        for nm in ("wq", "wk", "wv"):
            store.weights[f"{prefix}mixer.{nm}"] = trunc_normal(store.rng, (c, c),
                                                                0.02, store.dtype)
    elif cfg.mixer == "separable":
        store.weights[f"{prefix}mixer.wq_vec"] = trunc_normal(store.rng, (c, 1),
                                                              0.02, store.dtype)
        for nm in ("wk", "wv"):
            store.weights[f"{prefix}mixer.{nm}"] = trunc_normal(store.rng, (c, c),
                                                                0.02, store.dtype)
    elif cfg.mixer == "swift":
        for nm in ("wq", "wk"):
            store.weights[f"{prefix}mixer.{nm}"] = trunc_normal(store.rng, (c, c),
                                                                0.02, store.dtype)
        store.weights[f"{prefix}mixer.w_alpha"] = trunc_normal(store.rng, (c, 1),
                                                               0.02, store.dtype)
        store.dense(f"{prefix}mixer.t", c, c)
    store.bn(f"{prefix}norm2", c)
    hidden = cfg.mlp_hidden(stage)
    store.conv(f"{prefix}mlp.fc1", hidden, c, 1, 1, bias=True)
    store.conv(f"{prefix}mlp.fc2", c, hidden, 1, 1, bias=True)


def build_model(cfg: VariantConfig, seed: int = 0, dtype=np.float32) -> "Model":
    """Initialize every tensor of the model deterministically from seed.

    Convolution and dense weights draw from a truncated normal
    (std 0.02); biases start at zero; normalization starts as the
    identity.  Convolutions directly followed by a norm carry no bias.
    """
    rng = np.random.default_rng(seed)
    store = _Store(rng, np.dtype(dtype))
    half = cfg.channels[0] // 2
    store.conv("stem.conv1", half, cfg.in_channels, 3, 3)
    store.bn("stem.bn1", half)
    store.conv("stem.conv2", cfg.channels[0], half, 3, 3)
    store.bn("stem.bn2", cfg.channels[0])
    for i in range(4):
        for j in range(cfg.blocks[i]):
            _init_block(store, f"stages.{i}.blocks.{j}.", cfg, i)
        if i < 3:
            store.conv(f"patch_embed.{i}.conv", cfg.channels[i + 1], cfg.channels[i], 3, 3)
            store.bn(f"patch_embed.{i}.bn", cfg.channels[i + 1])
    store.bn("head.norm", cfg.channels[3])
    store.dense("head.fc", cfg.channels[3], cfg.num_classes)
    return Model(cfg, store.weights, store.buffers)


def build_variant(name: str, seed: int = 0, dtype=np.float32, **overrides) -> "Model":
    return build_model(variant_config(name, **overrides), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# forward pieces
#
# every piece takes the merged weight+buffer mapping and a key prefix

def _bn(x, p, name, train, eps, momentum=0.1):
    return ops.batchnorm2d(x, p[name + ".gamma"], p[name + ".beta"],
                           p[name + ".mean"], p[name + ".var"],
                           training=train, eps=eps, momentum=momentum)


def stem_forward(x, p, prefix="stem.", *, train=False, eps=1e-5):
    """Two stride-2 3x3 convs; output is C1 x H/4 x W/4."""
    spec = ConvSpec((3, 3), stride=(2, 2), padding=(1, 1))
    x = ops.conv2d(x, p[prefix + "conv1.w"], spec=spec)
    x = ops.relu(_bn(x, p, prefix + "bn1", train, eps))
    x = ops.conv2d(x, p[prefix + "conv2.w"], spec=spec)
    return ops.relu(_bn(x, p, prefix + "bn2", train, eps))


def embed_forward(x, p, prefix, *, train=False, eps=1e-5):
    """Stride-2 3x3 conv plus norm; halves resolution, changes width."""
    x = ops.conv2d(x, p[prefix + "conv.w"],
                   spec=ConvSpec((3, 3), stride=(2, 2), padding=(1, 1)))
    return _bn(x, p, prefix + "bn", train, eps)


def _integration(x, p, prefix, c, train, eps, pad_mode):
    spec = ConvSpec((3, 3), padding=(1, 1), groups=c, pad_mode=pad_mode)
    t = x
    for k in range(3):
        t = ops.conv2d(t, p[f"{prefix}{k}.conv.w"], spec=spec)
        t = ops.relu(_bn(t, p, f"{prefix}{k}.bn", train, eps))
    return t


def _to_tokens(x):
    b, c, h, w = ops.value_of(x).shape
    return ops.swapaxes(ops.reshape(x, (b, c, h * w)), 1, 2)


def _from_tokens(t, shape):
    b, c, h, w = shape
    return ops.reshape(ops.swapaxes(t, 1, 2), (b, c, h, w))


def _mixer(x, p, prefix, cfg: VariantConfig, train, eps, pad_mode):
    if cfg.mixer == "catm":
        params = CatmParams.from_flat(p, prefix + "catm.")
        return catm_forward(x, params, cfg.interaction(), train=train,
                            pad_mode=pad_mode, eps=eps)
    if cfg.mixer == "pool":
        return pool_mixer(x, cfg.pool_kernel, pad_mode)
    shape = ops.value_of(x).shape
    tokens = _to_tokens(x)
    m = prefix + "mixer."
    if cfg.mixer == "msa":
        out = msa_forward(tokens, p[m + "wq"], p[m + "wk"], p[m + "wv"])
    elif cfg.mixer == "separable":
        out = separable_attention(tokens, p[m + "wq_vec"], p[m + "wk"], p[m + "wv"])
    else:
        out = swift_attention(tokens, p[m + "wq"], p[m + "wk"], p[m + "w_alpha"],
                              p[m + "t.w"], p[m + "t.b"])
    return _from_tokens(out, shape)


def block_forward(x, p, prefix, cfg: VariantConfig, stage: int, *,
                  train=False, pad_mode="zeros"):
    """One residual block: integration, mixer, then pointwise MLP."""
    c = cfg.channels[stage]
    eps = cfg.norm_eps
    with ops.scope_for("integration", x):
        x = ops.add(x, _integration(x, p, prefix + "integration.", c, train,
                                    eps, pad_mode))
    with ops.scope_for("norm1", x):
        n1 = _bn(x, p, prefix + "norm1", train, eps)
    x = ops.add(x, _mixer(n1, p, prefix, cfg, train, eps, pad_mode))
    with ops.scope_for("norm2", x):
        n2 = _bn(x, p, prefix + "norm2", train, eps)
    with ops.scope_for("mlp", x):
        h = ops.gelu(ops.conv2d(n2, p[prefix + "mlp.fc1.w"], p[prefix + "mlp.fc1.b"],
                                spec=ConvSpec((1, 1))))
        h = ops.conv2d(h, p[prefix + "mlp.fc2.w"], p[prefix + "mlp.fc2.b"],
                       spec=ConvSpec((1, 1)))
    return ops.add(x, h)


def head_forward(x, p, prefix="head.", *, train=False, eps=1e-5):
    """Pool, normalize, and classify; returns [B, num_classes]."""
    pooled = ops.global_avg_pool(x)
    normed = _bn(pooled, p, prefix + "norm", train, eps)
    b = ops.value_of(normed).shape[0]
    c = ops.value_of(normed).shape[1]
    flat = ops.reshape(normed, (b, c))
    return ops.linear(flat, p[prefix + "fc.w"], p[prefix + "fc.b"])


def backbone_forward(x, p, cfg: VariantConfig, *, train=False, pad_mode="zeros",
                     stage_times=None):
    """Full forward pass to logits.

    ``p`` maps dotted names to tensors or tape nodes (weights) and
    tensors (normalization buffers).  ``stage_times``, when given a
    dict, collects wall-clock seconds per top-level segment.
    """
    shape = ops.value_of(x).shape
    if len(shape) != 4 or shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [B, {cfg.in_channels}, H, W] input, got {shape}")
    if shape[2] % 32 or shape[3] % 32:
        raise ShapeError(f"input extent must be divisible by 32, got {shape[2:]}")

    def timed(key, fn):
        t0 = time.perf_counter()
        out = fn()
        if stage_times is not None:
            stage_times[key] = stage_times.get(key, 0.0) + time.perf_counter() - t0
        return out

    eps = cfg.norm_eps
    with ops.scope_for("stem", x):
        x = timed("stem", lambda: stem_forward(x, p, train=train, eps=eps))
    for i in range(4):
        def run_stage(i=i, x=x):
            out = x
            for j in range(cfg.blocks[i]):
                with ops.scope_for(f"block{j}", out):
                    out = block_forward(out, p, f"stages.{i}.blocks.{j}.", cfg, i,
                                        train=train, pad_mode=pad_mode)
            return out
        with ops.scope_for(f"stage{i + 1}", x):
            x = timed(f"stage{i + 1}", run_stage)
        if i < 3:
            with ops.scope_for(f"embed{i + 1}", x):
                x = timed(f"embed{i + 1}",
                          lambda i=i, x=x: embed_forward(x, p, f"patch_embed.{i}.",
                                                         train=train, eps=eps))
    with ops.scope_for("head", x):
        return timed("head", lambda: head_forward(x, p, train=train, eps=eps))


# ---------------------------------------------------------------------------

class Model:
    """Config plus flat weight/buffer dicts; all state is explicit."""

    def __init__(self, config: VariantConfig, weights: dict, buffers: dict):
        self.config = config
        self.weights = weights
        self.buffers = buffers

    def param_count(self) -> int:
        """Trainable element count; buffers excluded."""
        return sum(int(v.size) for v in self.weights.values())

    def logits(self, x, *, train=False, weights=None, pad_mode="zeros",
               stage_times=None):
        w = self.weights if weights is None else weights
        p = {**w, **self.buffers}
        return backbone_forward(x, p, self.config, train=train, pad_mode=pad_mode,
                                stage_times=stage_times)

    def taped_weights(self, tape) -> dict:
        """Leaf nodes for every weight, named by their dotted path."""
        return {k: tape.leaf(v, name=k) for k, v in self.weights.items()}

    def astype(self, dtype) -> "Model":
        w = {k: v.astype(dtype) for k, v in self.weights.items()}
        b = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return Model(self.config, w, b)

    def copy(self) -> "Model":
        return Model(self.config,
                     {k: v.copy() for k, v in self.weights.items()},
                     {k: v.copy() for k, v in self.buffers.items()})


# ---------------------------------------------------------------------------
# single-stage stack, small enough for end-to-end gradient checks

class Stack:
    """Stem, one stage of blocks, head; same parameter layout as Model."""

    def __init__(self, config: VariantConfig, weights: dict, buffers: dict):
        self.config = config
        self.weights = weights
        self.buffers = buffers

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.weights.values())

    def taped_weights(self, tape) -> dict:
        return {k: tape.leaf(v, name=k) for k, v in self.weights.items()}

    def logits(self, x, *, train=False, weights=None, pad_mode="zeros"):
        cfg = self.config
        w = self.weights if weights is None else weights
        p = {**w, **self.buffers}
        shape = ops.value_of(x).shape
        if len(shape) != 4 or shape[2] % 4 or shape[3] % 4:
            raise ShapeError(f"stack input needs 4-d shape divisible by 4, got {shape}")
        with ops.scope_for("stem", x):
            x = stem_forward(x, p, train=train, eps=cfg.norm_eps)
        with ops.scope_for("stage1", x):
            for j in range(cfg.blocks[0]):
                with ops.scope_for(f"block{j}", x):
                    x = block_forward(x, p, f"stages.0.blocks.{j}.", cfg, 0,
                                      train=train, pad_mode=pad_mode)
        with ops.scope_for("head", x):
            return head_forward(x, p, train=train, eps=cfg.norm_eps)


def build_stack(channels: int = 8, num_blocks: int = 2, num_classes: int = 4,
                seed: int = 0, dtype=np.float32, **overrides) -> Stack:
    """Desk-scale stack: the head reads the stage output directly."""
    cfg = VariantConfig(name="stack", blocks=(num_blocks, 1, 1, 1),
                        channels=(channels,) * 4, num_classes=num_classes,
                        **overrides)
    rng = np.random.default_rng(seed)
    store = _Store(rng, np.dtype(dtype))
    half = channels // 2
    store.conv("stem.conv1", half, cfg.in_channels, 3, 3)
    store.bn("stem.bn1", half)
    store.conv("stem.conv2", channels, half, 3, 3)
    store.bn("stem.bn2", channels)
    for j in range(num_blocks):
        _init_block(store, f"stages.0.blocks.{j}.", cfg, 0)
    store.bn("head.norm", channels)
    store.dense("head.fc", channels, num_classes)
    return Stack(cfg, store.weights, store.buffers)


def randomize_params(model, rng) -> None:
    """Overwrite weights and buffers with generic O(1) draws, in place.

    Fresh initialization maps zero to zero through every norm layer, so
    relu preactivations contain exact zeros and finite differences
    straddle the kink.  Gradient checks verify the chain rule, which is
    indifferent to how trained the values look, so generic draws are
    the right operating point.
    """
    for v in model.weights.values():
        v.data[...] = 0.5 * rng.standard_normal(v.data.shape)
    for k, v in model.buffers.items():
        if k.endswith(".var"):
            v.data[...] = rng.uniform(0.5, 1.5, v.data.shape)
        else:
            v.data[...] = 0.3 * rng.standard_normal(v.data.shape)
