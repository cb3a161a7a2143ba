"""Analytic parameter/MAC accounting and tape auditing.

One convention drives both the closed-form layer costs and the
instrumented tape trace, so the two agree exactly (a property the
tests pin down).  Counts are multiply-accumulates per image:

- conv2d: kh*kw*(Cin/groups)*Cout*OH*OW, except the channel gate's
  rescale conv, which runs on the globally pooled 1x1 summary; that is
  O(C) next to the O(HWC) pool feeding it and counts zero.
- average pooling (global or windowed): one accumulate per summed cell.
- matmul: full product count.
- elementwise products: counted only inside spatial/channel interaction
  scopes, where the gating product is the operation being priced;
  gating products elsewhere (the mixer value gate, attention-style
  context gates) ride along with their adjacent projections and count
  zero.
- norms, activations, residual adds, reshapes, softmax: zero.
"""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass, field

from .backbone import VariantConfig, variant_config
from .tensor import ConfigError

# published reference budgets (parameter count, MACs at 224x224)
TABLE1_TARGETS = {
    "xs": (3.20e6, 560e6),
    "s": (5.76e6, 932e6),
    "m": (12.42e6, 1887e6),
    "t": (21.76e6, 3597e6),
}


# ---------------------------------------------------------------------------
# closed-form mixer costs

_BASE_BRANCH = ("spatial", "channel")
_INTERACTION_COST = {"spatial": 11, "channel": 2}


def phi_cost(h: int, w: int, c: int, order=_BASE_BRANCH) -> int:
    """Context map: 13*H*W*C for the full branch.

    Spatial interaction: depthwise 3x3 (9HWC) + pointwise score (HWC)
    + gating product (HWC) = 11HWC.  Channel interaction: global pool
    (HWC) + gating product (HWC) = 2HWC; the 1x1 conv on the pooled
    map is O(C) and drops.  Ablated branches price only the
    interactions they keep.
    """
    try:
        per_unit = sum(_INTERACTION_COST[kind] for kind in order)
    except KeyError as e:
        raise ConfigError(f"unknown interaction {e.args[0]!r}") from None
    return per_unit * h * w * c


def catm_cost(h: int, w: int, c: int, projection_kind: str = "depthwise_1x1",
              q_branch=_BASE_BRANCH, k_branch=_BASE_BRANCH) -> int:
    """Additive mixer: projections + two context maps + depthwise fuse.

    Depthwise projections give 3HWC + 2*13HWC + 9HWC = 38*H*W*C; dense
    projections replace the first term with 3HWC*C.
    """
    if projection_kind == "dense_1x1":
        proj = 3 * h * w * c * c
    elif projection_kind == "depthwise_1x1":
        proj = 3 * h * w * c
    else:
        raise ConfigError(f"unknown projection kind {projection_kind!r}")
    branches = phi_cost(h, w, c, q_branch) + phi_cost(h, w, c, k_branch)
    return proj + branches + 9 * h * w * c


def msa_mixer_cost(n: int, d: int, include_projections: bool = True) -> int:
    """Softmax attention: 2*N^2*d for similarity+aggregation, plus the
    three dense projections (3*N*d^2) unless excluded."""
    core = 2 * n * n * d
    return core + (3 * n * d * d if include_projections else 0)


def separable_mixer_cost(n: int, d: int) -> int:
    """Score vector (N*d) plus two dense projections (2*N*d^2)."""
    return 2 * n * d * d + n * d


def swift_mixer_cost(n: int, d: int) -> int:
    """Q/K projections and output transform (3*N*d^2) plus the score
    contraction (N*d)."""
    return 3 * n * d * d + n * d


def pool_mixer_cost(h: int, w: int, c: int, kernel: int = 3) -> int:
    return kernel * kernel * h * w * c


# ---------------------------------------------------------------------------
# whole-model sweep

@dataclass
class LayerCost:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    variant: str
    input_hw: tuple
    projection_kind: str
    mixer: str
    layers: list = field(default_factory=list)
    params_actual: int | None = None

    @property
    def params_total(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def macs_total(self) -> int:
        return sum(l.macs for l in self.layers)

    def text(self) -> str:
        width = max(len(l.name) for l in self.layers) + 2
        out = io.StringIO()
        out.write(f"variant {self.variant} @ {self.input_hw[0]}x{self.input_hw[1]}"
                  f" (mixer {self.mixer}, projection {self.projection_kind})\n")
        out.write(f"{'layer':<{width}}{'params':>12}{'MACs':>16}\n")
        for l in self.layers:
            out.write(f"{l.name:<{width}}{l.params:>12,}{l.macs:>16,}\n")
        out.write(f"{'total':<{width}}{self.params_total:>12,}{self.macs_total:>16,}\n")
        if self.params_actual is not None:
            out.write(f"instantiated parameter elements: {self.params_actual:,}\n")
        return out.getvalue()

    def csv(self) -> str:
        rows = ["layer,params,macs"]
        rows += [f"{l.name},{l.params},{l.macs}" for l in self.layers]
        rows.append(f"total,{self.params_total},{self.macs_total}")
        return "\n".join(rows) + "\n"


def _catm_params(c: int, projection_kind: str) -> int:
    proj = 3 * (c * c + c) if projection_kind == "dense_1x1" else 6 * c
    spatial = 9 * c + 2 * c + c + 1
    channel = 2 * c
    gamma = 10 * c
    return proj + spatial + channel + gamma


def _mixer_cost_entry(cfg: VariantConfig, stage: int, h: int, w: int):
    c = cfg.channels[stage]
    n = h * w
    if cfg.mixer == "catm":
        return (_catm_params(c, cfg.projection_kind),
                catm_cost(h, w, c, cfg.projection_kind,
                          cfg.q_branch, cfg.k_branch))
    if cfg.mixer == "pool":
        return 0, pool_mixer_cost(h, w, c, cfg.pool_kernel)
    if cfg.mixer == "msa":
        return 3 * c * c, msa_mixer_cost(n, c)
    if cfg.mixer == "separable":
        return 2 * c * c + c, separable_mixer_cost(n, c)
    return 3 * c * c + 2 * c, swift_mixer_cost(n, c)


def model_cost(cfg: VariantConfig, hw=(224, 224), model=None) -> CostReport:
    """Per-layer parameter and MAC sweep at the given input extent.

    When ``model`` is given, its instantiated trainable element count
    is recorded alongside the analytic total; the two must be equal,
    which the test suite asserts.
    """
    h, w = hw
    if h % 32 or w % 32:
        raise ConfigError(f"input extent must be divisible by 32, got {hw}")
    report = CostReport(cfg.name, (h, w), cfg.projection_kind, cfg.mixer)
    add = report.layers.append

    cin, c1 = cfg.in_channels, cfg.channels[0]
    half = c1 // 2
    stem_p = 9 * cin * half + 2 * half + 9 * half * c1 + 2 * c1
    stem_m = 9 * cin * half * (h // 2) * (w // 2) + 9 * half * c1 * (h // 4) * (w // 4)
    add(LayerCost("stem", stem_p, stem_m))

    sh, sw = h // 4, w // 4
    for i in range(4):
        c = cfg.channels[i]
        hidden = cfg.mlp_hidden(i)
        mixer_p, mixer_m = _mixer_cost_entry(cfg, i, sh, sw)
        for j in range(cfg.blocks[i]):
            base = f"stages.{i}.blocks.{j}."
            add(LayerCost(base + "integration", 33 * c, 27 * sh * sw * c))
            add(LayerCost(base + "norm1", 2 * c, 0))
            add(LayerCost(base + cfg.mixer, mixer_p, mixer_m))
            add(LayerCost(base + "norm2", 2 * c, 0))
            mlp_p = hidden * c + hidden + c * hidden + c
            mlp_m = 2 * sh * sw * c * hidden
            add(LayerCost(base + "mlp", mlp_p, mlp_m))
        if i < 3:
            c_next = cfg.channels[i + 1]
            sh, sw = sh // 2, sw // 2
            add(LayerCost(f"patch_embed.{i}", 9 * c * c_next + 2 * c_next,
                          9 * c * c_next * sh * sw))

    c4, k = cfg.channels[3], cfg.num_classes
    add(LayerCost("head", 2 * c4 + c4 * k + k, sh * sw * c4 + c4 * k))

    if model is not None:
        report.params_actual = model.param_count()
    return report


@dataclass
class VariantDelta:
    name: str
    params: int
    macs: int
    target_params: float
    target_macs: float

    @property
    def params_delta(self) -> float:
        return self.params / self.target_params - 1.0

    @property
    def macs_delta(self) -> float:
        return self.macs / self.target_macs - 1.0


def table1_comparison(hw=(224, 224), names=None) -> list:
    """Dense-projection budgets against the published reference table."""
    rows = []
    for name in names or sorted(TABLE1_TARGETS):
        cfg = variant_config(name, projection_kind="dense_1x1")
        rep = model_cost(cfg, hw)
        tp, tm = TABLE1_TARGETS[name]
        rows.append(VariantDelta(name, rep.params_total, rep.macs_total, tp, tm))
    return rows


# ---------------------------------------------------------------------------
# tape instrumentation

def node_macs(node) -> int:
    """Apply the counting convention to one recorded op."""
    meta = node.meta or {}
    segments = node.scope.split("/")
    if node.op == "conv2d":
        if tuple(meta.get("in_hw", ())) == (1, 1) and "channel" in segments:
            return 0
        return meta["macs"]
    if node.op == "matmul":
        return meta["macs"]
    if node.op == "mul":
        if "spatial" in segments or "channel" in segments:
            return meta["elems"]
        return 0
    if node.op in ("global_avg_pool", "avg_pool"):
        return meta["adds"]
    return 0


def tape_macs(tape, within: str | None = None) -> int:
    """Total MACs recorded on a tape, optionally restricted to nodes
    whose scope path contains the given segment."""
    total = 0
    for node in tape.nodes:
        if within is not None and within not in node.scope.split("/"):
            continue
        total += node_macs(node)
    return total


@dataclass
class TapeAudit:
    op_counts: Counter
    per_scope: dict

    def ops_within(self, segment: str) -> Counter:
        return self.per_scope.get(segment, Counter())

    def catm_is_attention_free(self) -> bool:
        """True when the additive mixer ran and recorded no matmul or
        softmax anywhere inside its scope."""
        c = self.per_scope.get("catm")
        return bool(c) and c.get("matmul", 0) == 0 and c.get("softmax", 0) == 0

    def summary(self) -> str:
        lines = ["op counts: " + ", ".join(f"{k}={v}" for k, v in sorted(self.op_counts.items()))]
        for seg in sorted(self.per_scope):
            c = self.per_scope[seg]
            lines.append(f"  {seg}: " + ", ".join(f"{k}={v}" for k, v in sorted(c.items())))
        return "\n".join(lines)


def audit_tape(tape) -> TapeAudit:
    """Count op kinds overall and within each mixer scope."""
    total = Counter(n.op for n in tape.nodes)
    per = {}
    for segment in ("catm", "msa", "separable", "swift", "pool"):
        c = Counter(n.op for n in tape.nodes if segment in n.scope.split("/"))
        if c:
            per[segment] = c
    return TapeAudit(total, per)
