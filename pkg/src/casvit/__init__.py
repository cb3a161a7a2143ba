"""Convolutional additive vision backbone with an instrumented autograd core.

The package splits into three layers:

* numeric core: ``tensor``, ``kernels``, ``autograd``, ``ops``
* model: ``catm`` (the additive token mixer), ``mixers`` (attention
  baselines), ``backbone`` (the four-stage network), ``accounting``
  (analytic parameter and MAC budgets checked against traced tapes)
* harness: ``data``, ``train``, ``checkpoint``, ``bench``, ``cli``
"""

from .accounting import (CostReport, LayerCost, TapeAudit, VariantDelta,
                         audit_tape, catm_cost, model_cost, msa_mixer_cost,
                         phi_cost, pool_mixer_cost, separable_mixer_cost,
                         swift_mixer_cost, table1_comparison, tape_macs)
from .autograd import (GradCheckReport, GradMap, Node, Tape, backward,
                       grad_check, kink_safe_case, relu_kink_margin)
from .backbone import (MIXER_KINDS, PRESETS, Model, Stack, VariantConfig,
                       backbone_forward, block_forward, build_model,
                       build_stack, build_variant, randomize_params,
                       variant_config)
from .bench import (BenchResult, ScalingResult, bench_model,
                    catm_resolution_scaling, median_seconds,
                    msa_resolution_scaling)
from .catm import (ABLATIONS, CatmParams, InteractionConfig, catm_forward,
                   channel_interaction, context_map_phi, init_catm_params,
                   make_ablation, spatial_interaction)
from .checkpoint import (CheckpointError, check_shapes, load_checkpoint,
                         load_into, save_checkpoint)
from .data import (Dataset, DatasetError, generate_shapes, load_dataset,
                   preprocess, save_dataset)
from .mixers import (msa_forward, pool_mixer, separable_attention,
                     swift_attention)
from .tensor import ConfigError, ConvSpec, ShapeError, Tensor
from .train import (AdamW, DivergenceError, TrainConfig, evaluate, lr_at,
                    settle_norm_stats, train)

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS", "AdamW", "BenchResult", "CatmParams", "CheckpointError",
    "ConfigError", "ConvSpec", "CostReport", "Dataset", "DatasetError",
    "DivergenceError", "GradCheckReport", "GradMap", "InteractionConfig",
    "LayerCost", "MIXER_KINDS", "Model", "Node", "PRESETS", "ScalingResult",
    "ShapeError", "Stack", "Tape", "TapeAudit", "Tensor", "TrainConfig",
    "VariantConfig", "VariantDelta", "audit_tape", "backbone_forward",
    "backward", "bench_model", "block_forward", "build_model", "build_stack",
    "build_variant", "catm_cost", "catm_forward", "catm_resolution_scaling",
    "channel_interaction", "check_shapes", "context_map_phi", "evaluate",
    "generate_shapes", "grad_check", "init_catm_params", "kink_safe_case",
    "load_checkpoint", "load_dataset", "load_into", "lr_at", "make_ablation",
    "median_seconds", "model_cost", "msa_forward", "msa_mixer_cost",
    "msa_resolution_scaling", "phi_cost", "pool_mixer", "pool_mixer_cost",
    "preprocess", "randomize_params", "relu_kink_margin",
    "save_checkpoint", "save_dataset", "separable_attention",
    "separable_mixer_cost", "settle_norm_stats", "spatial_interaction",
    "swift_attention",
    "swift_mixer_cost", "table1_comparison", "tape_macs", "train",
    "variant_config",
]
