"""Command line interface.

Subcommands: build, flops, gradcheck, gen-data, train, eval, bench,
ablate.  Exit status 0 on success, 1 on runtime failure, 2 on usage
errors.  The default seed for every command comes from CASVIT_SEED
when that variable is set.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import ops
from .accounting import TABLE1_TARGETS, audit_tape, model_cost, table1_comparison
from .autograd import Tape, grad_check, kink_safe_case
from .backbone import (PRESETS, block_forward, build_stack, build_variant,
                       randomize_params)
from .bench import bench_model, catm_resolution_scaling, msa_resolution_scaling
from .catm import ABLATIONS, catm_forward, init_catm_params
from .checkpoint import CheckpointError, load_checkpoint, load_into, save_checkpoint
from .data import DatasetError, generate_shapes, load_dataset, save_dataset
from .mixers import msa_forward, pool_mixer, separable_attention, swift_attention
from .tensor import ConfigError, ConvSpec, ShapeError, Tensor
from .train import DivergenceError, TrainConfig, evaluate, train

PROJ_KINDS = {"dw": "depthwise_1x1", "dense": "dense_1x1"}
MIXERS = ("catm", "pool", "msa", "separable", "swift")


def _env_seed() -> int:
    return int(os.environ.get("CASVIT_SEED", "0"))


def _parse_hw(text: str) -> tuple:
    """Accepts '224x224' or a bare side length."""
    parts = text.lower().split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or not all(p.isdigit() and p for p in parts):
        raise ConfigError(f"bad size {text!r}, expected HxW like 224x224")
    return int(parts[0]), int(parts[1])


def _overrides(args) -> dict:
    out = {"projection_kind": PROJ_KINDS[args.proj]}
    if getattr(args, "mixer", None):
        out["mixer"] = args.mixer
    if getattr(args, "classes", None):
        out["num_classes"] = args.classes
    return out


def cmd_build(args) -> int:
    hw = _parse_hw(args.size)
    model = build_variant(args.variant, seed=args.seed, **_overrides(args))
    print(model.config.to_json())
    print(f"parameters: {model.param_count():,}")
    report = model_cost(model.config, hw, model)
    print(f"MACs @ {hw[0]}x{hw[1]}: {report.macs_total:,}")
    return 0


def cmd_flops(args) -> int:
    hw = _parse_hw(args.size)
    model = build_variant(args.variant, seed=0, **_overrides(args))
    report = model_cost(model.config, hw, model)
    print(report.text(), end="")
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.csv())
        print(f"per-layer table written to {args.csv}")
    if args.variant in TABLE1_TARGETS:
        print("\nreference comparison (dense projections):")
        for row in table1_comparison(hw=hw, names=[args.variant]):
            print(f"  params {row.params / 1e6:.2f}M vs {row.target_params / 1e6:.2f}M "
                  f"({row.params_delta:+.1%})")
            print(f"  MACs   {row.macs / 1e6:.0f}M vs {row.target_macs / 1e6:.0f}M "
                  f"({row.macs_delta:+.1%})")
    return 0


def _sample(rng):
    def tensor(*shape):
        return Tensor(rng.standard_normal(shape))
    return tensor


def _case_conv(rng, seed):
    sample = _sample(rng)
    x, w = sample(2, 3, 5, 5), sample(4, 3, 3, 3)
    spec = ConvSpec((3, 3), padding=(1, 1))
    return {"x": x, "w": w}, lambda v: ops.sum_all(
        ops.conv2d(v["x"], v["w"], spec=spec))


def _case_bn(rng, seed):
    sample = _sample(rng)
    rm, rv = Tensor(np.zeros(4)), Tensor(np.ones(4))
    leaves = {"x": sample(3, 4, 3, 3), "gamma": sample(4), "beta": sample(4)}
    return leaves, lambda v: ops.sum_all(
        ops.batchnorm2d(v["x"], v["gamma"], v["beta"], rm, rv, training=False))


def _case_catm(rng, seed):
    p = init_catm_params(rng, 3, dtype=np.float64, std=0.5)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    return {"x": x, **p.weights()}, lambda v: ops.sum_all(
        catm_forward(v["x"], p.replace(**{k: n for k, n in v.items() if k != "x"})))


def _case_msa(rng, seed):
    sample = _sample(rng)
    leaves = {"x": sample(2, 3, 4), "wq": sample(4, 4), "wk": sample(4, 4),
              "wv": sample(4, 4)}
    return leaves, lambda v: ops.sum_all(
        msa_forward(v["x"], v["wq"], v["wk"], v["wv"]))


def _case_separable(rng, seed):
    sample = _sample(rng)
    leaves = {"x": sample(2, 3, 4), "q": sample(4, 1), "wk": sample(4, 4),
              "wv": sample(4, 4)}
    return leaves, lambda v: ops.sum_all(
        separable_attention(v["x"], v["q"], v["wk"], v["wv"]))


def _case_swift(rng, seed):
    sample = _sample(rng)
    leaves = {"x": sample(2, 3, 4), "wq": sample(4, 4), "wk": sample(4, 4),
              "a": sample(4, 1), "tw": sample(4, 4), "tb": sample(4)}
    return leaves, lambda v: ops.sum_all(
        swift_attention(v["x"], v["wq"], v["wk"], v["a"], v["tw"], v["tb"]))


def _case_pool(rng, seed):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    return {"x": x}, lambda v: ops.sum_all(pool_mixer(v["x"]))


def _case_block(rng, seed):
    stack = build_stack(channels=6, num_blocks=1, num_classes=3,
                        seed=seed, dtype=np.float64)
    randomize_params(stack, rng)
    prefix = "stages.0.blocks.0."
    block = {k: v for k, v in stack.weights.items() if k.startswith(prefix)}
    x = Tensor(rng.standard_normal((2, 6, 4, 4)))

    def loss(v):
        vals = dict(v)
        xin = vals.pop("x")
        merged = {**stack.weights, **vals, **stack.buffers}
        return ops.sum_all(block_forward(xin, merged, prefix,
                                         stack.config, 0, train=False))
    return {"x": x, **block}, loss


def _case_backbone(rng, seed):
    stack = build_stack(channels=4, num_blocks=2, num_classes=3,
                        seed=seed, dtype=np.float64)
    randomize_params(stack, rng)
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    labels = np.array([0, 2])

    def loss(v):
        vals = dict(v)
        xin = vals.pop("x")
        return ops.cross_entropy(stack.logits(xin, weights=vals), labels)
    return {"x": x, **stack.weights}, loss


_GRADCHECK_CASES = (
    ("conv2d", "ops", _case_conv),
    ("batchnorm_eval", "ops", _case_bn),
    ("catm", "catm", _case_catm),
    ("msa", "mixers", _case_msa),
    ("separable", "mixers", _case_separable),
    ("swift", "mixers", _case_swift),
    ("pool", "mixers", _case_pool),
    ("block", "block", _case_block),
    ("backbone", "backbone", _case_backbone),
)


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, group, build in _GRADCHECK_CASES:
        if args.module not in ("all", group):
            continue
        leaves, make_loss = kink_safe_case(build, args.seed)
        tol = args.tol if name not in ("block", "backbone") else max(args.tol, 1e-4)
        report = grad_check(make_loss, leaves, tol=tol)
        status = "ok" if report.passed else "FAIL"
        print(f"{name:<16} max err {report.max_err:.3e}  tol {tol:.0e}  {status}")
        failures += 0 if report.passed else 1
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_gen_data(args) -> int:
    ds = generate_shapes(args.n, size=args.size, num_classes=args.classes,
                         seed=args.seed, noise=args.noise, jitter=args.jitter)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.size}x{args.size} images "
          f"({args.classes} classes) to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if args.val_data:
        train_ds, val_ds = ds, load_dataset(args.val_data)
    else:
        train_ds, val_ds = ds.split(args.val_frac, seed=args.seed)
    model = build_variant(args.variant, seed=args.seed,
                          num_classes=ds.num_classes, mixer=args.mixer,
                          projection_kind=PROJ_KINDS[args.proj])
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      base_lr=args.lr, seed=args.seed,
                      target_accuracy=args.target_acc)
    history = train(model, train_ds, cfg, val_ds, log=print)
    final = history[-1]
    print(f"final: train_acc {final['train_accuracy']:.3f} "
          f"val_acc {final.get('val_accuracy', float('nan')):.3f}")
    if args.out:
        save_checkpoint(model, args.out)
        print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    if args.variant:
        reference = build_variant(args.variant, seed=0, num_classes=ds.num_classes)
        model = load_into(reference, args.ckpt)
    else:
        model = load_checkpoint(args.ckpt)
    metrics = evaluate(model, ds, batch_size=args.batch_size)
    print(f"accuracy {metrics['accuracy']:.4f}  loss {metrics['loss']:.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.scaling:
        catm = catm_resolution_scaling(seed=args.seed)
        msa = msa_resolution_scaling(seed=args.seed)
        print(catm.text())
        print(msa.text())
        return 0
    model = build_variant(args.variant, seed=args.seed, **_overrides(args))
    result = bench_model(model, _parse_hw(args.size), batch=args.batch,
                         iters=args.iters, seed=args.seed)
    print(result.text())
    return 0


def cmd_ablate(args) -> int:
    hw = _parse_hw(args.size)
    q, k = ABLATIONS[args.config]
    model = build_variant(args.variant, seed=args.seed, mixer=args.mixer,
                          projection_kind=PROJ_KINDS[args.proj],
                          q_branch=q, k_branch=k)
    report = model_cost(model.config, hw, model)
    print(f"variant {args.variant}  mixer {args.mixer}  config {args.config}")
    if args.mixer == "catm":
        print(f"q branch: {'+'.join(q) or 'none'}   k branch: {'+'.join(k) or 'none'}")
    print(f"parameters: {model.param_count():,}")
    print(f"MACs @ {hw[0]}x{hw[1]}: {report.macs_total:,}")
    if args.audit:
        rng = np.random.default_rng(args.seed)
        tape = Tape()
        side = 32
        x = tape.leaf(Tensor(rng.standard_normal(
            (1, model.config.in_channels, side, side)).astype(np.float32)),
            trainable=False)
        model.logits(x, weights=model.taped_weights(tape))
        print(audit_tape(tape).summary())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="casvit",
        description="additive-mixer vision backbone: build, measure, train")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, mixer=False, size=None):
        p.add_argument("--variant", default="xs", choices=sorted(PRESETS))
        p.add_argument("--proj", default="dw", choices=sorted(PROJ_KINDS))
        if mixer:
            p.add_argument("--mixer", default="catm", choices=MIXERS)
        if size:
            p.add_argument("--size", default=size, help="input size, HxW")
        p.add_argument("--seed", type=int, default=_env_seed())

    p = sub.add_parser("build", help="instantiate a variant and report its size")
    add_common(p, mixer=True, size="224x224")
    p.add_argument("--classes", type=int, default=None)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("flops", help="per-layer parameter and MAC table")
    add_common(p, mixer=True, size="224x224")
    p.add_argument("--csv", default=None, help="also write the table as CSV")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="compare gradients to finite differences")
    p.add_argument("--module", default="all",
                   choices=("ops", "catm", "mixers", "block", "backbone", "all"))
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="render a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--jitter", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit a variant on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--variant", default="tiny", choices=sorted(PRESETS))
    p.add_argument("--mixer", default="catm", choices=MIXERS)
    p.add_argument("--proj", default="dw", choices=sorted(PROJ_KINDS))
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--target-acc", type=float, default=None)
    p.add_argument("--out", default=None, help="checkpoint path")
    p.add_argument("--seed", type=int, default=_env_seed())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default=None, choices=sorted(PRESETS),
                   help="check the checkpoint against this variant's shapes")
    p.add_argument("--batch-size", type=int, default=256)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="throughput and scaling measurements")
    add_common(p, mixer=True, size="64x64")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--scaling", action="store_true",
                   help="mixer cost ratios at doubled resolution")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="build an interaction or mixer ablation")
    add_common(p, mixer=True, size="224x224")
    p.add_argument("--config", default="base", choices=sorted(ABLATIONS))
    p.add_argument("--audit", action="store_true",
                   help="trace one forward and print the op census")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DatasetError, CheckpointError,
            DivergenceError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
