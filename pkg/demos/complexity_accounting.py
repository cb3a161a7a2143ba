"""Where the multiply-accumulates go.

Builds each preset, prints the closed-form mixer budgets, then shows
that an instrumented forward trace lands on exactly the same MAC
total as the analytic per-layer table.
"""

import numpy as np

from casvit import (Tape, Tensor, audit_tape, build_variant, catm_cost,
                    catm_forward, init_catm_params, model_cost, phi_cost,
                    table1_comparison, tape_macs, variant_config)

h, w, c = 14, 14, 64
print(f"closed forms at H={h} W={w} C={c}:")
print(f"  context map phi : {phi_cost(h, w, c):>12,}  (= 13*H*W*C)")
print(f"  additive mixer  : {catm_cost(h, w, c):>12,}  (= 38*H*W*C)")

rng = np.random.default_rng(0)
p = init_catm_params(rng, c, dtype=np.float64)
tape = Tape()
x = tape.leaf(Tensor(rng.standard_normal((1, c, h, w))), name="x")
catm_forward(x, p)
print(f"  traced mixer    : {tape_macs(tape):>12,}  (instrumented tape)")
print()

print("variant budgets at 224x224 (depthwise projections):")
for name in ("xs", "s", "m", "t"):
    rep = model_cost(variant_config(name), (224, 224))
    print(f"  {name:>2}: {rep.params_total / 1e6:6.2f}M params, "
          f"{rep.macs_total / 1e6:8.0f}M MACs")
print()

print("dense-projection mode against the published reference table:")
for row in table1_comparison(names=("xs", "s", "m", "t")):
    print(f"  {row.name:>2}: params {row.params / 1e6:5.2f}M vs "
          f"{row.target_params / 1e6:5.2f}M ({row.params_delta:+.1%}), "
          f"MACs {row.macs / 1e6:5.0f}M vs {row.target_macs / 1e6:5.0f}M "
          f"({row.macs_delta:+.1%})")
print()

model = build_variant("tiny", seed=0, num_classes=4)
tape = Tape()
x = tape.leaf(Tensor(rng.standard_normal((1, 3, 32, 32)).astype(np.float32)),
              name="x", trainable=False)
model.logits(x, weights=model.taped_weights(tape))
analytic = model_cost(model.config, (32, 32)).macs_total
print(f"tiny @32x32: analytic {analytic:,} MACs, "
      f"traced {tape_macs(tape):,} MACs, "
      f"equal={tape_macs(tape) == analytic}")
print("mixer op census:", dict(audit_tape(tape).ops_within("catm")))
