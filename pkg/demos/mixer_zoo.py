"""One skeleton, five token mixers.

Swaps the mixer inside the same four-stage body and compares size,
budget, and what actually runs on the tape.  The additive mixer is
the only global one that records no matmul and no softmax.
"""

import numpy as np

from casvit import (ABLATIONS, Tape, Tensor, audit_tape, build_variant,
                    model_cost)

MIXERS = ("catm", "pool", "msa", "separable", "swift")

print("tiny @32x32 across mixers:")
for mixer in MIXERS:
    model = build_variant("tiny", seed=0, num_classes=4, mixer=mixer)
    rep = model_cost(model.config, (32, 32))
    tape = Tape()
    x = tape.leaf(Tensor(np.random.default_rng(0)
                         .standard_normal((1, 3, 32, 32))
                         .astype(np.float32)), name="x", trainable=False)
    model.logits(x, weights=model.taped_weights(tape))
    census = audit_tape(tape).ops_within(mixer)
    print(f"  {mixer:<10} {model.param_count():>8,} params  "
          f"{rep.macs_total:>10,} MACs  "
          f"matmul={census.get('matmul', 0):<3} "
          f"softmax={census.get('softmax', 0)}")
print()

print("interaction ablations (weights stay allocated; removed gates "
      "stop costing MACs):")
for name, (q, k) in sorted(ABLATIONS.items()):
    model = build_variant("tiny", seed=0, num_classes=4,
                          q_branch=q, k_branch=k)
    rep = model_cost(model.config, (32, 32))
    print(f"  {name:<14} q={'+'.join(q):<16} k={'+'.join(k):<16} "
          f"{model.param_count():>8,} params  {rep.macs_total:>9,} MACs")
