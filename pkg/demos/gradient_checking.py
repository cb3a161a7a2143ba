"""Finite differences versus the tape, and why inputs get resampled.

The checker perturbs every leaf twice per element, so each case is
kept tiny.  A fresh init maps zero to zero through the norm layers,
leaving ReLU pre-activations exactly at the kink where central
differences lie; kink_safe_case redraws until the margin is healthy.
"""

import numpy as np

from casvit import (Tensor, build_stack, grad_check, kink_safe_case, ops,
                    randomize_params, relu_kink_margin)
from casvit.autograd import Tape
from casvit.catm import catm_forward, init_catm_params
from casvit.cli import _GRADCHECK_CASES

print("kink margin on a fresh 1-block stack (structural zeros):")
stack = build_stack(channels=6, num_blocks=1, num_classes=3, seed=0,
                    dtype=np.float64)
tape = Tape()
x = tape.leaf(Tensor(np.random.default_rng(0)
                     .standard_normal((2, 3, 8, 8))), name="x")
stack.logits(x, weights=stack.taped_weights(tape))
print(f"  before randomize_params: {relu_kink_margin(tape):.3e}")
randomize_params(stack, np.random.default_rng(1))
tape = Tape()
x = tape.leaf(Tensor(np.random.default_rng(0)
                     .standard_normal((2, 3, 8, 8))), name="x")
stack.logits(x, weights=stack.taped_weights(tape))
print(f"  after  randomize_params: {relu_kink_margin(tape):.3e}")
print()

print("all registered cases (f64, central differences):")
for name, group, build in _GRADCHECK_CASES:
    leaves, make_loss = kink_safe_case(build, seed=0)
    tol = 1e-4 if name in ("block", "backbone") else 1e-5
    result = grad_check(make_loss, leaves, tol=tol)
    print(f"  {name:<16} max rel err {result.max_err:.3e}  "
          f"tol {tol:.0e}  {'ok' if result.passed else 'FAIL'}")
print()

rng = np.random.default_rng(7)
p = init_catm_params(rng, 3, dtype=np.float64, std=0.5)
x = Tensor(rng.standard_normal((2, 3, 4, 4)))
result = grad_check(
    lambda v: ops.sum_all(catm_forward(v["x"], p.replace(
        **{k: n for k, n in v.items() if k != "x"}))),
    {"x": x, **p.weights()})
print(f"standalone mixer wrt input and all weights: "
      f"max rel err {result.max_err:.3e} over {len(result.per_param)} leaves")
