"""Baseline token mixers used for comparison and benchmarks.

Three attention-style mixers operate on token matrices of shape
[B, N, d]; the pooling mixer operates on NCHW feature maps.  Each one
is a faithful small-scale rendition of a well known design point:

- ``msa_forward``: single-head softmax attention, quadratic in N.
- ``separable_attention``: a softmax over tokens produces one global
  context vector that gates every value, linear in N.
- ``swift_attention``: query-weighted global vector gates the keys,
  followed by a dense transform and an additive normalized query path.
- ``pool_mixer``: average pooling minus identity, parameter free.

All functions accept plain tensors or tape nodes.
"""

from __future__ import annotations

import math

from . import ops
from .tensor import ShapeError


def _token_dims(x):
    shape = ops.value_of(x).shape
    if len(shape) != 3:
        raise ShapeError(f"expected [B, N, d] tokens, got shape {shape}")
    return shape


def msa_forward(x, wq, wk, wv):
    """Single-head self-attention: softmax(Q K^T / sqrt(d)) V."""
    _token_dims(x)
    with ops.scope_for("msa", x, wq):
        q = ops.matmul(x, wq)
        k = ops.matmul(x, wk)
        v = ops.matmul(x, wv)
        d = ops.value_of(q).shape[-1]
        scores = ops.scale(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
        attn = ops.softmax(scores, axis=-1)
        return ops.matmul(attn, v)


def separable_attention(x, wq_vec, wk, wv):
    """Softmax token scores pool the keys into one context vector.

    ``wq_vec`` has shape [d, 1]; its scores are normalized over the
    token axis, the weighted key sum gives a [B, 1, d] context, and the
    context gates each value row.  Cost is linear in N.
    """
    _token_dims(x)
    with ops.scope_for("separable", x, wq_vec):
        scores = ops.softmax(ops.matmul(x, wq_vec), axis=1)
        k = ops.matmul(x, wk)
        v = ops.matmul(x, wv)
        context = ops.sum_axis(ops.mul(scores, k), axis=1, keepdims=True)
        return ops.mul(context, v)


def swift_attention(x, wq, wk, w_alpha, t_w, t_b):
    """Additive attention with a transformed global query summary.

    Per-token weights alpha = Q w_alpha / sqrt(d) contract the queries
    into a global vector g; g gates the keys, a dense transform T maps
    the gated keys, and the L2-normalized query adds back in:

        out = T(g * K) + Q / max(||Q||, 1e-12)
    """
    _token_dims(x)
    with ops.scope_for("swift", x, wq):
        q = ops.matmul(x, wq)
        k = ops.matmul(x, wk)
        d = ops.value_of(q).shape[-1]
        alpha = ops.scale(ops.matmul(q, w_alpha), 1.0 / math.sqrt(d))
        g = ops.sum_axis(ops.mul(alpha, q), axis=1, keepdims=True)
        mixed = ops.linear(ops.mul(g, k), t_w, t_b)
        return ops.add(mixed, ops.l2_normalize(q, axis=-1))


def pool_mixer(x, kernel: int = 3, pad_mode: str = "zeros"):
    """Average pooling minus identity on NCHW maps; no parameters.

    Stride is 1 and padding kernel//2, so shape is preserved.  The
    identity subtraction makes the mixer a pure neighborhood exchange:
    constant inputs map to zero.
    """
    shape = ops.value_of(x).shape
    if len(shape) != 4:
        raise ShapeError(f"expected NCHW input, got shape {shape}")
    with ops.scope_for("pool", x):
        pooled = ops.avg_pool2d(x, kernel, 1, kernel // 2, pad_mode)
        return ops.add(pooled, ops.scale(x, -1.0))
