"""Raw numpy kernels: forward routines paired with explicit VJPs.

Conventions shared by every kernel here:
  * arrays are contiguous float32/float64, image layout [B, C, H, W]
  * convolution is cross-correlation (no kernel flip)
  * each forward returns (y, ctx); the matching backward consumes ctx and the
    upstream gradient and returns one gradient per differentiable input
  * same inputs produce bit-identical outputs; reductions use fixed numpy
    evaluation order
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .tensor import ConfigError, ConvSpec, ShapeError

INV_SQRT2 = float(1.0 / np.sqrt(2.0))
INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


# ---------------------------------------------------------------------------
# padding

def _pad2d(x, ph, pw, mode):
    if ph == 0 and pw == 0:
        return x
    width = ((0, 0), (0, 0), (ph, ph), (pw, pw))
    if mode == "zeros":
        return np.pad(x, width)
    return np.pad(x, width, mode="wrap")


def _unpad2d(gp, h, w, ph, pw, mode):
    """Backward of _pad2d. Circular mode folds the wrapped margins back."""
    if ph == 0 and pw == 0:
        return gp
    if mode == "zeros":
        return np.ascontiguousarray(gp[:, :, ph:ph + h, pw:pw + w])
    g = gp
    if ph:
        g[:, :, ph:2 * ph, :] += g[:, :, h + ph:h + 2 * ph, :]
        g[:, :, h:h + ph, :] += g[:, :, 0:ph, :]
    if pw:
        g[:, :, :, pw:2 * pw] += g[:, :, :, w + pw:w + 2 * pw]
        g[:, :, :, w:w + pw] += g[:, :, :, 0:pw]
    return np.ascontiguousarray(g[:, :, ph:ph + h, pw:pw + w])


def _check_circular(spec: ConvSpec, h, w):
    ph, pw = spec.padding
    if spec.pad_mode == "circular" and (ph > h or pw > w):
        raise ConfigError(
            f"circular padding {spec.padding} exceeds input extent {(h, w)}"
        )


# ---------------------------------------------------------------------------
# conv2d

def _im2col(xp, kh, kw, sh, sw, oh, ow):
    b, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw),
        writeable=False,
    )
    return win.reshape(b, c * kh * kw, oh * ow)


def _col2im(dcols, xp_shape, kh, kw, sh, sw, oh, ow):
    b, c, hp, wp = xp_shape
    d6 = dcols.reshape(b, c, kh, kw, oh, ow)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += d6[:, :, i, j]
    return dxp


def _conv_dense_fwd(xp, w, sh, sw, oh, ow):
    b = xp.shape[0]
    c_out = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, :, ::sh, ::sw]).reshape(b, xp.shape[1], oh * ow)
    else:
        cols = np.ascontiguousarray(_im2col(xp, kh, kw, sh, sw, oh, ow))
    w2 = w.reshape(c_out, -1)
    y = np.matmul(w2[None], cols).reshape(b, c_out, oh, ow)
    return y, cols


def _conv_dense_bwd(gy, cols, w, xp_shape, sh, sw, oh, ow):
    b, c_out = gy.shape[0], gy.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    g2 = gy.reshape(b, c_out, oh * ow)
    gt = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(c_out, -1)
    ct = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(cols.shape[1], -1)
    dw = (gt @ ct.T).reshape(w.shape)
    w2 = w.reshape(c_out, -1)
    dcols = np.matmul(w2.T[None], g2)
    if kh == 1 and kw == 1:
        dxp = np.zeros(xp_shape, dtype=gy.dtype)
        dxp[:, :, ::sh, ::sw] = dcols.reshape(b, xp_shape[1], oh, ow)
    else:
        dxp = _col2im(dcols, xp_shape, kh, kw, sh, sw, oh, ow)
    return dxp, dw


def _conv_dw_fwd(xp, w, sh, sw, oh, ow):
    b, c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    y = np.zeros((b, c, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y += w[:, 0, i, j][None, :, None, None] * xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
    return y


def _conv_dw_bwd(gy, xp, w, sh, sw, oh, ow):
    kh, kw = w.shape[2], w.shape[3]
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw]
            dw[:, 0, i, j] = np.einsum("bchw,bchw->c", gy, xs)
            dxp[:, :, i:i + sh * oh:sh, j:j + sw * ow:sw] += (
                w[:, 0, i, j][None, :, None, None] * gy
            )
    return dxp, dw


def conv2d_forward(x, w, b, spec: ConvSpec):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d [B, C, H, W], got {x.shape}")
    bsz, c_in, h, wdt = x.shape
    spec.validate(c_in, w.shape)
    _check_circular(spec, h, wdt)
    c_out = w.shape[0]
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv bias must have shape ({c_out},), got {b.shape}")
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oh, ow = spec.out_extent(h, wdt)
    xp = _pad2d(x, ph, pw, spec.pad_mode)
    groups = spec.groups
    if groups == 1:
        y, cols = _conv_dense_fwd(xp, w, sh, sw, oh, ow)
        saved = ("dense", cols)
    elif groups == c_in and c_out == c_in:
        y = _conv_dw_fwd(xp, w, sh, sw, oh, ow)
        saved = ("dw", xp)
    else:
        cg = c_in // groups
        cog = c_out // groups
        y = np.empty((bsz, c_out, oh, ow), dtype=x.dtype)
        saved_cols = []
        for g in range(groups):
            yg, cols = _conv_dense_fwd(xp[:, g * cg:(g + 1) * cg], w[g * cog:(g + 1) * cog], sh, sw, oh, ow)
            y[:, g * cog:(g + 1) * cog] = yg
            saved_cols.append(cols)
        saved = ("grouped", saved_cols)
    if b is not None:
        y += b[None, :, None, None]
    ctx = (saved, w, xp.shape, (h, wdt), spec, b is not None)
    return y, ctx


def conv2d_backward(ctx, gy):
    saved, w, xp_shape, (h, wdt), spec, has_bias = ctx
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    oh, ow = gy.shape[2], gy.shape[3]
    kind = saved[0]
    if kind == "dense":
        dxp, dw = _conv_dense_bwd(gy, saved[1], w, xp_shape, sh, sw, oh, ow)
    elif kind == "dw":
        dxp, dw = _conv_dw_bwd(gy, saved[1], w, sh, sw, oh, ow)
    else:
        groups = spec.groups
        c_in = xp_shape[1]
        cg = c_in // groups
        cog = w.shape[0] // groups
        dxp = np.zeros(xp_shape, dtype=gy.dtype)
        dw = np.zeros_like(w)
        for g, cols in enumerate(saved[1]):
            sub_shape = (xp_shape[0], cg, xp_shape[2], xp_shape[3])
            dxg, dwg = _conv_dense_bwd(
                gy[:, g * cog:(g + 1) * cog], cols, w[g * cog:(g + 1) * cog],
                sub_shape, sh, sw, oh, ow,
            )
            dxp[:, g * cg:(g + 1) * cg] = dxg
            dw[g * cog:(g + 1) * cog] = dwg
    dx = _unpad2d(dxp, h, wdt, ph, pw, spec.pad_mode)
    db = gy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling

def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be 4-d, got {x.shape}")
    y = x.mean(axis=(2, 3), keepdims=True)
    ctx = (x.shape,)
    return y, ctx


def global_avg_pool_backward(ctx, gy):
    (shape,) = ctx
    scale = 1.0 / (shape[2] * shape[3])
    return (np.broadcast_to(gy * scale, shape).astype(gy.dtype, copy=True),)


def avg_pool2d_forward(x, kernel: int, stride: int = 1, padding: int | None = None,
                       pad_mode: str = "zeros"):
    """Mean pooling; zero padding contributes nothing (averages over in-bounds
    cells only), so a constant input maps to the same constant."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d input must be 4-d, got {x.shape}")
    if padding is None:
        padding = kernel // 2
    spec = ConvSpec(kernel=(kernel, kernel), stride=(stride, stride),
                    padding=(padding, padding), pad_mode=pad_mode)
    bsz, c, h, w = x.shape
    _check_circular(spec, h, w)
    oh, ow = spec.out_extent(h, w)
    xp = _pad2d(x, padding, padding, pad_mode)
    acc = np.zeros((bsz, c, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            acc += xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    if pad_mode == "circular":
        cnt = np.full((1, 1, oh, ow), float(kernel * kernel), dtype=x.dtype)
    else:
        onep = _pad2d(np.ones((1, 1, h, w), dtype=x.dtype), padding, padding, "zeros")
        cnt = np.zeros((1, 1, oh, ow), dtype=x.dtype)
        for i in range(kernel):
            for j in range(kernel):
                cnt += onep[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    y = acc / cnt
    ctx = (x.shape, xp.shape, cnt, kernel, stride, padding, pad_mode)
    return y, ctx


def avg_pool2d_backward(ctx, gy):
    x_shape, xp_shape, cnt, kernel, stride, padding, pad_mode = ctx
    _, _, h, w = x_shape
    oh, ow = gy.shape[2], gy.shape[3]
    gw = gy / cnt
    dxp = np.zeros(xp_shape, dtype=gy.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gw
    return (_unpad2d(dxp, h, w, padding, padding, pad_mode),)


# ---------------------------------------------------------------------------
# batch norm

def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, *,
                        training: bool, momentum: float = 0.1, eps: float = 1e-5):
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-d, got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d {name} must have shape ({c},), got {arr.shape}")
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    n = x.shape[0] * x.shape[2] * x.shape[3]
    ctx = (xhat, gamma, inv, training, n)
    return y, ctx, new_rm, new_rv


def batchnorm2d_backward(ctx, gy):
    xhat, gamma, inv, training, n = ctx
    dgamma = np.einsum("bchw,bchw->c", gy, xhat)
    dbeta = gy.sum(axis=(0, 2, 3))
    dxhat = gy * gamma[None, :, None, None]
    if training:
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
    else:
        dx = dxhat * inv[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations

def relu_forward(x):
    y = np.maximum(x, 0)
    return y, (x > 0,)


def relu_backward(ctx, gy):
    (mask,) = ctx
    return (gy * mask,)


def sigmoid_forward(x):
    y = expit(x)
    return y, (y,)


def sigmoid_backward(ctx, gy):
    (y,) = ctx
    return (gy * y * (1.0 - y),)


def gelu_forward(x):
    # exact erf form
    y = 0.5 * x * (1.0 + erf(x * INV_SQRT2))
    return y, (x,)


def gelu_backward(ctx, gy):
    (x,) = ctx
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (gy * (cdf + x * pdf),)


ACTIVATIONS = {
    "relu": (relu_forward, relu_backward),
    "sigmoid": (sigmoid_forward, sigmoid_backward),
    "gelu": (gelu_forward, gelu_backward),
}


# ---------------------------------------------------------------------------
# linear algebra

def matmul_forward(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    y = np.matmul(a, b)
    return y, (a, b)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul_backward(ctx, gy):
    a, b = ctx
    ga = np.matmul(gy, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), gy)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def softmax_forward(x, axis: int = -1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return y, (y, axis)


def softmax_backward(ctx, gy):
    y, axis = ctx
    dot = (gy * y).sum(axis=axis, keepdims=True)
    return (y * (gy - dot),)


def l2_normalize_forward(x, axis: int = -1):
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    nc = np.maximum(n, np.asarray(1e-12, dtype=x.dtype))
    y = x / nc
    return y, (y, nc, axis)


def l2_normalize_backward(ctx, gy):
    y, nc, axis = ctx
    dot = (gy * y).sum(axis=axis, keepdims=True)
    return ((gy - y * dot) / nc,)


# ---------------------------------------------------------------------------
# elementwise and reductions

def _broadcastable(sa, sb, opname):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} do not broadcast") from None


def add_forward(a, b):
    _broadcastable(a.shape, b.shape, "add")
    return a + b, (a.shape, b.shape)


def add_backward(ctx, gy):
    sa, sb = ctx
    return _unbroadcast(gy, sa), _unbroadcast(gy, sb)


def mul_forward(a, b):
    _broadcastable(a.shape, b.shape, "mul")
    return a * b, (a, b)


def mul_backward(ctx, gy):
    a, b = ctx
    return _unbroadcast(gy * b, a.shape), _unbroadcast(gy * a, b.shape)


def scale_forward(x, c: float):
    return x * x.dtype.type(c), (x.dtype.type(c),)


def scale_backward(ctx, gy):
    (c,) = ctx
    return (gy * c,)


def sum_all_forward(x):
    return np.asarray(x.sum(), dtype=x.dtype), (x.shape,)


def sum_all_backward(ctx, gy):
    (shape,) = ctx
    return (np.full(shape, gy, dtype=gy.dtype),)


def sum_axis_forward(x, axis: int, keepdims: bool = True):
    return x.sum(axis=axis, keepdims=keepdims), (x.shape, axis, keepdims)


def sum_axis_backward(ctx, gy):
    shape, axis, keepdims = ctx
    g = gy if keepdims else np.expand_dims(gy, axis)
    return (np.broadcast_to(g, shape).astype(gy.dtype, copy=True),)


def reshape_forward(x, shape):
    return x.reshape(shape), (x.shape,)


def reshape_backward(ctx, gy):
    (shape,) = ctx
    return (gy.reshape(shape),)


def swapaxes_forward(x, ax1: int, ax2: int):
    return np.ascontiguousarray(np.swapaxes(x, ax1, ax2)), (ax1, ax2)


def swapaxes_backward(ctx, gy):
    ax1, ax2 = ctx
    return (np.ascontiguousarray(np.swapaxes(gy, ax1, ax2)),)


# ---------------------------------------------------------------------------
# loss

def cross_entropy_forward(logits, labels, smoothing: float = 0.0):
    """Mean softmax cross-entropy with uniform label smoothing."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be 2-d [B, K], got {logits.shape}")
    bsz, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (bsz,):
        raise ShapeError(f"cross_entropy labels must have shape ({bsz},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"cross_entropy labels out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    target = np.full((bsz, k), smoothing / k, dtype=logits.dtype)
    target[np.arange(bsz), labels] += 1.0 - smoothing
    loss = np.asarray(-(target * logp).sum() / bsz, dtype=logits.dtype)
    ctx = (np.exp(logp), target, bsz)
    return loss, ctx


def cross_entropy_backward(ctx, gy):
    p, target, bsz = ctx
    return ((p - target) * (gy / bsz),)
