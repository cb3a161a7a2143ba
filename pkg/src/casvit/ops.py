"""Functional op surface shared by inference and training.

Every op accepts Tensor or Node operands. With plain Tensors it just runs the
kernel and hands back a Tensor; if any operand is a Node the result is
recorded on that node's tape with a VJP closure, and the op kind plus the
active scope become auditable tape metadata. Model code is therefore written
once and runs in both worlds.
"""
from __future__ import annotations

import contextlib

import numpy as np

from . import kernels as K
from .autograd import Node, Tape
from .tensor import ConfigError, ConvSpec, Tensor


def _tape_of(*vals) -> Tape | None:
    tape = None
    for v in vals:
        if isinstance(v, Node):
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ConfigError("operands belong to different tapes")
    return tape


def _raw(v):
    if v is None:
        return None
    if isinstance(v, Node):
        return v.value.data
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v)


def _pid(v):
    return v.idx if isinstance(v, Node) else None


def value_of(v) -> Tensor:
    return v.value if isinstance(v, Node) else v


def scope_for(name: str, *vals):
    """Tape scope context if any operand is taped, else a no-op."""
    tape = _tape_of(*(v for v in vals if isinstance(v, Node)))
    return tape.scope(name) if tape is not None else contextlib.nullcontext()


# ---------------------------------------------------------------------------
# convolution and pooling

def conv2d(x, w, b=None, spec: ConvSpec | None = None):
    if spec is None:
        raise ConfigError("conv2d requires an explicit ConvSpec")
    tape = _tape_of(x, w, b)
    xr, wr = _raw(x), _raw(w)
    y, ctx = K.conv2d_forward(xr, wr, _raw(b), spec)
    if tape is None:
        return Tensor(y)
    cin_pg, kh, kw = wr.shape[1:]
    meta = {"macs": y.size * kh * kw * cin_pg, "in_hw": xr.shape[2:]}
    return tape.record("conv2d", Tensor(y), (_pid(x), _pid(w), _pid(b)),
                       lambda g: K.conv2d_backward(ctx, g), meta=meta)


def global_avg_pool(x):
    tape = _tape_of(x)
    y, ctx = K.global_avg_pool_forward(_raw(x))
    if tape is None:
        return Tensor(y)
    return tape.record("global_avg_pool", Tensor(y), (_pid(x),),
                       lambda g: K.global_avg_pool_backward(ctx, g),
                       meta={"adds": _raw(x).size})


def avg_pool2d(x, kernel: int, stride: int = 1, padding: int | None = None,
               pad_mode: str = "zeros"):
    tape = _tape_of(x)
    y, ctx = K.avg_pool2d_forward(_raw(x), kernel, stride, padding, pad_mode)
    if tape is None:
        return Tensor(y)
    return tape.record("avg_pool", Tensor(y), (_pid(x),),
                       lambda g: K.avg_pool2d_backward(ctx, g),
                       meta={"adds": y.size * kernel * kernel})


# ---------------------------------------------------------------------------
# normalization

def batchnorm2d(x, gamma, beta, running_mean: Tensor, running_var: Tensor, *,
                training: bool = False, momentum: float = 0.1, eps: float = 1e-5):
    """Batch norm over (B, H, W) per channel.

    running_mean/running_var are plain buffers, never taped; train mode
    refreshes them in place via EMA, which is the one sanctioned side effect
    in this module.
    """
    tape = _tape_of(x, gamma, beta)
    y, ctx, new_rm, new_rv = K.batchnorm2d_forward(
        _raw(x), _raw(gamma), _raw(beta), running_mean.data, running_var.data,
        training=training, momentum=momentum, eps=eps)
    if training:
        running_mean.data[...] = new_rm
        running_var.data[...] = new_rv
    if tape is None:
        return Tensor(y)
    return tape.record("batchnorm", Tensor(y), (_pid(x), _pid(gamma), _pid(beta)),
                       lambda g: K.batchnorm2d_backward(ctx, g))


# ---------------------------------------------------------------------------
# activations

def activation(x, kind: str):
    if kind not in K.ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}")
    fwd, bwd = K.ACTIVATIONS[kind]
    tape = _tape_of(x)
    y, ctx = fwd(_raw(x))
    if tape is None:
        return Tensor(y)
    return tape.record(kind, Tensor(y), (_pid(x),), lambda g: bwd(ctx, g))


def relu(x):
    return activation(x, "relu")


def sigmoid(x):
    return activation(x, "sigmoid")


def gelu(x):
    return activation(x, "gelu")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    tape = _tape_of(a, b)
    ar = _raw(a)
    y, ctx = K.matmul_forward(ar, _raw(b))
    if tape is None:
        return Tensor(y)
    return tape.record("matmul", Tensor(y), (_pid(a), _pid(b)),
                       lambda g: K.matmul_backward(ctx, g),
                       meta={"macs": y.size * ar.shape[-1]})


def softmax(x, axis: int = -1):
    tape = _tape_of(x)
    y, ctx = K.softmax_forward(_raw(x), axis)
    if tape is None:
        return Tensor(y)
    return tape.record("softmax", Tensor(y), (_pid(x),),
                       lambda g: K.softmax_backward(ctx, g))


def l2_normalize(x, axis: int = -1):
    tape = _tape_of(x)
    y, ctx = K.l2_normalize_forward(_raw(x), axis)
    if tape is None:
        return Tensor(y)
    return tape.record("l2_normalize", Tensor(y), (_pid(x),),
                       lambda g: K.l2_normalize_backward(ctx, g))


def linear(x, w, b=None):
    """Dense map on the trailing axis: x @ w (+ b)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ---------------------------------------------------------------------------
# elementwise, reductions, shape

def add(a, b):
    tape = _tape_of(a, b)
    y, ctx = K.add_forward(_raw(a), _raw(b))
    if tape is None:
        return Tensor(y)
    return tape.record("add", Tensor(y), (_pid(a), _pid(b)),
                       lambda g: K.add_backward(ctx, g))


def mul(a, b):
    tape = _tape_of(a, b)
    y, ctx = K.mul_forward(_raw(a), _raw(b))
    if tape is None:
        return Tensor(y)
    return tape.record("mul", Tensor(y), (_pid(a), _pid(b)),
                       lambda g: K.mul_backward(ctx, g),
                       meta={"elems": y.size})


def scale(x, c: float):
    tape = _tape_of(x)
    y, ctx = K.scale_forward(_raw(x), c)
    if tape is None:
        return Tensor(y)
    return tape.record("scale", Tensor(y), (_pid(x),),
                       lambda g: K.scale_backward(ctx, g))


def sum_all(x):
    tape = _tape_of(x)
    y, ctx = K.sum_all_forward(_raw(x))
    if tape is None:
        return Tensor(y)
    return tape.record("sum", Tensor(y), (_pid(x),),
                       lambda g: K.sum_all_backward(ctx, g))


def sum_axis(x, axis: int, keepdims: bool = True):
    tape = _tape_of(x)
    y, ctx = K.sum_axis_forward(_raw(x), axis, keepdims)
    if tape is None:
        return Tensor(y)
    return tape.record("sum", Tensor(y), (_pid(x),),
                       lambda g: K.sum_axis_backward(ctx, g))


def reshape(x, shape):
    tape = _tape_of(x)
    y, ctx = K.reshape_forward(_raw(x), shape)
    if tape is None:
        return Tensor(y)
    return tape.record("reshape", Tensor(y), (_pid(x),),
                       lambda g: K.reshape_backward(ctx, g))


def swapaxes(x, ax1: int, ax2: int):
    tape = _tape_of(x)
    y, ctx = K.swapaxes_forward(_raw(x), ax1, ax2)
    if tape is None:
        return Tensor(y)
    return tape.record("swapaxes", Tensor(y), (_pid(x),),
                       lambda g: K.swapaxes_backward(ctx, g))


# ---------------------------------------------------------------------------
# loss

def cross_entropy(logits, labels, smoothing: float = 0.0):
    tape = _tape_of(logits)
    y, ctx = K.cross_entropy_forward(_raw(logits), np.asarray(labels), smoothing)
    if tape is None:
        return Tensor(y)
    return tape.record("cross_entropy", Tensor(y), (_pid(logits),),
                       lambda g: K.cross_entropy_backward(ctx, g))
