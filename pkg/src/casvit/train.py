"""Training loop: decoupled weight decay Adam, cosine schedule, plus a
pure, chunk-invariant evaluator.

The loop trains any model exposing ``weights``/``buffers`` dicts and a
``logits(x, train=, weights=)`` method.  Divergence aborts with the
scope path of the first op that produced a non-finite value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tape, backward
from .data import Dataset, preprocess
from .tensor import ConfigError, Tensor


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 3e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_frac: float = 0.1
    label_smoothing: float = 0.1
    seed: int = 0
    shuffle: bool = True
    # stop once validation accuracy reaches this level
    target_accuracy: float | None = None
    # calibration batch for settling norm statistics after each epoch
    # (0 disables)
    stats_batch: int = 512

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.stats_batch < 0:
            raise ConfigError("stats_batch must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if not (self.target_accuracy is None or 0.0 < self.target_accuracy <= 1.0):
            raise ConfigError("target_accuracy must be in (0, 1]")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup over the leading fraction, cosine decay to zero."""
    warm = int(round(total_steps * cfg.warmup_frac))
    if step < warm:
        return cfg.base_lr * (step + 1) / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, (step - warm) / span)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay; decay applies only to rank >= 2 tensors,
    so biases and norm affines stay undamped."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict, grads, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for name, w in weights.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(w.data)
                self.v[name] = np.zeros_like(w.data)
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
            if w.data.ndim >= 2:
                update = update + cfg.weight_decay * w.data
            w.data -= (lr * update).astype(w.data.dtype, copy=False)


# must match the update rate the forward passes use
_BN_MOMENTUM = 0.1


def settle_norm_stats(model, ds: Dataset, batch: int = 512, seed: int = 0) -> None:
    """Pin normalization buffers to the statistics of a calibration batch.

    Running estimates trail the weights whenever an epoch is only a
    handful of steps, which drags eval-mode accuracy far below train
    mode.  With frozen weights, one train-mode forward updates every
    buffer as new = (1 - m) * old + m * batch_stat; solving that for
    batch_stat makes the buffers exactly the calibration statistics.
    """
    take = min(len(ds), batch)
    if take == 0:
        return
    idx = np.random.default_rng(seed).permutation(len(ds))[:take]
    old = {k: v.data.astype(np.float64) for k, v in model.buffers.items()}
    model.logits(Tensor(preprocess(ds.images[idx])), train=True)
    m = _BN_MOMENTUM
    for k, buf in model.buffers.items():
        stat = (buf.data.astype(np.float64) - (1.0 - m) * old[k]) / m
        if k.endswith(".var"):
            stat = np.maximum(stat, 0.0)
        buf.data[...] = stat.astype(buf.data.dtype)


class DivergenceError(RuntimeError):
    def __init__(self, node_path: str):
        super().__init__(f"non-finite values first appeared at {node_path}")
        self.node_path = node_path


def _first_nonfinite(tape: Tape) -> str:
    for node in tape.nodes:
        if not np.all(np.isfinite(node.value.data)):
            label = node.name or node.op
            return f"{node.scope}/{label}" if node.scope else label
    return "<loss>"


def _per_sample_loss(logits: np.ndarray, labels: np.ndarray,
                     smoothing: float) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    k = logits.shape[1]
    picked = logp[np.arange(len(labels)), labels]
    return -(1.0 - smoothing) * picked - (smoothing / k) * logp.sum(axis=1)


def evaluate(model, ds: Dataset, batch_size: int = 256,
             label_smoothing: float = 0.0) -> dict:
    """Accuracy and mean loss in eval mode.

    Per-sample losses are gathered first and reduced once at the end,
    so the result does not depend on the chunk size.
    """
    losses = np.zeros(len(ds), dtype=np.float64)
    hits = 0
    for lo in range(0, len(ds), batch_size):
        hi = min(lo + batch_size, len(ds))
        x = Tensor(preprocess(ds.images[lo:hi]))
        labels = ds.labels[lo:hi].astype(np.int64)
        logits = model.logits(x).data
        losses[lo:hi] = _per_sample_loss(logits, labels, label_smoothing)
        hits += int((logits.argmax(axis=1) == labels).sum())
    return {"accuracy": hits / max(1, len(ds)),
            "loss": float(losses.mean()) if len(ds) else 0.0}


def train(model, train_ds: Dataset, cfg: TrainConfig, val_ds: Dataset | None = None,
          log=None) -> list:
    """Optimize the model in place; returns one metrics dict per epoch."""
    n = len(train_ds)
    if n == 0:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(cfg)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        running_loss, running_hits = 0.0, 0
        lr = cfg.base_lr
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x_np = preprocess(train_ds.images[idx])
            labels = train_ds.labels[idx].astype(np.int64)
            tape = Tape()
            x = tape.leaf(Tensor(x_np), name="input", trainable=False)
            logits = model.logits(x, train=True, weights=model.taped_weights(tape))
            loss = ops.cross_entropy(logits, labels, cfg.label_smoothing)
            loss_val = loss.value.data.item()
            if not math.isfinite(loss_val):
                raise DivergenceError(_first_nonfinite(tape))
            grads = backward(tape, loss)
            lr = lr_at(step, total_steps, cfg)
            opt.step(model.weights, grads, lr)
            step += 1
            running_loss += loss_val * len(idx)
            running_hits += int((logits.value.data.argmax(axis=1) == labels).sum())
        if cfg.stats_batch:
            settle_norm_stats(model, train_ds, cfg.stats_batch, cfg.seed)
        entry = {"epoch": epoch + 1, "lr": lr,
                 "train_loss": running_loss / n, "train_accuracy": running_hits / n}
        if val_ds is not None:
            val = evaluate(model, val_ds)
            entry["val_accuracy"] = val["accuracy"]
            entry["val_loss"] = val["loss"]
        history.append(entry)
        if log is not None:
            parts = [f"epoch {entry['epoch']:3d}", f"lr {entry['lr']:.2e}",
                     f"loss {entry['train_loss']:.4f}",
                     f"acc {entry['train_accuracy']:.3f}"]
            if "val_accuracy" in entry:
                parts.append(f"val_acc {entry['val_accuracy']:.3f}")
            log("  ".join(parts))
        if (cfg.target_accuracy is not None and val_ds is not None
                and entry["val_accuracy"] >= cfg.target_accuracy):
            break
    return history
