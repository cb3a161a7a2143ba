"""End to end on the synthetic shapes task.

Renders a dataset, fits the desk-scale preset, then round-trips the
result through a checkpoint file and shows the reload is bit-exact.
"""

import tempfile
from pathlib import Path

import numpy as np

from casvit import (TrainConfig, build_variant, evaluate, generate_shapes,
                    load_checkpoint, save_checkpoint, train)

ds = generate_shapes(4000, size=32, seed=0)
train_ds, val_ds = ds.split(0.2, seed=0)
print(f"dataset: {len(train_ds)} train / {len(val_ds)} val, "
      f"{ds.num_classes} classes, {ds.images.shape[2]}x{ds.images.shape[3]}")

model = build_variant("tiny", seed=0, num_classes=4)
print(f"model: tiny, {model.param_count():,} parameters")
print(f"random-init accuracy: {evaluate(model, val_ds)['accuracy']:.3f}")
print()

cfg = TrainConfig(epochs=30, batch_size=64, seed=0, target_accuracy=0.95)
history = train(model, train_ds, cfg, val_ds, log=print)
final = evaluate(model, val_ds)
print(f"\nstopped after {len(history)} epoch(s), "
      f"val accuracy {final['accuracy']:.3f}, loss {final['loss']:.4f}")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "tiny.casv"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    same = all(np.array_equal(back.weights[k].data, v.data)
               for k, v in model.weights.items())
    again = evaluate(back, val_ds)
    print(f"checkpoint: {path.stat().st_size:,} bytes, "
          f"weights bit-exact={same}, "
          f"reloaded accuracy {again['accuracy']:.3f}")
