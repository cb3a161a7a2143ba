"""Model checkpoints: bit-exact round trips with layered validation.

Little-endian binary layout:

    magic     4 bytes  b"CASV"
    version   u16
    cfg_len   u32, then cfg_len bytes of config JSON
    n_entries u32
    entry table, one record per tensor:
        name_len u16, name bytes (utf8; "w/" weights, "b/" buffers)
        dtype    u8 (0 = f32, 1 = f64)
        rank     u8
        extents  rank * u32
        offset   u64 (absolute file offset of the raw payload)
    payloads  raw little-endian tensor bytes

Every failure mode carries a distinct code: bad_magic, bad_version,
format, truncated, overlap, shape_mismatch.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import Model, VariantConfig
from .tensor import ConfigError, Tensor

MAGIC = b"CASV"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    def __init__(self, message: str, code: str):
        super().__init__(message)
        self.code = code


def _entries(model: Model):
    for k, v in model.weights.items():
        yield "w/" + k, v
    for k, v in model.buffers.items():
        yield "b/" + k, v


def save_checkpoint(model: Model, path) -> None:
    cfg_blob = model.config.to_json().encode("utf-8")
    names, tensors = [], []
    for name, t in _entries(model):
        if t.data.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name} has unsupported dtype {t.dtype}",
                                  code="format")
        names.append(name.encode("utf-8"))
        tensors.append(t)
    table_size = sum(2 + len(n) + 1 + 1 + 4 * t.data.ndim + 8
                     for n, t in zip(names, tensors))
    offset = 4 + 2 + 4 + len(cfg_blob) + 4 + table_size
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", len(names)))
        for n, t in zip(names, tensors):
            f.write(struct.pack("<H", len(n)))
            f.write(n)
            f.write(struct.pack("<BB", _DTYPE_TAGS[t.data.dtype], t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            f.write(struct.pack("<Q", offset))
            offset += t.data.nbytes
        for t in tensors:
            f.write(np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            missing = self.pos + n - len(self.blob)
            raise CheckpointError(f"truncated while reading {what}: {missing} "
                                  f"bytes missing", code="truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}",
                              code="bad_magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}, expected {VERSION}",
                              code="bad_version")
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_blob = r.take(cfg_len, "config")
    try:
        cfg = VariantConfig.from_json(cfg_blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, ConfigError, TypeError) as e:
        raise CheckpointError(f"unreadable config: {e}", code="format") from e

    (n_entries,) = r.unpack("<I", "entry count")
    entries = []
    for i in range(n_entries):
        (name_len,) = r.unpack("<H", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8", "replace")
        tag, rank = r.unpack("<BB", f"entry {name} header")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"entry {name} has unknown dtype tag {tag}",
                                  code="format")
        extents = r.unpack(f"<{rank}I", f"entry {name} extents")
        (offset,) = r.unpack("<Q", f"entry {name} offset")
        entries.append((name, _TAG_DTYPES[tag], extents, offset))

    payload_start = r.pos
    spans = []
    for name, dtype, extents, offset in entries:
        nbytes = int(np.prod(extents, dtype=np.int64)) * dtype.itemsize
        if offset < payload_start:
            raise CheckpointError(f"entry {name} payload overlaps the header",
                                  code="overlap")
        if offset + nbytes > len(blob):
            missing = offset + nbytes - len(blob)
            raise CheckpointError(f"truncated payload for {name}: {missing} "
                                  f"bytes missing", code="truncated")
        spans.append((offset, offset + nbytes, name))
    for (s1, e1, n1), (s2, e2, n2) in zip(sorted(spans), sorted(spans)[1:]):
        if e1 > s2:
            raise CheckpointError(f"payloads of {n1} and {n2} overlap",
                                  code="overlap")

    weights, buffers = {}, {}
    for name, dtype, extents, offset in entries:
        count = int(np.prod(extents, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dtype, count=count,
                            offset=offset).reshape(extents)
        t = Tensor(arr.astype(arr.dtype.newbyteorder("="), copy=True))
        if name.startswith("w/"):
            weights[name[2:]] = t
        elif name.startswith("b/"):
            buffers[name[2:]] = t
        else:
            raise CheckpointError(f"entry {name} has no w/ or b/ namespace",
                                  code="format")
    return Model(cfg, weights, buffers)


def check_shapes(expected: Model, loaded: Model) -> None:
    """Guard against loading weights across variants.

    Walks the expected tensors in deterministic order and raises on the
    first missing or differently shaped entry.
    """
    for kind, exp, got in (("weight", expected.weights, loaded.weights),
                           ("buffer", expected.buffers, loaded.buffers)):
        for name, t in exp.items():
            if name not in got:
                raise CheckpointError(f"missing {kind} {name}",
                                      code="shape_mismatch")
            if got[name].shape != t.shape:
                raise CheckpointError(
                    f"{kind} {name} has shape {got[name].shape}, expected "
                    f"{t.shape}", code="shape_mismatch")
        extra = [n for n in got if n not in exp]
        if extra:
            raise CheckpointError(f"unexpected {kind} {extra[0]}",
                                  code="shape_mismatch")


def load_into(model: Model, path) -> Model:
    """Load a checkpoint that must structurally match ``model``."""
    loaded = load_checkpoint(path)
    check_shapes(model, loaded)
    return loaded
