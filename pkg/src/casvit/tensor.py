"""Dense tensor value type and shared conv geometry.

Everything downstream moves [B, C, H, W] row-major float32/float64 arrays.
The wrapper stays deliberately thin: kernels work on the raw numpy buffer,
the class only enforces dtype and layout discipline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand extents do not line up for the requested op."""


class ConfigError(ValueError):
    """Structurally invalid configuration (bad groups, unknown mode, ...)."""


def _check_dtype(dt: np.dtype) -> np.dtype:
    if dt.type not in SUPPORTED_DTYPES:
        raise ConfigError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Contiguous row-major n-d array of float32 or float64."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        _check_dtype(arr.dtype)
        self.data = np.ascontiguousarray(arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, dtype=dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def full(shape, value, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


PAD_MODES = ("zeros", "circular")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d convolution (cross-correlation, no kernel flip).

    pad_mode "circular" exists solely so shift-equivariance tests can hold
    exactly; models run with zero padding.
    """

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    pad_mode: str = "zeros"

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if kh < 1 or kw < 1:
            raise ConfigError(f"kernel extents must be positive, got {self.kernel}")
        if sh < 1 or sw < 1:
            raise ConfigError(f"stride extents must be positive, got {self.stride}")
        if ph < 0 or pw < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        if self.pad_mode not in PAD_MODES:
            raise ConfigError(f"unknown pad_mode {self.pad_mode!r}; expected one of {PAD_MODES}")

    def out_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output would be empty: input {h}x{w}, kernel {self.kernel}, "
                f"stride {self.stride}, padding {self.padding}"
            )
        return oh, ow

    def validate(self, c_in: int, w_shape: tuple[int, ...]) -> None:
        if len(w_shape) != 4:
            raise ShapeError(f"conv weight must be 4-d [Cout, Cin/groups, kh, kw], got {w_shape}")
        c_out, c_grp, kh, kw = w_shape
        if (kh, kw) != self.kernel:
            raise ShapeError(f"weight kernel {(kh, kw)} does not match spec kernel {self.kernel}")
        if c_in % self.groups != 0:
            raise ConfigError(f"groups={self.groups} does not divide in_channels={c_in}")
        if c_out % self.groups != 0:
            raise ConfigError(f"groups={self.groups} does not divide out_channels={c_out}")
        if c_grp != c_in // self.groups:
            raise ShapeError(
                f"weight expects {c_grp} channels per group, input supplies "
                f"{c_in // self.groups} ({c_in} channels / {self.groups} groups)"
            )
