"""Rank-4 (N, C, H, W) tensor helpers: oriented padding, flips, channel
split/concat, and the ``.ften`` binary tensor format.

Tensors are plain numpy arrays in C order with dtype float32 or float64.
The element at (n, c, h, w) lives at flat offset ((n*C + c)*H + h)*W + w,
which is exactly numpy's row-major layout, so no wrapper class is needed.
"""

from __future__ import annotations

import struct
from enum import Enum

import numpy as np

from .errors import (
    BadMagic,
    IndivisibleChannels,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedDtype,
)

MAGIC = b"FINCTEN\x00"
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

HEIGHT_AXIS = 2
WIDTH_AXIS = 3


class Orientation(Enum):
    """Which corner of the canvas receives the zero padding.

    TL pads the top and left sides, so the image ends up in the
    bottom-right corner of the padded canvas; the other three follow the
    same naming rule.  TL is canonical: the others reduce to it by
    flipping along the axes listed in ``flip_axes``.
    """

    TL = "tl"
    TR = "tr"
    BL = "bl"
    BR = "br"

    @property
    def pads_top(self) -> bool:
        return self in (Orientation.TL, Orientation.TR)

    @property
    def pads_left(self) -> bool:
        return self in (Orientation.TL, Orientation.BL)

    @property
    def flip_axes(self) -> tuple[str, ...]:
        """Axes along which to flip to turn this orientation into TL."""
        axes = []
        if not self.pads_top:
            axes.append("height")
        if not self.pads_left:
            axes.append("width")
        return tuple(axes)


def require_nchw(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate that ``x`` is a rank-4 float32/float64 array."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"{name} must be rank-4 (N,C,H,W), got shape {x.shape}")
    if x.dtype not in (np.float32, np.float64):
        raise ShapeMismatch(f"{name} must be float32 or float64, got {x.dtype}")
    if any(d < 1 for d in x.shape):
        raise ShapeMismatch(f"{name} has an empty dimension: {x.shape}")
    return np.ascontiguousarray(x)


def flip(x: np.ndarray, axes: tuple[str, ...] | list[str] | set[str]) -> np.ndarray:
    """Flip along a subset of {"height", "width"}. Involution per axis."""
    x = require_nchw(x)
    axset = set(axes)
    unknown = axset - {"height", "width"}
    if unknown:
        raise ShapeMismatch(f"unknown flip axes: {sorted(unknown)}")
    out = x
    if "height" in axset:
        out = np.flip(out, axis=HEIGHT_AXIS)
    if "width" in axset:
        out = np.flip(out, axis=WIDTH_AXIS)
    return np.ascontiguousarray(out)


def pad_oriented(x: np.ndarray, orientation: Orientation, k: int) -> np.ndarray:
    """Zero-pad ``x`` by k-1 on the two sides named by ``orientation``.

    Output is (N, C, H+k-1, W+k-1); the original values occupy the corner
    opposite the padded sides and every padded entry is exactly +0.0.
    """
    x = require_nchw(x)
    if k < 1:
        raise ShapeMismatch(f"kernel size must be >= 1, got {k}")
    p = k - 1
    top = p if orientation.pads_top else 0
    left = p if orientation.pads_left else 0
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + p, w + p), dtype=x.dtype)
    out[:, :, top : top + h, left : left + w] = x
    return out


def channel_split(x: np.ndarray, parts: int) -> list[np.ndarray]:
    """Split along the channel axis into ``parts`` equal pieces."""
    x = require_nchw(x)
    c = x.shape[1]
    if parts < 1 or c % parts != 0:
        raise IndivisibleChannels(f"C={c} not divisible into {parts} parts")
    step = c // parts
    return [np.ascontiguousarray(x[:, i * step : (i + 1) * step]) for i in range(parts)]


def channel_concat(xs: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the channel axis; inverse of channel_split."""
    if not xs:
        raise ShapeMismatch("cannot concat an empty list")
    xs = [require_nchw(x) for x in xs]
    first = xs[0]
    for x in xs[1:]:
        if x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
            raise ShapeMismatch(f"cannot concat {x.shape} with {first.shape}")
        if x.dtype != first.dtype:
            raise ShapeMismatch(f"cannot concat {x.dtype} with {first.dtype}")
    return np.ascontiguousarray(np.concatenate(xs, axis=1))


def write_tensor(path, x: np.ndarray) -> None:
    """Write ``x`` to ``path`` in the .ften format (lossless)."""
    x = require_nchw(x)
    code = DTYPE_CODES[x.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", code))
        fh.write(b"\x00" * 4)
        fh.write(struct.pack("<4I", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=CODE_DTYPES[code]).tobytes())


def read_tensor(path) -> np.ndarray:
    """Read a .ften file back into a contiguous (N,C,H,W) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not a .ften file")
    header_end = len(MAGIC) + 1 + 4 + 16
    if len(data) < header_end:
        raise TruncatedFile(f"{path}: header truncated")
    code = data[len(MAGIC)]
    if code not in CODE_DTYPES:
        raise UnsupportedDtype(f"{path}: unknown dtype code {code}")
    dims = struct.unpack("<4I", data[len(MAGIC) + 5 : header_end])
    if any(d < 1 for d in dims):
        raise TruncatedFile(f"{path}: empty dimension in header {dims}")
    dtype = CODE_DTYPES[code]
    count = int(np.prod([int(d) for d in dims], dtype=np.int64))
    payload = data[header_end:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedFile(
            f"{path}: expected {count} elements, found {len(payload) // dtype.itemsize}"
        )
    arr = np.frombuffer(payload[: count * dtype.itemsize], dtype=dtype).reshape(dims)
    native = np.float32 if code == 1 else np.float64
    return np.array(arr, dtype=native, order="C")
