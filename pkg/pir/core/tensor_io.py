"""TNSR binary tensors and sRGB PNG previews.

TNSR layout (little-endian): magic ``b"TNSR"``, ``u32 ndim``, ``ndim x u32``
dims, then row-major ``f32`` payload.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from PIL import Image

from pir.core.errors import BadMagicError, DimOverflowError, TensorFormatError, TruncatedPayloadError

MAGIC = b"TNSR"
MAX_NDIM = 16
MAX_ELEMENTS = 1 << 34

PathLike = Union[str, Path]


def tensor_write(path: PathLike, dims: Sequence[int], data) -> None:
    dims = [int(d) for d in dims]
    if not dims or any(d <= 0 for d in dims):
        raise TensorFormatError(f"tensor dims must all be positive: {dims}")
    if len(dims) > MAX_NDIM or any(d >= 1 << 32 for d in dims):
        raise DimOverflowError(f"tensor dims do not fit the TNSR header: {dims}")
    payload = np.ascontiguousarray(np.asarray(data, dtype=np.float32)).reshape(-1)
    expected = int(np.prod(dims, dtype=np.int64))
    if payload.size != expected:
        raise TensorFormatError(f"payload has {payload.size} values, dims {dims} need {expected}")
    if not np.all(np.isfinite(payload)):
        raise TensorFormatError(f"refusing to write non-finite values to {path}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = MAGIC + np.asarray([len(dims)] + dims, dtype="<u4").tobytes()
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload.astype("<f4", copy=False).tobytes())


def tensor_read(path: PathLike) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Return ``(dims, data)`` with ``data`` a float32 array already shaped to dims."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        if len(raw) >= 4 and raw[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    ndim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=4)[0])
    if ndim == 0 or ndim > MAX_NDIM:
        raise DimOverflowError(f"{path}: ndim {ndim} outside 1..{MAX_NDIM}")
    data_offset = 8 + 4 * ndim
    if len(raw) < data_offset:
        raise TruncatedPayloadError(f"{path}: dims truncated")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype="<u4", count=ndim, offset=8))
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"{path}: zero-sized dim in {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > MAX_ELEMENTS:
            raise DimOverflowError(f"{path}: dims {dims} exceed {MAX_ELEMENTS} elements")
    available = len(raw) - data_offset
    if available < 4 * count:
        raise TruncatedPayloadError(f"{path}: payload has {available} bytes, dims {dims} need {4 * count}")
    if available > 4 * count:
        raise TensorFormatError(f"{path}: {available - 4 * count} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=data_offset).astype(np.float32).reshape(dims)
    return dims, data


def srgb_encode(linear):
    """Standard sRGB transfer on values clamped to [0, 1]; accepts floats or arrays."""
    x = np.clip(np.asarray(linear, dtype=np.float64), 0.0, 1.0)
    encoded = np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)
    if encoded.ndim == 0:
        return float(encoded)
    return encoded


def write_png(path: PathLike, linear_rgb: np.ndarray) -> None:
    """8-bit sRGB preview of a linear HxW, HxWx1 or HxWx3 buffer."""
    array = np.asarray(linear_rgb, dtype=np.float64)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[..., 0]
    encoded = np.round(srgb_encode(array) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(encoded).save(path)
