from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch

from pir.core.errors import ShapeMismatchError, TensorFormatError
from pir.core.tensor_io import tensor_read, tensor_write, write_png


@dataclass(frozen=True)
class ImageBuffer:
    """Linear-radiometry image, row-major HxWxC float32."""

    data: np.ndarray

    def __post_init__(self) -> None:
        array = np.asarray(self.data, dtype=np.float32)
        if array.ndim == 2:
            array = array[..., None]
        if array.ndim != 3 or min(array.shape) <= 0:
            raise ShapeMismatchError(f"image buffer must be HxWxC, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise TensorFormatError("image buffer contains non-finite values")
        array = np.ascontiguousarray(array)
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.array(self.data)).to(dtype)

    def save(self, path: Union[str, Path]) -> None:
        tensor_write(path, self.data.shape, self.data)

    def save_preview(self, path: Union[str, Path]) -> None:
        write_png(path, self.data)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ImageBuffer":
        dims, data = tensor_read(path)
        if len(dims) not in (2, 3):
            raise ShapeMismatchError(f"{path}: expected an HxWxC tensor, got dims {dims}")
        return cls(data)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "ImageBuffer":
        return cls(tensor.detach().cpu().to(torch.float32).numpy())
