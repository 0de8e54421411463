from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import torch

from pir.core.errors import DatasetError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward), camera-to-world pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        pose = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise DatasetError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise DatasetError(f"image dims must be positive, got {self.width}x{self.height}")
        rot = pose[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise DatasetError("camera pose rotation block is not orthonormal")
        pose = pose.copy()
        pose.setflags(write=False)
        object.__setattr__(self, "c2w", pose)

    # poses

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        width: int,
        height: int,
        fov_degrees: float = 40.0,
        up: Sequence[float] = (0.0, 0.0, 1.0),
    ) -> "Camera":
        eye_v = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye_v
        forward /= np.linalg.norm(forward)
        up_v = np.asarray(up, dtype=np.float64)
        if abs(float(np.dot(forward, up_v))) > 0.999:
            up_v = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up_v)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye_v
        focal = 0.5 * width / np.tan(0.5 * np.radians(fov_degrees))
        return cls(focal, focal, 0.5 * width, 0.5 * height, int(width), int(height), pose)

    def origin(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.c2w[:3, 3], dtype=dtype)

    def rotation(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.c2w[:3, :3], dtype=dtype)

    # rays

    def pixel_grid(self) -> Tuple[torch.Tensor, torch.Tensor]:
        rows, cols = torch.meshgrid(torch.arange(self.height), torch.arange(self.width), indexing="ij")
        return rows.reshape(-1), cols.reshape(-1)

    def pixel_rays(
        self,
        rows: Optional[torch.Tensor] = None,
        cols: Optional[torch.Tensor] = None,
        dtype: torch.dtype = torch.float32,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Unit-direction rays through pixel centres; all pixels row-major when no index is given."""
        if rows is None or cols is None:
            rows, cols = self.pixel_grid()
        u = cols.to(torch.float64) + 0.5
        v = rows.to(torch.float64) + 0.5
        local = torch.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, torch.ones_like(u)], dim=-1)
        dirs = local @ torch.tensor(self.c2w[:3, :3]).T
        dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True)
        origins = torch.tensor(self.c2w[:3, 3]).expand_as(dirs)
        return origins.to(dtype), dirs.to(dtype)

    def crop(self, row0: int, col0: int, height: int, width: int) -> "Camera":
        return Camera(self.fx, self.fy, self.cx - col0, self.cy - row0, int(width), int(height), self.c2w)

    def light_position(self, offset: torch.Tensor) -> torch.Tensor:
        """World position of a light mounted at ``offset`` in this camera's rig frame."""
        rot = self.rotation(offset.dtype)
        return self.origin(offset.dtype) + offset @ rot.T

    # serialisation

    def to_json(self) -> Dict[str, Any]:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "c2w": [[float(v) for v in row] for row in self.c2w],
        }

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "Camera":
        try:
            return cls(
                float(payload["fx"]),
                float(payload["fy"]),
                float(payload["cx"]),
                float(payload["cy"]),
                int(payload["width"]),
                int(payload["height"]),
                np.asarray(payload["c2w"], dtype=np.float64),
            )
        except KeyError as exc:
            raise DatasetError(f"camera record missing field {exc}") from exc
