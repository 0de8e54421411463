"""Vec3 helpers on ``[..., 3]`` tensors.

Points, normals, directions and RGB triplets are all plain tensors whose last
axis has size 3; these helpers keep the broadcasting conventions in one place.
"""

from __future__ import annotations

from typing import Tuple

import torch

def dot(a: torch.Tensor, b: torch.Tensor, keepdim: bool = True) -> torch.Tensor:
    return (a * b).sum(dim=-1, keepdim=keepdim)


def norm(a: torch.Tensor, keepdim: bool = True) -> torch.Tensor:
    return torch.linalg.vector_norm(a, dim=-1, keepdim=keepdim)


def normalize(a: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return a / norm(a).clamp_min(eps)


def orthonormal_frame(axis: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Tangent/bitangent for a unit ``axis`` (branchless construction, Duff et al. 2017)."""
    x, y, z = axis.unbind(-1)
    sign = torch.where(z >= 0, torch.ones_like(z), -torch.ones_like(z))
    a = -1.0 / (sign + z)
    b = x * y * a
    tangent = torch.stack([1.0 + sign * x * x * a, sign * b, -sign * x], dim=-1)
    bitangent = torch.stack([b, sign + y * y * a, -y], dim=-1)
    return tangent, bitangent


def to_world(local: torch.Tensor, axis: torch.Tensor) -> torch.Tensor:
    """Rotate local-frame vectors (z along ``axis``) into world space."""
    tangent, bitangent = orthonormal_frame(axis)
    return local[..., 0:1] * tangent + local[..., 1:2] * bitangent + local[..., 2:3] * axis
