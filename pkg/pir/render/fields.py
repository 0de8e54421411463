"""Parametric spatial fields: positional encoding + small MLP, or a trilinear grid.

Every learnable spatial quantity (SDF + geometry feature, albedos, roughness,
the distilled feature field, the radiance head) is a ``Field``. Gradients come
from torch autograd; ``field_grad_input`` and ``field_backward`` expose the
spatial Jacobian and the parameter accumulation explicitly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import torch
from torch import nn

from pir.core.errors import CheckpointSpecMismatchError, ShapeMismatchError
from pir.core.tensor_io import tensor_read, tensor_write

BACKENDS = ("mlp", "grid")
ACTIVATIONS = ("none", "sigmoid", "softplus")


@dataclass(frozen=True)
class FieldSpec:
    backend: str = "mlp"
    out_dim: int = 1
    freqs: int = 6
    layers: int = 3
    width: int = 64
    resolution: int = 32
    extra_dim: int = 0
    activation: str = "none"
    bound: float = 1.0
    geometric_init: bool = False
    init_radius: float = 0.5

    def __post_init__(self) -> None:
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown field backend '{self.backend}'")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown field activation '{self.activation}'")
        if self.out_dim < 1 or self.freqs < 0 or self.extra_dim < 0:
            raise ValueError(f"invalid field dims: out={self.out_dim} freqs={self.freqs} extra={self.extra_dim}")
        if self.backend == "grid" and self.resolution < 2:
            raise ValueError("grid resolution must be >= 2 per axis")
        if self.backend == "mlp" and (self.width < 1 or self.layers < 0):
            raise ValueError("mlp width must be >= 1")
        if self.bound <= 0:
            raise ValueError("field bound must be positive")

    @property
    def encoded_dim(self) -> int:
        return encoding_dim(self.freqs)

    @classmethod
    def from_config(cls, section: Mapping[str, Any], **overrides: Any) -> "FieldSpec":
        known = {key: section[key] for key in ("backend", "freqs", "layers", "width", "resolution") if key in section}
        known.update(overrides)
        return cls(**known)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> "FieldSpec":
        return cls(**dict(payload))


def encoding_dim(freqs: int) -> int:
    return 3 * (1 + 2 * int(freqs))


def positional_encode(x: torch.Tensor, freqs: int) -> torch.Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < freqs, identity first."""
    if freqs < 0:
        raise ValueError("freqs must be >= 0")
    parts = [x]
    for k in range(int(freqs)):
        scaled = (2.0 ** k) * math.pi * x
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


class ParamBlock:
    """Named group of parameters that shares one Adam state."""

    def __init__(self, name: str, params: List[nn.Parameter]) -> None:
        self.name = name
        self.params = list(params)

    def numel(self) -> int:
        return sum(p.numel() for p in self.params)

    def values(self) -> torch.Tensor:
        if not self.params:
            return torch.zeros(0)
        return torch.cat([p.detach().reshape(-1) for p in self.params])

    def grads(self) -> torch.Tensor:
        if not self.params:
            return torch.zeros(0)
        return torch.cat(
            [(p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1) for p in self.params]
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def set_values(self, flat: torch.Tensor) -> None:
        if flat.numel() != self.numel():
            raise ShapeMismatchError(f"block '{self.name}' holds {self.numel()} values, got {flat.numel()}")
        offset = 0
        with torch.no_grad():
            for p in self.params:
                p.copy_(flat[offset:offset + p.numel()].reshape(p.shape))
                offset += p.numel()

    def set_trainable(self, enabled: bool) -> None:
        for p in self.params:
            p.requires_grad_(enabled)

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.params)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for p in self.params:
            digest.update(p.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()[:16]


class Field(nn.Module):
    """Spatial function ``R^3 (+ extra) -> R^out_dim`` with an output activation."""

    def __init__(self, spec: FieldSpec, name: str = "field") -> None:
        super().__init__()
        self.spec = spec
        self.name = name
        if spec.backend == "grid":
            res = spec.resolution
            self.grid = nn.Parameter(torch.zeros(spec.out_dim, res, res, res))
            self.extra_proj = nn.Linear(spec.extra_dim, spec.out_dim, bias=False) if spec.extra_dim else None
            if self.extra_proj is not None:
                nn.init.zeros_(self.extra_proj.weight)
            if spec.geometric_init:
                self.write_nodes(lambda p: _sphere_channels(p, spec.init_radius, spec.out_dim))
        else:
            dims = [spec.encoded_dim + spec.extra_dim] + [spec.width] * spec.layers + [spec.out_dim]
            self.linears = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
            self.softplus = nn.Softplus(beta=100)
            if spec.geometric_init:
                self._geometric_init(dims)

    # construction

    def _geometric_init(self, dims: List[int]) -> None:
        last = len(self.linears) - 1
        with torch.no_grad():
            for index, lin in enumerate(self.linears):
                if index == last:
                    nn.init.normal_(lin.weight, mean=np.sqrt(np.pi) / np.sqrt(dims[index]), std=1e-4)
                    nn.init.constant_(lin.bias, -self.spec.init_radius)
                    if lin.weight.shape[0] > 1:
                        nn.init.normal_(lin.weight[1:], 0.0, 1e-4)
                        lin.bias[1:] = 0.0
                elif index == 0:
                    nn.init.constant_(lin.bias, 0.0)
                    nn.init.normal_(lin.weight, 0.0, np.sqrt(2) / np.sqrt(dims[index + 1]))
                    lin.weight[:, 3:] = 0.0
                else:
                    nn.init.constant_(lin.bias, 0.0)
                    nn.init.normal_(lin.weight, 0.0, np.sqrt(2) / np.sqrt(dims[index + 1]))

    def grid_nodes(self) -> torch.Tensor:
        res, bound = self.spec.resolution, self.spec.bound
        axis = torch.linspace(-bound, bound, res, dtype=torch.float64)
        gx, gy, gz = torch.meshgrid(axis, axis, axis, indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1)

    def write_nodes(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> None:
        """Analytic write: grid node values become ``fn(node_position)``."""
        if self.spec.backend != "grid":
            raise ValueError("write_nodes needs a grid backend")
        values = fn(self.grid_nodes().reshape(-1, 3))
        values = values.reshape(-1, self.spec.out_dim).T.reshape(self.grid.shape)
        with torch.no_grad():
            self.grid.copy_(values.to(self.grid.dtype))

    # evaluation

    @property
    def params(self) -> ParamBlock:
        return ParamBlock(self.name, list(self.parameters()))

    def raw(self, x: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.spec.extra_dim:
            if extra is None or extra.shape[-1] != self.spec.extra_dim:
                got = None if extra is None else extra.shape[-1]
                raise ShapeMismatchError(f"field '{self.name}' expects extra dim {self.spec.extra_dim}, got {got}")
            extra = extra.to(x.dtype)
        elif extra is not None and extra.shape[-1] != 0:
            raise ShapeMismatchError(f"field '{self.name}' takes no extra input, got dim {extra.shape[-1]}")
        x = x.clamp(-self.spec.bound, self.spec.bound)
        if self.spec.backend == "grid":
            out = _trilinear(self.grid, x, self.spec.bound)
            if self.extra_proj is not None:
                out = out + self.extra_proj(extra)
            return out
        h = positional_encode(x, self.spec.freqs)
        if self.spec.extra_dim:
            h = torch.cat([h, extra], dim=-1)
        for index, lin in enumerate(self.linears):
            h = lin(h)
            if index < len(self.linears) - 1:
                h = self.softplus(h)
        return h

    def forward(self, x: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
        out = self.raw(x, extra)
        if self.spec.activation == "sigmoid":
            return torch.sigmoid(out)
        if self.spec.activation == "softplus":
            return nn.functional.softplus(out)
        return out


def _sphere_channels(points: torch.Tensor, radius: float, out_dim: int) -> torch.Tensor:
    values = torch.zeros(points.shape[0], out_dim, dtype=points.dtype)
    values[:, 0] = torch.linalg.vector_norm(points, dim=-1) - radius
    return values


def _trilinear(grid: torch.Tensor, x: torch.Tensor, bound: float) -> torch.Tensor:
    """Trilinear lookup with clamp-to-box; a point on an interior face uses the upper cell."""
    channels, res = grid.shape[0], grid.shape[1]
    lead = x.shape[:-1]
    pts = x.reshape(-1, 3).to(grid.dtype)
    u = ((pts + bound) / (2.0 * bound) * (res - 1)).clamp(0.0, res - 1)
    base = torch.floor(u.detach()).clamp(0, res - 2).long()
    frac = u - base.to(u.dtype)
    flat = grid.reshape(channels, -1)
    out = torch.zeros(pts.shape[0], channels, dtype=grid.dtype, device=grid.device)
    for corner in range(8):
        offset = torch.tensor([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], device=base.device)
        idx = base + offset
        weight = torch.where(offset.bool(), frac, 1.0 - frac).prod(dim=-1)
        linear = (idx[:, 0] * res + idx[:, 1]) * res + idx[:, 2]
        out = out + weight[:, None] * flat[:, linear].T
    return out.reshape(*lead, channels)


def field_eval(field: Field, x: torch.Tensor, extra: Optional[torch.Tensor] = None) -> torch.Tensor:
    return field(x, extra)


def field_grad_input(
    field: Field,
    x: torch.Tensor,
    extra: Optional[torch.Tensor] = None,
    create_graph: bool = False,
) -> torch.Tensor:
    """Spatial Jacobian ``[..., 3, out_dim]`` of the activated output."""
    with torch.enable_grad():
        xq = x if (x.requires_grad and create_graph) else x.detach().requires_grad_(True)
        out = field(xq, extra)
        columns = []
        for channel in range(out.shape[-1]):
            (grad,) = torch.autograd.grad(
                out[..., channel].sum(), xq, create_graph=create_graph, retain_graph=True, allow_unused=True
            )
            columns.append(torch.zeros_like(xq) if grad is None else grad)
    return torch.stack(columns, dim=-1)


def field_backward(
    field: Field,
    x: torch.Tensor,
    extra: Optional[torch.Tensor],
    upstream: torch.Tensor,
) -> None:
    """Accumulate ``d(upstream . output)/d(params)`` into the parameters' ``.grad``."""
    out = field(x, extra)
    if upstream.shape != out.shape:
        raise ShapeMismatchError(
            f"upstream shape {tuple(upstream.shape)} does not match field output {tuple(out.shape)}"
        )
    params = [p for p in field.parameters() if p.requires_grad]
    grads = torch.autograd.grad(out, params, grad_outputs=upstream.to(out.dtype), allow_unused=True)
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        param.grad = grad.detach().clone() if param.grad is None else param.grad + grad.detach()


# checkpoint sidecar

def field_save(field: Field, directory: Union[str, Path]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for key, tensor in field.state_dict().items():
        value = tensor.detach().cpu().to(torch.float32).numpy()
        if value.size == 0:
            continue
        tensor_write(directory / f"{key}.tnsr", value.shape or (1,), value)
        names.append(key)
    sidecar = {"name": field.name, "spec": field.spec.to_json(), "tensors": names}
    (directory / "spec.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")


def field_load(field: Field, directory: Union[str, Path]) -> None:
    """Load values saved by ``field_save`` into ``field``; the specs must agree."""
    directory = Path(directory)
    sidecar = json.loads((directory / "spec.json").read_text(encoding="utf-8"))
    saved_spec = FieldSpec.from_json(sidecar["spec"])
    if saved_spec != field.spec:
        raise CheckpointSpecMismatchError(
            f"field '{field.name}' spec differs from checkpoint: {saved_spec} != {field.spec}"
        )
    state = field.state_dict()
    with torch.no_grad():
        for key in sidecar["tensors"]:
            _, data = tensor_read(directory / f"{key}.tnsr")
            state[key].copy_(torch.from_numpy(data.reshape(state[key].shape)))
