"""SDF scenes, sphere tracing and the differentiable surface point.

An ``SdfScene`` wraps either a learned ``Field`` (channel 0 is the signed
distance, the rest the geometry feature) or a closed-form CSG shape used by
the synthetic presets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
from torch import nn

from pir.core.errors import DegenerateNormalError
from pir.core.vec import dot, norm
from pir.render.fields import Field

MIN_GRAD_NORM = 1e-8


# closed-form shapes

class Shape(nn.Module):
    """Closed-form SDF; ``forward(x)`` returns ``s`` with shape ``x.shape[:-1]``."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pragma: no cover - interface
        raise NotImplementedError


def _param(value, learnable: bool) -> torch.Tensor:
    tensor = torch.as_tensor(value, dtype=torch.float32).clone()
    return nn.Parameter(tensor) if learnable else tensor


class Sphere(Shape):
    def __init__(self, center: Sequence[float] = (0.0, 0.0, 0.0), radius: float = 1.0, learnable: bool = False) -> None:
        super().__init__()
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        radius_t = _param(radius, learnable)
        if learnable:
            self.radius = radius_t
        else:
            self.register_buffer("radius", radius_t)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return norm(x - self.center.to(x.dtype), keepdim=False) - self.radius.to(x.dtype)


class Plane(Shape):
    """Half-space ``n . x <= offset`` is inside."""

    def __init__(self, normal: Sequence[float] = (0.0, 0.0, 1.0), offset: float = 0.0, learnable: bool = False) -> None:
        super().__init__()
        n = torch.tensor(normal, dtype=torch.float32)
        self.register_buffer("normal", n / torch.linalg.vector_norm(n))
        offset_t = _param(offset, learnable)
        if learnable:
            self.offset = offset_t
        else:
            self.register_buffer("offset", offset_t)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dot(x, self.normal.to(x.dtype), keepdim=False) - self.offset.to(x.dtype)


class Box(Shape):
    def __init__(self, center: Sequence[float] = (0.0, 0.0, 0.0), half_extents: Sequence[float] = (0.5, 0.5, 0.5)) -> None:
        super().__init__()
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        self.register_buffer("half_extents", torch.tensor(half_extents, dtype=torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q = (x - self.center.to(x.dtype)).abs() - self.half_extents.to(x.dtype)
        outside = norm(q.clamp_min(0.0), keepdim=False)
        inside = q.max(dim=-1).values.clamp_max(0.0)
        return outside + inside


class Bowl(Shape):
    """Lower hemispherical shell of ``radius`` and half-thickness ``thickness``, open towards +z."""

    def __init__(self, center: Sequence[float] = (0.0, 0.0, 0.0), radius: float = 0.6, thickness: float = 0.04) -> None:
        super().__init__()
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        self.radius = float(radius)
        self.thickness = float(thickness)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = x - self.center.to(x.dtype)
        qx = torch.linalg.vector_norm(p[..., :2], dim=-1)
        qz = p[..., 2]
        rim = torch.sqrt((qx - self.radius) ** 2 + qz ** 2)
        shell = (torch.sqrt(qx ** 2 + qz ** 2) - self.radius).abs()
        return torch.where(qz > 0, rim, shell) - self.thickness


class Union(Shape):
    def __init__(self, *shapes: Shape) -> None:
        super().__init__()
        self.shapes = nn.ModuleList(shapes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.stack([shape(x) for shape in self.shapes], dim=-1).min(dim=-1).values


class Intersection(Shape):
    def __init__(self, *shapes: Shape) -> None:
        super().__init__()
        self.shapes = nn.ModuleList(shapes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.stack([shape(x) for shape in self.shapes], dim=-1).max(dim=-1).values


class Difference(Shape):
    def __init__(self, base: Shape, cut: Shape) -> None:
        super().__init__()
        self.base = base
        self.cut = cut

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.maximum(self.base(x), -self.cut(x))


# scene

class SdfScene(nn.Module):
    def __init__(
        self,
        field: Optional[Field] = None,
        analytic: Optional[Shape] = None,
        feature_dim: Optional[int] = None,
        bound: float = 1.0,
    ) -> None:
        super().__init__()
        if field is None and analytic is None:
            raise ValueError("SdfScene needs a field or an analytic shape")
        self.field = field
        self.analytic = analytic
        if feature_dim is None:
            feature_dim = field.spec.out_dim - 1 if field is not None else 0
        self.feature_dim = int(feature_dim)
        self.bound = float(bound)

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        if self.analytic is not None:
            return self.analytic(x)
        return self.field(x)[..., 0]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.analytic is not None:
            s = self.analytic(x)
            return s, torch.zeros(*x.shape[:-1], self.feature_dim, dtype=x.dtype)
        out = self.field(x)
        return out[..., 0], out[..., 1:]


def sdf_eval(scene: SdfScene, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """``(s, f_geo)``: ``s`` negative inside, positive outside."""
    return scene(x)


def sdf_gradient(scene: SdfScene, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    with torch.enable_grad():
        xq = x if (create_graph and x.requires_grad) else x.detach().requires_grad_(True)
        s = scene.sdf(xq)
        (grad,) = torch.autograd.grad(s.sum(), xq, create_graph=create_graph)
    return grad


def normal_at(scene: SdfScene, x: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Unit ``normalize(grad s(x))``; raises ``DegenerateNormalError`` at the first vanishing gradient."""
    grad = sdf_gradient(scene, x, create_graph=create_graph)
    grad_norm = norm(grad)
    bad = (grad_norm[..., 0] <= MIN_GRAD_NORM)
    if bool(bad.any()):
        index = tuple(int(i) for i in bad.nonzero()[0])
        raise DegenerateNormalError(x.detach()[index].tolist(), float(grad_norm[index][0]))
    return grad / grad_norm


@dataclass
class SurfaceHit:
    """Batched trace result; entries where ``converged`` is false are misses."""

    x: torch.Tensor
    n: torch.Tensor
    t: torch.Tensor
    converged: torch.Tensor
    steps: torch.Tensor

    def __len__(self) -> int:
        return int(self.t.numel())

    def select(self, mask: torch.Tensor) -> "SurfaceHit":
        return SurfaceHit(self.x[mask], self.n[mask], self.t[mask], self.converged[mask], self.steps[mask])


def ray_box(origins: torch.Tensor, dirs: torch.Tensor, bound: float) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test against ``[-bound, bound]^3``; returns ``(t_near, t_far, valid)`` with ``t_near >= 0``."""
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    inv = 1.0 / safe
    t0 = (-bound - origins) * inv
    t1 = (bound - origins) * inv
    t_near = torch.minimum(t0, t1).max(dim=-1).values.clamp_min(0.0)
    t_far = torch.maximum(t0, t1).min(dim=-1).values
    return t_near, t_far, t_far > t_near


@torch.no_grad()
def sphere_trace(
    scene: SdfScene,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    t_min: torch.Tensor,
    t_max: torch.Tensor,
    max_steps: int = 128,
    tolerance: float = 1e-5,
    relaxation: float = 0.9,
    dense_samples: int = 128,
    bisection_steps: int = 60,
) -> SurfaceHit:
    """Under-relaxed sphere tracing with a dense-sampling + bisection fallback.

    A hit is only reported as converged when ``|s(x)| <= tolerance``.
    """
    lead = origins.shape[:-1]
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    t_lo = torch.as_tensor(t_min, dtype=o.dtype).expand(lead).reshape(-1).clone()
    t_hi = torch.as_tensor(t_max, dtype=o.dtype).expand(lead).reshape(-1).clone()

    t = t_lo.clone()
    t_prev = t_lo.clone()
    active = t_lo < t_hi
    converged = torch.zeros_like(active)
    bracketed = torch.zeros_like(active)
    steps = torch.zeros(o.shape[0], dtype=torch.int64)
    for _ in range(max_steps):
        if not bool(active.any()):
            break
        s = scene.sdf(o + t[:, None] * d)
        hit_now = active & (s.abs() <= tolerance)
        overshoot = active & (s < -tolerance)
        converged |= hit_now
        bracketed |= overshoot
        active &= ~(hit_now | overshoot)
        t_prev = torch.where(active, t, t_prev)
        t = torch.where(active, t + relaxation * s, t)
        steps += active.long()
        active &= t <= t_hi

    # rays that stepped over a sign change or ran out of budget
    pending = ~converged & ~bracketed & (t_lo < t_hi)
    if bool(pending.any()) and dense_samples > 1:
        idx = pending.nonzero()[:, 0]
        ts = torch.linspace(0.0, 1.0, dense_samples, dtype=o.dtype)
        grid = t_lo[idx, None] + ts[None, :] * (t_hi[idx] - t_lo[idx])[:, None]
        vals = scene.sdf(o[idx, None, :] + grid[..., None] * d[idx, None, :])
        outside = vals > 0
        crossing = outside[:, :-1] & ~outside[:, 1:]
        has = crossing.any(dim=-1)
        first = torch.argmax(crossing.long(), dim=-1)
        rows = idx[has]
        t_prev[rows] = grid[has, first[has]]
        t[rows] = grid[has, first[has] + 1]
        bracketed[rows] = True

    if bool(bracketed.any()):
        rows = bracketed.nonzero()[:, 0]
        lo, hi = t_prev[rows].clone(), t[rows].clone()
        for _ in range(bisection_steps):
            mid = 0.5 * (lo + hi)
            s_mid = scene.sdf(o[rows] + mid[:, None] * d[rows])
            out = s_mid > 0
            lo = torch.where(out, mid, lo)
            hi = torch.where(out, hi, mid)
        s_lo = scene.sdf(o[rows] + lo[:, None] * d[rows])
        s_hi = scene.sdf(o[rows] + hi[:, None] * d[rows])
        pick_hi = s_hi.abs() < s_lo.abs()
        t[rows] = torch.where(pick_hi, hi, lo)
        converged[rows] = torch.minimum(s_lo.abs(), s_hi.abs()) <= tolerance

    x = o + t[:, None] * d
    n = torch.zeros_like(x)
    if bool(converged.any()):
        rows = converged.nonzero()[:, 0]
        grad = sdf_gradient(scene, x[rows])
        grad_norm = norm(grad)
        ok = grad_norm[:, 0] > MIN_GRAD_NORM
        n[rows[ok]] = grad[ok] / grad_norm[ok]
        converged[rows[~ok]] = False
    return SurfaceHit(
        x=x.reshape(*lead, 3),
        n=n.reshape(*lead, 3),
        t=t.reshape(lead),
        converged=converged.reshape(lead),
        steps=steps.reshape(lead),
    )


def trace_rays(
    scene: SdfScene,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    max_steps: int = 128,
    tolerance: float = 1e-5,
    t_start: float = 0.0,
) -> SurfaceHit:
    """Clip rays to the scene box, then sphere trace."""
    t_near, t_far, valid = ray_box(origins, dirs, scene.bound)
    t_near = t_near.clamp_min(t_start)
    t_far = torch.where(valid, t_far, t_near)
    return sphere_trace(scene, origins, dirs, t_near, t_far, max_steps=max_steps, tolerance=tolerance)


def reparam_surface_point(scene: SdfScene, hit: SurfaceHit) -> torch.Tensor:
    """``x - n * S(x)`` with ``x`` and ``n`` constants; geometry gradients enter only through ``S``."""
    x = hit.x.detach()
    n = hit.n.detach()
    return x - n * scene.sdf(x)[..., None]
