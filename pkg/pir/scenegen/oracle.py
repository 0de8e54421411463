"""Brute-force reference renderer for the synthetic presets.

Primary and shadow rays are intersected in closed form (spheres, planes and
their unions) or by dense marching with bisection (other shapes), always in
float64. Single-bounce indirect light is integrated with stratified uniform
hemisphere sampling, independent of the lobe sampler used by the
differentiable renderer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from pir.core.camera import Camera
from pir.core.image import ImageBuffer
from pir.core.rng import Rng
from pir.core.vec import dot, normalize, to_world
from pir.render.geometry import Plane, Shape, Sphere, Union
from pir.render.shading import BrdfSample, brdf_eval, specular_eval
from pir.scenegen.presets import ScenePreset

DTYPE = torch.float64
RAY_OFFSET = 1e-4
MARCH_STEP = 2e-3
MARCH_BLOCK = 256
BISECTION_STEPS = 50
RAY_CHUNK = 16384
INF = float("inf")


# intersection

def _hit_sphere(shape: Sphere, o: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    oc = o - shape.center.to(DTYPE)
    b = dot(oc, d, keepdim=False)
    c = dot(oc, oc, keepdim=False) - float(shape.radius) ** 2
    disc = b * b - c
    root = torch.sqrt(disc.clamp_min(0.0))
    near = -b - root
    t = torch.where(near > 0, near, torch.full_like(near, INF))
    return torch.where(disc >= 0, t, torch.full_like(t, INF))


def _hit_plane(shape: Plane, o: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    n = shape.normal.to(DTYPE)
    offset = float(shape.offset)
    height = dot(o, n, keepdim=False) - offset
    rate = dot(d, n, keepdim=False)
    t = -height / torch.where(rate == 0, torch.full_like(rate, -1e-300), rate)
    return torch.where((rate < 0) & (height > 0), t, torch.full_like(t, INF))


def _march(shape: Shape, o: torch.Tensor, d: torch.Tensor, t_max: float) -> torch.Tensor:
    """First ``+ -> -`` sign change of ``shape`` along each ray, refined by bisection."""
    count = o.shape[0]
    found = torch.full((count,), INF, dtype=DTYPE)
    steps = int(math.ceil(t_max / MARCH_STEP))
    prev_t = torch.zeros(count, dtype=DTYPE)
    prev_s = shape(o)
    pending = torch.ones(count, dtype=torch.bool)
    start = 1
    while start <= steps and bool(pending.any()):
        stop = min(steps, start + MARCH_BLOCK - 1)
        ts = torch.arange(start, stop + 1, dtype=DTYPE) * MARCH_STEP
        idx = pending.nonzero()[:, 0]
        points = o[idx, None, :] + ts[None, :, None] * d[idx, None, :]
        s = shape(points)
        s_before = torch.cat([prev_s[idx, None], s[:, :-1]], dim=1)
        crossing = (s_before > 0) & (s <= 0)
        has = crossing.any(dim=1)
        first = crossing.to(torch.int64).argmax(dim=1)
        lo = torch.where(first > 0, ts[(first - 1).clamp_min(0)], prev_t[idx])
        hi = ts[first]
        hit_rows = idx[has]
        lo, hi = lo[has], hi[has]
        for _ in range(BISECTION_STEPS):
            mid = 0.5 * (lo + hi)
            inside = shape(o[hit_rows] + mid[:, None] * d[hit_rows]) <= 0
            hi = torch.where(inside, mid, hi)
            lo = torch.where(inside, lo, mid)
        found[hit_rows] = hi
        pending[hit_rows] = False
        prev_t[idx] = ts[-1]
        prev_s[idx] = s[:, -1]
        start = stop + 1
    return found


def first_hit(shape: Shape, o: torch.Tensor, d: torch.Tensor, t_max: float = 8.0) -> torch.Tensor:
    """Distance to the first surface crossing along unit rays (``inf`` for none)."""
    if isinstance(shape, Sphere):
        return _hit_sphere(shape, o, d)
    if isinstance(shape, Plane):
        return _hit_plane(shape, o, d)
    if isinstance(shape, Union):
        return torch.stack([first_hit(child, o, d, t_max) for child in shape.shapes], dim=0).min(dim=0).values
    return _march(shape, o, d, t_max)


def shape_normal(shape: Shape, x: torch.Tensor) -> torch.Tensor:
    with torch.enable_grad():
        pts = x.detach().requires_grad_(True)
        (grad,) = torch.autograd.grad(shape(pts).sum(), pts)
    return normalize(grad)


def _inside_box(x: torch.Tensor, bound: float) -> torch.Tensor:
    return (x.abs() <= bound + 1e-6).all(dim=-1)


def trace_preset(preset: ScenePreset, o: torch.Tensor, d: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(hit, t, x)``; hits outside the scene box count as misses."""
    t = first_hit(preset.shape, o, d, t_max=2.0 * math.sqrt(3.0) * preset.bound + float(o.abs().max()) * 2.0)
    finite = torch.isfinite(t)
    x = o + torch.where(finite, t, torch.zeros_like(t))[:, None] * d
    hit = finite & _inside_box(x, preset.bound)
    return hit, t, x


def occluded(preset: ScenePreset, x: torch.Tensor, n: torch.Tensor, light: torch.Tensor) -> torch.Tensor:
    """Exact shadow test: does the segment from ``x`` (offset along ``n``) to the light cross the shape?"""
    origin = x + RAY_OFFSET * n
    path = light - origin
    length = torch.linalg.vector_norm(path, dim=-1)
    direction = path / length[:, None]
    t = first_hit(preset.shape, origin, direction, t_max=float(length.max()) + MARCH_STEP)
    return t < length - RAY_OFFSET


# shading

def _direct(
    preset: ScenePreset,
    x: torch.Tensor,
    n: torch.Tensor,
    w_o: torch.Tensor,
    light: torch.Tensor,
    material: BrdfSample,
    specular_only: bool = False,
) -> Tuple[torch.Tensor, torch.Tensor]:
    to_light = light - x
    dist2 = dot(to_light, to_light)
    w_i = to_light / torch.sqrt(dist2)
    evaluator = specular_eval if specular_only else brdf_eval
    f_r = evaluator(material, n, w_i, w_o)
    cos = dot(n, w_i).clamp_min(0.0)
    visible = (~occluded(preset, x, n, light)).to(DTYPE)
    radiance = preset.light_intensity / dist2 * f_r * cos * visible[:, None]
    return radiance, visible


def hemisphere_directions(rng: Rng, count: int, spp: int) -> torch.Tensor:
    """Local-frame uniform hemisphere directions, ``floor(sqrt(spp))^2`` of them stratified."""
    side = int(math.isqrt(spp))
    strata = side * side
    u = rng.uniform((count, spp, 2), dtype=DTYPE)
    if strata:
        cells = torch.arange(strata)
        offset = torch.stack([(cells // side).to(DTYPE), (cells % side).to(DTYPE)], dim=-1)
        u[:, :strata] = (offset[None] + u[:, :strata]) / side
    z = u[..., 0]
    r = torch.sqrt((1.0 - z * z).clamp_min(0.0))
    phi = 2.0 * math.pi * u[..., 1]
    return torch.stack([r * torch.cos(phi), r * torch.sin(phi), z], dim=-1)


def _indirect(
    preset: ScenePreset,
    x: torch.Tensor,
    n: torch.Tensor,
    w_o: torch.Tensor,
    light: torch.Tensor,
    material: BrdfSample,
    spp: int,
    rng: Rng,
    specular_only: bool = False,
) -> torch.Tensor:
    count = x.shape[0]
    local = hemisphere_directions(rng, count, spp)
    w = to_world(local, n[:, None, :].expand(count, spp, 3)).reshape(-1, 3)
    x_rep = x[:, None, :].expand(count, spp, 3).reshape(-1, 3)
    n_rep = n[:, None, :].expand(count, spp, 3).reshape(-1, 3)
    total = torch.zeros(count * spp, 3, dtype=DTYPE)
    for start in range(0, count * spp, RAY_CHUNK):
        sl = slice(start, start + RAY_CHUNK)
        hit, _, x2 = trace_preset(preset, x_rep[sl] + RAY_OFFSET * n_rep[sl], w[sl])
        if not bool(hit.any()):
            continue
        rows = hit.nonzero()[:, 0]
        p2 = x2[rows]
        n2 = shape_normal(preset.shape, p2)
        l_ind, _ = _direct(preset, p2, n2, -w[sl][rows], light, preset.material_at(p2))
        prim = BrdfSample(
            material.diffuse[:, None, :].expand(count, spp, 3).reshape(-1, 3)[sl][rows],
            material.specular[:, None, :].expand(count, spp, 3).reshape(-1, 3)[sl][rows],
            material.roughness[:, None, :].expand(count, spp, 1).reshape(-1, 1)[sl][rows],
        )
        w_o_rep = w_o[:, None, :].expand(count, spp, 3).reshape(-1, 3)[sl][rows]
        n_p = n_rep[sl][rows]
        evaluator = specular_eval if specular_only else brdf_eval
        f_r = evaluator(prim, n_p, w[sl][rows], w_o_rep)
        cos = dot(n_p, w[sl][rows]).clamp_min(0.0)
        chunk = torch.zeros(min(RAY_CHUNK, count * spp - start), 3, dtype=DTYPE)
        chunk[rows] = l_ind * f_r * cos * (2.0 * math.pi)
        total[sl] = chunk
    return total.reshape(count, spp, 3).mean(dim=1)


@dataclass
class ReferenceLayers:
    rgb: torch.Tensor
    direct: torch.Tensor
    indirect: torch.Tensor
    diffuse: torch.Tensor
    specular: torch.Tensor
    roughness: torch.Tensor
    visibility: torch.Tensor
    mask: torch.Tensor
    material_id: torch.Tensor
    points: torch.Tensor
    normals: torch.Tensor

    def as_images(self) -> Dict[str, ImageBuffer]:
        return {
            "rgb": ImageBuffer.from_tensor(self.rgb),
            "diffuse": ImageBuffer.from_tensor(self.diffuse),
            "specular": ImageBuffer.from_tensor(self.specular),
            "rough": ImageBuffer.from_tensor(self.roughness),
            "mask": ImageBuffer.from_tensor(self.mask.to(DTYPE)),
        }


@torch.no_grad()
def reference_layers(
    preset: ScenePreset,
    camera: Camera,
    spp: int = 64,
    rng: Optional[Rng] = None,
    include_indirect: bool = True,
    specular_only: bool = False,
    light_offset: Optional[Tuple[float, float, float]] = None,
) -> ReferenceLayers:
    """All per-pixel reference quantities for one view, ``H x W x C`` float64."""
    if spp < 1:
        raise ValueError("reference rendering needs spp >= 1")
    rng = rng if rng is not None else Rng(0)
    height, width = camera.height, camera.width
    origins, dirs = camera.pixel_rays(dtype=DTYPE)
    origins = origins.contiguous()
    offset = preset.light_offset if light_offset is None else light_offset
    light = camera.light_position(torch.tensor(offset, dtype=DTYPE))

    hit, _, x = trace_preset(preset, origins, dirs)
    pixels = height * width
    direct = torch.zeros(pixels, 3, dtype=DTYPE)
    indirect = torch.zeros(pixels, 3, dtype=DTYPE)
    diffuse = torch.zeros(pixels, 3, dtype=DTYPE)
    specular = torch.zeros(pixels, 3, dtype=DTYPE)
    roughness = torch.zeros(pixels, 1, dtype=DTYPE)
    visibility = torch.zeros(pixels, dtype=DTYPE)
    ids = torch.full((pixels,), -1, dtype=torch.long)
    normals = torch.zeros(pixels, 3, dtype=DTYPE)

    if bool(hit.any()):
        rows = hit.nonzero()[:, 0]
        p = x[rows]
        n = shape_normal(preset.shape, p)
        w_o = normalize(origins[rows] - p)
        material = preset.material_at(p)
        radiance, visible = _direct(preset, p, n, w_o, light, material, specular_only)
        direct[rows] = radiance
        visibility[rows] = visible
        if include_indirect:
            indirect[rows] = _indirect(preset, p, n, w_o, light, material, spp, rng, specular_only)
        diffuse[rows] = material.diffuse
        specular[rows] = material.specular
        roughness[rows] = material.roughness
        ids[rows] = preset.material_id(p)
        normals[rows] = n

    def image(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(height, width, *t.shape[1:])

    return ReferenceLayers(
        rgb=image(direct + indirect),
        direct=image(direct),
        indirect=image(indirect),
        diffuse=image(diffuse),
        specular=image(specular),
        roughness=image(roughness),
        visibility=image(visibility),
        mask=image(hit),
        material_id=image(ids),
        points=image(torch.where(hit[:, None], x, torch.zeros_like(x))),
        normals=image(normals),
    )


def reference_render(
    preset: ScenePreset,
    camera: Camera,
    spp: int = 64,
    rng: Optional[Rng] = None,
    include_indirect: bool = True,
) -> ImageBuffer:
    """Direct light with exact shadows plus stratified single-bounce indirect light."""
    return ImageBuffer.from_tensor(reference_layers(preset, camera, spp, rng, include_indirect).rgb)


def material_features(ids: torch.Tensor, dim: int = 8) -> np.ndarray:
    """One-hot material ids padded to ``dim`` channels; background (id < 0) is all zero."""
    if dim < 1:
        raise ValueError("feature dim must be >= 1")
    flat = ids.reshape(-1)
    out = np.zeros((flat.numel(), dim), dtype=np.float32)
    valid = (flat >= 0) & (flat < dim)
    rows = valid.nonzero()[:, 0].numpy()
    out[rows, flat[valid].numpy()] = 1.0
    return out.reshape(*ids.shape, dim)
