"""Point light, roughplastic BRDF, soft visibility and direct surface shading."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import torch
from torch import nn

from pir.core.camera import Camera
from pir.core.errors import LightSingularityError
from pir.core.vec import dot, norm, normalize
from pir.render.fields import Field, FieldSpec
from pir.render.geometry import SdfScene, SurfaceHit, normal_at, reparam_surface_point
from pir.render.volume import NeusDensity, neus_alpha

MIN_ROUGHNESS = 0.01
MIN_COS = 1e-6


class PointLight(nn.Module):
    """White point light at ``camera origin + R @ offset``; intensity stored through softplus."""

    def __init__(self, offset: Sequence[float] = (0.0, 0.0, 0.0), intensity: float = 1.0) -> None:
        super().__init__()
        if intensity <= 0:
            raise ValueError("light intensity must be positive")
        self.offset = nn.Parameter(torch.tensor(offset, dtype=torch.float32))
        self.raw_intensity = nn.Parameter(torch.tensor(math.log(math.expm1(intensity)), dtype=torch.float32))

    @property
    def intensity(self) -> torch.Tensor:
        return nn.functional.softplus(self.raw_intensity)

    def position(self, camera: Camera) -> torch.Tensor:
        return camera.light_position(self.offset)


def light_sample_at(light_pos: torch.Tensor, intensity: torch.Tensor, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """``(w_i, L_i)``: unit direction towards the light and inverse-square radiance (3 channels)."""
    to_light = light_pos.to(x.dtype) - x
    dist2 = (to_light * to_light).sum(dim=-1, keepdim=True)
    if bool((dist2 <= 1e-24).any()):
        raise LightSingularityError("shading point coincides with the light position")
    w_i = to_light / torch.sqrt(dist2)
    radiance = (intensity.to(x.dtype) / dist2).expand(*x.shape[:-1], 3)
    return w_i, radiance


def light_sample(light: PointLight, camera: Camera, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return light_sample_at(light.position(camera), light.intensity, x)


# BRDF

@dataclass
class BrdfSample:
    diffuse: torch.Tensor
    specular: torch.Tensor
    roughness: torch.Tensor

    def detach(self) -> "BrdfSample":
        return BrdfSample(self.diffuse.detach(), self.specular.detach(), self.roughness.detach())


def ggx_distribution(cos_h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    a2 = alpha * alpha
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def smith_g1(cos_theta: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    c = cos_theta.clamp(MIN_COS, 1.0)
    a2 = alpha * alpha
    return 2.0 * c / (c + torch.sqrt(a2 + (1.0 - a2) * c * c))


def fresnel_dielectric(cos_i: torch.Tensor, eta: float = 1.5) -> torch.Tensor:
    c = cos_i.clamp(0.0, 1.0)
    sin_t2 = (1.0 - c * c) / (eta * eta)
    cos_t = torch.sqrt((1.0 - sin_t2).clamp_min(0.0))
    rs = (c - eta * cos_t) / (c + eta * cos_t)
    rp = (eta * c - cos_t) / (eta * c + cos_t)
    return 0.5 * (rs * rs + rp * rp)


def specular_eval(
    sample: BrdfSample, n: torch.Tensor, w_i: torch.Tensor, w_o: torch.Tensor, eta: float = 1.5
) -> torch.Tensor:
    cos_i = dot(n, w_i)
    cos_o = dot(n, w_o)
    valid = (cos_i > 0) & (cos_o > 0)
    h = normalize(w_i + w_o)
    alpha = sample.roughness
    d = ggx_distribution(dot(n, h).clamp(-1.0, 1.0), alpha)
    g = smith_g1(cos_i, alpha) * smith_g1(cos_o, alpha)
    f = fresnel_dielectric(dot(w_i, h), eta)
    spec = sample.specular * d * g * f / (4.0 * cos_i.clamp_min(MIN_COS) * cos_o.clamp_min(MIN_COS))
    return torch.where(valid, spec, torch.zeros_like(spec))


def brdf_eval(
    sample: BrdfSample, n: torch.Tensor, w_i: torch.Tensor, w_o: torch.Tensor, eta: float = 1.5
) -> torch.Tensor:
    """Roughplastic ``rho_d / pi + rho_s * D G F / (4 cos_i cos_o)``, zero below either horizon."""
    cos_i = dot(n, w_i)
    cos_o = dot(n, w_o)
    valid = (cos_i > 0) & (cos_o > 0)
    diffuse = sample.diffuse / math.pi
    diffuse = torch.where(valid, diffuse, torch.zeros_like(diffuse))
    return diffuse + specular_eval(sample, n, w_i, w_o, eta)


# materials

def roughness_from_unit(value: torch.Tensor) -> torch.Tensor:
    return MIN_ROUGHNESS + (1.0 - MIN_ROUGHNESS) * value


class MaterialFields(nn.Module):
    """Diffuse/specular albedo and roughness fields; the latter two optionally take injected features."""

    def __init__(
        self,
        diffuse: FieldSpec,
        specular: FieldSpec,
        roughness: FieldSpec,
        feature_dim: int = 0,
    ) -> None:
        super().__init__()
        self.feature_dim = int(feature_dim)
        self.diffuse = Field(_with(diffuse, out_dim=3, activation="sigmoid"), name="diffuse")
        self.specular = Field(_with(specular, out_dim=3, activation="sigmoid", extra_dim=self.feature_dim), name="specular")
        self.roughness = Field(_with(roughness, out_dim=1, activation="sigmoid", extra_dim=self.feature_dim), name="roughness")
        self.feature_field: Optional[Field] = None

    def attach_features(self, feature_field: Optional[Field]) -> None:
        # stored outside the module tree so the frozen field never joins a material block
        object.__setattr__(self, "feature_field", feature_field)

    def features(self, x: torch.Tensor) -> Optional[torch.Tensor]:
        if self.feature_dim == 0:
            return None
        if self.feature_field is None:
            return torch.zeros(*x.shape[:-1], self.feature_dim, dtype=x.dtype)
        with torch.no_grad():
            return self.feature_field(x.detach()).to(x.dtype)

    def forward(self, x: torch.Tensor) -> BrdfSample:
        extra = self.features(x)
        return BrdfSample(
            diffuse=self.diffuse(x),
            specular=self.specular(x, extra),
            roughness=roughness_from_unit(self.roughness(x, extra)),
        )


def _with(spec: FieldSpec, **changes) -> FieldSpec:
    payload = spec.to_json()
    payload.update(changes)
    return FieldSpec.from_json(payload)


Materials = Callable[[torch.Tensor], BrdfSample]


# visibility

def residual_transmittance(alphas: torch.Tensor) -> torch.Tensor:
    """``1 - sum_j alpha_j prod_{k<j} (1 - alpha_k)`` along the last axis."""
    ones = torch.ones_like(alphas[..., :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)
    return (1.0 - (alphas * trans).sum(dim=-1)).clamp(0.0, 1.0)


def visibility(
    scene: SdfScene,
    x: torch.Tensor,
    light_pos: torch.Tensor,
    density: NeusDensity,
    samples: int = 128,
) -> torch.Tensor:
    """Soft visibility along ``samples`` uniform sections from ``x`` (already offset) to the light."""
    steps = torch.linspace(0.0, 1.0, samples + 1, dtype=x.dtype)
    path = light_pos.to(x.dtype) - x
    points = x[..., None, :] + steps[:, None] * path[..., None, :]
    s = scene.sdf(points)
    alphas = neus_alpha(s[..., :-1], s[..., 1:], density)
    return residual_transmittance(alphas)


# direct shading

@dataclass
class ShadingTerms:
    radiance: torch.Tensor
    material: BrdfSample
    visibility: torch.Tensor
    cos_i: torch.Tensor
    points: torch.Tensor
    normals: torch.Tensor


def shade_point(
    scene: SdfScene,
    materials: Materials,
    light_pos: torch.Tensor,
    intensity: torch.Tensor,
    x: torch.Tensor,
    n: torch.Tensor,
    w_o: torch.Tensor,
    density: Optional[NeusDensity] = None,
    visibility_samples: int = 128,
    epsilon: float = 1e-3,
    eta: float = 1.5,
    material: Optional[BrdfSample] = None,
) -> ShadingTerms:
    """``L_i f_r max(w_i . n, 0) f_v`` at surface points; ``density=None`` skips visibility."""
    w_i, radiance_in = light_sample_at(light_pos, intensity, x)
    sample = materials(x) if material is None else material
    f_r = brdf_eval(sample, n, w_i, w_o, eta)
    cos_i = dot(n, w_i).clamp_min(0.0)
    if density is None:
        f_v = torch.ones_like(cos_i[..., 0])
    else:
        f_v = visibility(scene, x + epsilon * n, light_pos, density, visibility_samples)
    radiance = radiance_in * f_r * cos_i * f_v[..., None]
    return ShadingTerms(radiance=radiance, material=sample, visibility=f_v, cos_i=cos_i[..., 0], points=x, normals=n)


def shade_direct_terms(
    scene: SdfScene,
    materials: Materials,
    light: PointLight,
    camera: Camera,
    hit: SurfaceHit,
    density: Optional[NeusDensity] = None,
    visibility_samples: int = 128,
    epsilon: float = 1e-3,
    eta: float = 1.5,
) -> ShadingTerms:
    x = reparam_surface_point(scene, hit)
    n = normal_at(scene, x, create_graph=True)
    w_o = normalize(camera.origin(x.dtype) - x)
    light_pos = light.position(camera).to(x.dtype)
    return shade_point(
        scene, materials, light_pos, light.intensity, x, n, w_o,
        density=density, visibility_samples=visibility_samples, epsilon=epsilon, eta=eta,
    )


def shade_direct(
    scene: SdfScene,
    materials: Materials,
    light: PointLight,
    camera: Camera,
    hit: SurfaceHit,
    density: Optional[NeusDensity] = None,
    visibility_samples: int = 128,
    epsilon: float = 1e-3,
    eta: float = 1.5,
) -> torch.Tensor:
    """Direct radiance at converged primary hits, differentiable in geometry, materials and light."""
    return shade_direct_terms(
        scene, materials, light, camera, hit, density, visibility_samples, epsilon, eta
    ).radiance
