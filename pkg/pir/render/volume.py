"""NeuS-style volume rendering used to initialise geometry and diffuse albedo.

The SDF-to-opacity conversion is the unbiased one,
``alpha_i = max((Phi(s_i) - Phi(s_next)) / Phi(s_i), 0)`` with ``Phi`` the
logistic CDF of scale ``sharpness``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from pir.core.rng import Rng
from pir.render.fields import Field, FieldSpec, encoding_dim, positional_encode
from pir.render.geometry import SdfScene, ray_box

MIN_CDF = 1e-10


class NeusDensity(nn.Module):
    def __init__(self, sharpness: float = 20.0) -> None:
        super().__init__()
        if sharpness <= 0:
            raise ValueError("sharpness must be positive")
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(sharpness)))

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.log_sharpness)

    def cdf(self, s: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(s * self.sharpness.to(s.dtype))


def alpha_from_cdf(cdf: torch.Tensor, cdf_next: torch.Tensor) -> torch.Tensor:
    return ((cdf - cdf_next) / cdf.clamp_min(MIN_CDF)).clamp(0.0, 1.0)


def neus_alpha(s_i: torch.Tensor, s_next: torch.Tensor, density: NeusDensity) -> torch.Tensor:
    return alpha_from_cdf(density.cdf(s_i), density.cdf(s_next))


def transmittance(alphas: torch.Tensor) -> torch.Tensor:
    """Exclusive prefix product ``T_j = prod_{k<j} (1 - alpha_k)`` along the last axis."""
    ones = torch.ones_like(alphas[..., :1])
    return torch.cumprod(torch.cat([ones, 1.0 - alphas[..., :-1]], dim=-1), dim=-1)


def composite(alphas: torch.Tensor, colors: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Front-to-back alpha compositing: ``alphas [..., N]``, ``colors [..., N, C]``."""
    weights = alphas * transmittance(alphas)
    return (weights[..., None] * colors).sum(dim=-2), weights


class RadianceHead(nn.Module):
    """View-dependent colour ``c(x, d, n, f_geo)`` in ``[0, 1]^3``."""

    def __init__(self, spec: FieldSpec, geo_feature_dim: int, view_freqs: int = 4) -> None:
        super().__init__()
        self.view_freqs = int(view_freqs)
        self.geo_feature_dim = int(geo_feature_dim)
        extra = encoding_dim(self.view_freqs) + 3 + self.geo_feature_dim
        self.field = Field(
            FieldSpec(
                backend="mlp",
                out_dim=3,
                freqs=spec.freqs,
                layers=spec.layers,
                width=spec.width,
                extra_dim=extra,
                activation="sigmoid",
                bound=spec.bound,
            ),
            name="radiance",
        )

    def forward(self, x: torch.Tensor, d: torch.Tensor, n: torch.Tensor, f_geo: torch.Tensor) -> torch.Tensor:
        extra = torch.cat([positional_encode(d, self.view_freqs), n, f_geo], dim=-1)
        return self.field(x, extra)


@dataclass
class VolumeRender:
    color: torch.Tensor
    weights: torch.Tensor
    depth: torch.Tensor
    gradients: torch.Tensor
    points: torch.Tensor
    hit_box: torch.Tensor


def stratified_depths(
    t_min: torch.Tensor,
    t_max: torch.Tensor,
    samples: int,
    rng: Optional[Rng] = None,
) -> torch.Tensor:
    bins = torch.arange(samples, dtype=t_min.dtype)
    if rng is None:
        jitter = torch.full((*t_min.shape, samples), 0.5, dtype=t_min.dtype)
    else:
        jitter = rng.uniform((*t_min.shape, samples), dtype=t_min.dtype)
    return t_min[..., None] + (bins + jitter) / samples * (t_max - t_min)[..., None]


def volume_render(
    scene: SdfScene,
    head: RadianceHead,
    density: NeusDensity,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    samples: int = 64,
    rng: Optional[Rng] = None,
) -> VolumeRender:
    """Composite ``samples`` stratified sections per ray inside the scene box.

    Section opacities come from the SDF value and its directional derivative
    at the section midpoint (estimated SDF at both ends of the section).
    """
    if samples < 1:
        raise ValueError("volume_render needs at least one sample per ray")
    t_near, t_far, hit_box = ray_box(origins, dirs, scene.bound)
    t_far = torch.where(hit_box, t_far, t_near + 1e-3)
    mids = stratified_depths(t_near, t_far, samples, rng)
    deltas = ((t_far - t_near) / samples)[..., None].expand_as(mids)

    points = origins[..., None, :] + mids[..., None] * dirs[..., None, :]
    with torch.enable_grad():
        pts = points.detach().requires_grad_(True)
        s, f_geo = scene(pts)
        (grad,) = torch.autograd.grad(s.sum(), pts, create_graph=True)
    view = dirs[..., None, :].expand_as(pts)
    true_cos = (view * grad).sum(dim=-1)
    iter_cos = -torch.relu(-true_cos)
    est_prev = s - iter_cos * deltas * 0.5
    est_next = s + iter_cos * deltas * 0.5
    alphas = neus_alpha(est_prev, est_next, density)
    alphas = alphas * hit_box[..., None].to(alphas.dtype)

    normals = grad / torch.linalg.vector_norm(grad, dim=-1, keepdim=True).clamp_min(1e-8)
    colors = head(pts, view, normals, f_geo)
    color, weights = composite(alphas, colors)
    depth = (weights * mids).sum(dim=-1)
    return VolumeRender(color=color, weights=weights, depth=depth, gradients=grad, points=pts, hit_box=hit_box)
