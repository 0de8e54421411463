"""Single-bounce inter-reflection gated by a learned blending scalar.

Directions are drawn from a GGX lobe around the mirror direction ``w_r``;
each draw is shaded at its secondary hit with the flashlight only and
weighted by ``f_r cos / pdf``. Draws rejected below the horizon count as
zero-valued, so the estimator divides by the total number of draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from pir.core.errors import GrazingDirectionError
from pir.core.rng import Rng
from pir.core.vec import dot, normalize, to_world
from pir.render.geometry import SdfScene, SurfaceHit, ray_box, sphere_trace
from pir.render.shading import (
    BrdfSample,
    Materials,
    brdf_eval,
    ggx_distribution,
    shade_point,
    specular_eval,
)

MAX_RETRIES = 8
OCCLUSION_SAMPLES = 20


def _scalar_encode(value: torch.Tensor, freqs: int) -> torch.Tensor:
    parts = [value]
    for k in range(freqs):
        scaled = (2.0 ** k) * math.pi * value
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


class BlendNet(nn.Module):
    """``gamma(distance, enc(w_i . n), roughness)`` in ``[0, 1]``."""

    def __init__(self, layers: int = 4, width: int = 32, freqs: int = 6, gamma_init: float = 0.05) -> None:
        super().__init__()
        self.freqs = int(freqs)
        dims = [2 + (1 + 2 * self.freqs)] + [width] * layers + [1]
        self.linears = nn.ModuleList(nn.Linear(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self.softplus = nn.Softplus(beta=100)
        self.constant: Optional[float] = None
        with torch.no_grad():
            last = self.linears[-1]
            nn.init.normal_(last.weight, 0.0, 1e-3)
            last.bias.fill_(math.log(gamma_init / (1.0 - gamma_init)))

    def forward(self, distance: torch.Tensor, cos_theta: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
        if self.constant is not None:
            return torch.full_like(distance, float(self.constant))
        h = torch.cat([distance, _scalar_encode(cos_theta, self.freqs), roughness], dim=-1)
        for index, lin in enumerate(self.linears):
            h = lin(h)
            if index < len(self.linears) - 1:
                h = self.softplus(h)
        return torch.sigmoid(h)


def reflect_dir(w: torch.Tensor, n: torch.Tensor) -> torch.Tensor:
    """Mirror ``w`` about ``n``: ``2 (n . w) n - w``."""
    cos = dot(n, w)
    if bool((cos <= 0).any()):
        raise GrazingDirectionError("reflect_dir needs w . n > 0")
    return normalize(2.0 * cos * n - w)


@dataclass
class LobeSampleSet:
    directions: torch.Tensor
    pdf: torch.Tensor
    valid: torch.Tensor
    count: int
    # per point: k plus every redraw, rejected or not
    draws: Optional[torch.Tensor] = None

    def normaliser(self) -> torch.Tensor:
        if self.draws is None:
            return torch.full(self.valid.shape[:-1], float(self.count), dtype=self.pdf.dtype)
        return self.draws.to(self.pdf.dtype)


def sample_ggx_half_vectors(rng: Rng, alpha: torch.Tensor, shape, dtype: torch.dtype) -> torch.Tensor:
    """Local-frame GGX microfacet normals (z up) for roughness ``alpha [..., 1]``."""
    u = rng.uniform((*shape, 2), dtype=dtype)
    u1, u2 = u[..., 0:1], u[..., 1:2]
    tan2 = alpha * alpha * u1 / (1.0 - u1).clamp_min(1e-12)
    cos_t = 1.0 / torch.sqrt(1.0 + tan2)
    sin_t = torch.sqrt((1.0 - cos_t * cos_t).clamp_min(0.0))
    phi = 2.0 * math.pi * u2
    return torch.cat([sin_t * torch.cos(phi), sin_t * torch.sin(phi), cos_t], dim=-1)


@torch.no_grad()
def _draw(rng: Rng, w_r: torch.Tensor, n: torch.Tensor, alpha: torch.Tensor, k: int):
    shape = (*w_r.shape[:-1], k)
    axis = w_r[..., None, :].expand(*shape, 3)
    m = to_world(sample_ggx_half_vectors(rng, alpha[..., None, :].expand(*shape, 1), shape, w_r.dtype), axis)
    cos_rm = dot(axis, m)
    w = normalize(2.0 * cos_rm * m - axis)
    ok = dot(w, n[..., None, :], keepdim=False) > 0
    return w, cos_rm[..., 0], ok


def sample_lobe(rng: Rng, w_r: torch.Tensor, n: torch.Tensor, roughness: torch.Tensor, k: int) -> LobeSampleSet:
    """``k`` directions per point from the GGX lobe (``alpha = roughness``) around ``w_r``.

    ``pdf = D(w_r . m) / 4``; draws below the horizon of ``n`` are redrawn up
    to ``MAX_RETRIES`` times and otherwise marked invalid. ``draws`` counts every
    attempt so an estimator divided by it treats rejected attempts as zero-valued draws.
    """
    if k < 1:
        raise ValueError("sample_lobe needs k >= 1")
    alpha = roughness.detach()
    w_r = w_r.detach()
    n = n.detach()
    dirs, cos_rm, ok = _draw(rng, w_r, n, alpha, k)
    draws = torch.full(ok.shape[:-1], float(k), dtype=torch.float64)
    for _ in range(MAX_RETRIES):
        if bool(ok.all()):
            break
        draws += (~ok).sum(dim=-1).to(torch.float64)
        new_dirs, new_cos, new_ok = _draw(rng, w_r, n, alpha, k)
        take = ~ok & new_ok
        dirs = torch.where(take[..., None], new_dirs, dirs)
        cos_rm = torch.where(take, new_cos, cos_rm)
        ok = ok | new_ok
    return LobeSampleSet(directions=dirs, pdf=_lobe_pdf(cos_rm, roughness), valid=ok, count=int(k), draws=draws)


def _lobe_pdf(cos_rm: torch.Tensor, roughness: torch.Tensor) -> torch.Tensor:
    return ggx_distribution(cos_rm.clamp(-1.0, 1.0), roughness) / 4.0


def secondary_hit(
    scene: SdfScene,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    max_steps: int = 128,
    tolerance: float = 1e-5,
) -> SurfaceHit:
    """Trace from surface-offset origins; misses carry ``converged = False``."""
    _, t_far, valid = ray_box(origins, dirs, scene.bound)
    t_min = torch.zeros_like(t_far)
    t_max = torch.where(valid, t_far, t_min)
    return sphere_trace(scene, origins, dirs, t_min, t_max, max_steps=max_steps, tolerance=tolerance)


@torch.no_grad()
def secondary_occlusion(
    scene: SdfScene,
    x_prime: torch.Tensor,
    light_pos: torch.Tensor,
    epsilon: float = 1e-3,
    samples: int = OCCLUSION_SAMPLES,
) -> torch.Tensor:
    """True where any of ``samples`` points strictly between the ends has ``s < 0``."""
    path = light_pos.to(x_prime.dtype) - x_prime
    length = torch.linalg.vector_norm(path, dim=-1)
    direction = path / length.clamp_min(1e-12)[..., None]
    steps = torch.linspace(0.0, 1.0, samples, dtype=x_prime.dtype)
    t = epsilon + steps * (length[..., None] - 2.0 * epsilon)
    points = x_prime[..., None, :] + t[..., None] * direction[..., None, :]
    inside = (scene.sdf(points) < 0).any(dim=-1)
    return inside & (length >= 2.0 * epsilon)


@dataclass
class IndirectTerms:
    radiance: torch.Tensor
    gamma: torch.Tensor
    hits: torch.Tensor


def indirect_radiance_terms(
    scene: SdfScene,
    materials: Materials,
    light_pos: torch.Tensor,
    intensity: torch.Tensor,
    blend: BlendNet,
    x: torch.Tensor,
    n: torch.Tensor,
    w_o: torch.Tensor,
    samples: LobeSampleSet,
    material: Optional[BrdfSample] = None,
    epsilon: float = 1e-3,
    eta: float = 1.5,
    max_steps: int = 128,
    specular_only: bool = False,
) -> IndirectTerms:
    """``gamma * L_ind f_r cos / pdf`` averaged over all draws, per primary point ``x [B, 3]``."""
    batch, k = samples.directions.shape[:2]
    w = samples.directions.detach()
    x_flat = x.detach()[:, None, :].expand(batch, k, 3).reshape(-1, 3)
    n_flat = n.detach()[:, None, :].expand(batch, k, 3).reshape(-1, 3)
    w_flat = w.reshape(-1, 3)
    candidate = samples.valid.reshape(-1)

    hit = secondary_hit(scene, x_flat + epsilon * n_flat, w_flat, max_steps=max_steps)
    lit = candidate & hit.converged
    if bool(lit.any()):
        lit_idx = lit.nonzero()[:, 0]
        occluded = secondary_occlusion(scene, hit.x[lit_idx], light_pos.detach(), epsilon)
        keep = torch.zeros_like(lit)
        keep[lit_idx[~occluded]] = True
        lit = keep

    contribution = torch.zeros(batch * k, 3, dtype=x.dtype)
    gamma = torch.zeros(batch * k, 1, dtype=x.dtype)
    if bool(lit.any()):
        idx = lit.nonzero()[:, 0]
        x2 = hit.x[idx].detach()
        n2 = hit.n[idx].detach()
        # secondary geometry is frozen; secondary materials still learn through L_ind
        secondary = shade_point(
            scene, materials, light_pos, intensity, x2, n2, -w_flat[idx], density=None, eta=eta
        )
        l_ind = secondary.radiance

        primary = material if material is not None else materials(x)
        prim = BrdfSample(
            primary.diffuse[:, None, :].expand(batch, k, 3).reshape(-1, 3)[idx],
            primary.specular[:, None, :].expand(batch, k, 3).reshape(-1, 3)[idx],
            primary.roughness[:, None, :].expand(batch, k, 1).reshape(-1, 1)[idx],
        )
        n_p = n[:, None, :].expand(batch, k, 3).reshape(-1, 3)[idx]
        w_o_p = w_o[:, None, :].expand(batch, k, 3).reshape(-1, 3)[idx]
        f_r = (specular_eval if specular_only else brdf_eval)(prim, n_p, w_flat[idx], w_o_p, eta)
        cos = dot(n_p, w_flat[idx]).clamp_min(0.0)

        w_r = normalize(2.0 * dot(n_p, w_o_p) * n_p - w_o_p).detach()
        m = normalize(w_flat[idx] + w_r)
        pdf = _lobe_pdf(dot(m, w_r).clamp(-1.0, 1.0), prim.roughness).clamp_min(1e-12)

        distance = torch.linalg.vector_norm(x2 - x_flat[idx], dim=-1, keepdim=True)
        g = blend(distance, dot(w_flat[idx], n_flat[idx]), secondary.material.roughness.detach())
        contribution = contribution.index_put((idx,), g * l_ind * f_r * cos / pdf)
        gamma = gamma.index_put((idx,), g)

    radiance = contribution.reshape(batch, k, 3).sum(dim=1) / samples.normaliser()[:, None]
    return IndirectTerms(radiance=radiance, gamma=gamma.reshape(batch, k), hits=lit.reshape(batch, k))


def indirect_radiance(
    scene: SdfScene,
    materials: Materials,
    light_pos: torch.Tensor,
    intensity: torch.Tensor,
    blend: BlendNet,
    x: torch.Tensor,
    n: torch.Tensor,
    w_o: torch.Tensor,
    samples: LobeSampleSet,
    **kwargs,
) -> torch.Tensor:
    return indirect_radiance_terms(scene, materials, light_pos, intensity, blend, x, n, w_o, samples, **kwargs).radiance
