"""Geometry initialisation by volume rendering, and the diffuse-albedo warm start."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import torch

from pir.core.errors import DivergenceError
from pir.core.logger import console_status, console_status_done, console_warn
from pir.core.rng import Rng
from pir.render.geometry import trace_rays
from pir.render.scene import SceneState
from pir.render.volume import volume_render
from pir.scenegen.dataset import Dataset
from pir.training.loss_log import LossLog
from pir.training.losses import eikonal_from_gradients, eikonal_loss, mse
from pir.training.optim import OptimizerState

RESIDUAL_SAMPLES = 4096


@dataclass
class InitReport:
    iterations: int
    final_loss: float
    eikonal_residual: float
    views: int
    warmstart_iterations: int = 0
    warmstart_loss: float = float("nan")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def eikonal_residual(state: SceneState, rng: Rng, samples: int = RESIDUAL_SAMPLES) -> float:
    """Mean ``(|grad s| - 1)^2`` over uniform points in the scene box."""
    bound = state.scene.bound
    points = (rng.uniform((samples, 3)) * 2.0 - 1.0) * bound
    return float(eikonal_loss(state.scene, points).detach())


def init_fit(
    state: SceneState,
    dataset: Dataset,
    iters: int,
    rng: Optional[Rng] = None,
    rays_per_batch: int = 512,
    samples_per_ray: int = 64,
    learning_rate: float = 1e-3,
    eikonal_weight: float = 0.1,
    log: Optional[LossLog] = None,
) -> InitReport:
    """Fit the SDF, density and radiance head to the images with an L1 + Eikonal objective."""
    rng = rng if rng is not None else Rng(0)
    if len(dataset.views) < 2:
        console_warn(f"[init] dataset {dataset.root} has {len(dataset.views)} view(s); geometry is under-constrained")
    blocks = state.blocks()
    names = [name for name in ("sdf", "density", "radiance") if name in blocks]
    optimizer = OptimizerState({name: blocks[name] for name in names}, learning_rate)
    last = float("nan")
    for iteration in range(iters):
        view = dataset.views[rng.choice(len(dataset.views))]
        camera = view.camera
        rows = rng.integers(camera.height, rays_per_batch)
        cols = rng.integers(camera.width, rays_per_batch)
        origins, dirs = camera.pixel_rays(rows, cols)
        target = view.image.as_tensor()[rows, cols]

        render = volume_render(state.scene, state.radiance, state.density, origins, dirs, samples_per_ray, rng)
        l1 = (render.color - target).abs().mean()
        terms = {"rgb": l1}
        total = l1
        if state.geometry_learned:
            box = (rng.uniform((rays_per_batch, 3)) * 2.0 - 1.0) * state.scene.bound
            eik = eikonal_loss(state.scene, box)
            if bool(render.hit_box.any()):
                eik = 0.5 * (eik + eikonal_from_gradients(render.gradients[render.hit_box]))
            terms["eikonal"] = eik
            total = total + eikonal_weight * eik
        value = float(total.detach())
        if not math.isfinite(value):
            optimizer.zero_grad()
            raise DivergenceError(f"[init] loss became non-finite ({value}) at iteration {iteration}")
        total.backward()
        optimizer.step(names)
        last = value
        if log is not None:
            row = {name: float(term.detach()) for name, term in terms.items()}
            row["total"] = value
            log.append(iteration, "init", row)
        console_status(f"[init] {iteration + 1}/{iters} loss={value:.5f}")
    console_status_done()
    residual = eikonal_residual(state, rng.fork(7)) if state.geometry_learned else 0.0
    return InitReport(iterations=iters, final_loss=last, eikonal_residual=residual, views=len(dataset.views))


def albedo_warmstart(
    state: SceneState,
    dataset: Dataset,
    iters: int,
    rng: Optional[Rng] = None,
    rays_per_batch: int = 512,
    learning_rate: float = 1e-3,
    trace_steps: int = 128,
    log: Optional[LossLog] = None,
) -> float:
    """Regress the diffuse field onto the radiance head seen head-on, ``c(x, d=-n)``, at surface points."""
    rng = rng if rng is not None else Rng(0)
    block = state.blocks()["diffuse"]
    optimizer = OptimizerState({"diffuse": block}, learning_rate)
    last = float("nan")
    for iteration in range(iters):
        view = dataset.views[rng.choice(len(dataset.views))]
        camera = view.camera
        rows = rng.integers(camera.height, rays_per_batch)
        cols = rng.integers(camera.width, rays_per_batch)
        origins, dirs = camera.pixel_rays(rows, cols)
        hit = trace_rays(state.scene, origins, dirs, max_steps=trace_steps)
        if not bool(hit.converged.any()):
            continue
        surface = hit.select(hit.converged)
        x, n = surface.x.detach(), surface.n.detach()
        with torch.no_grad():
            _, f_geo = state.scene(x)
            target = state.radiance(x, -n, n, f_geo)
        loss = mse(state.materials.diffuse(x), target)
        loss.backward()
        optimizer.step(["diffuse"])
        last = float(loss.detach())
        if log is not None:
            log.append(iteration, "albedo_warmstart", {"rgb": last, "total": last})
    return last
