"""Joint physically based optimisation over image patches.

Each iteration renders one random ``patch_size`` square of one random view,
masks background pixels out of the photometric terms and steps the blocks
that the schedule has unfrozen:

* materials: always;
* SDF and light: after ``warmup_iters`` (when enabled and learnable);
* blending net: from ``blend_start`` on; before that it is neither evaluated
  nor stepped.

Density sharpness, the radiance head and the distilled feature field stay
frozen for the whole stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch

from pir.core.config import SceneConfig
from pir.core.rng import Rng
from pir.render.scene import RenderOptions, SceneState, render_pixels
from pir.render.shading import MaterialFields
from pir.scenegen.dataset import Dataset
from pir.training.distill import FeatureMapSet
from pir.training.losses import (
    LossReport,
    LossWeights,
    eikonal_loss,
    feature_loss,
    pyramid_l2,
    roughness_range_loss,
    smoothness_loss,
    ssim_loss,
    total_loss,
)
from pir.training.optim import OptimizerState, set_frozen

PBR_TERMS = ("rgb", "ssim", "eikonal", "roughness_range", "smoothness", "dino")
MATERIAL_BLOCKS = ("diffuse", "specular", "roughness")
ALWAYS_FROZEN = ("density", "radiance", "feature")
SMOOTHNESS_STD = 0.01


@dataclass(frozen=True)
class PbrSchedule:
    iters: int
    warmup_iters: int
    blend_start: int
    patch_size: int
    learning_rate: float
    optimize_geometry: bool
    optimize_light: bool
    pyramid_levels: int
    smoothness_std: float
    log_every: int

    @classmethod
    def from_config(cls, config: SceneConfig) -> "PbrSchedule":
        schedule = config.section("schedule")
        return cls(
            iters=schedule["pbr_iters"],
            warmup_iters=schedule["warmup_iters"],
            blend_start=schedule["blend_start"],
            patch_size=schedule["patch_size"],
            learning_rate=schedule["learning_rate"],
            optimize_geometry=schedule["optimize_geometry"] and not config.get("dataset.fixed_geometry"),
            optimize_light=schedule["optimize_light"],
            pyramid_levels=int(config.get("loss.pyramid_levels")),
            smoothness_std=SMOOTHNESS_STD * float(config.get("loss.smoothness_scale")),
            log_every=schedule["log_every"],
        )

    def active_blocks(self, iteration: int, state: SceneState) -> List[str]:
        names = list(MATERIAL_BLOCKS)
        warm = iteration >= self.warmup_iters
        if warm and self.optimize_geometry and state.geometry_learned:
            names.append("sdf")
        if warm and self.optimize_light:
            names.append("light")
        if iteration >= self.blend_start:
            names.append("blend")
        return names


@dataclass
class PbrStepResult:
    report: Optional[LossReport]
    view: int
    stepped: Tuple[str, ...]
    hits: int

    @property
    def skipped(self) -> bool:
        return self.report is None


def _patch(rng: Rng, height: int, width: int, size: int) -> Tuple[torch.Tensor, torch.Tensor, int, int]:
    ph, pw = min(size, height), min(size, width)
    row0 = rng.choice(height - ph + 1)
    col0 = rng.choice(width - pw + 1)
    rows, cols = torch.meshgrid(torch.arange(row0, row0 + ph), torch.arange(col0, col0 + pw), indexing="ij")
    return rows.reshape(-1), cols.reshape(-1), ph, pw


def material_smoothness(materials: MaterialFields, anchors: torch.Tensor, rng: Rng, std: float) -> torch.Tensor:
    """Smoothness over specular albedo and roughness; the diffuse albedo is left free."""
    return smoothness_loss([lambda x: materials(x).specular, lambda x: materials(x).roughness], anchors, rng, std=std)


def pbr_terms(
    state: SceneState,
    dataset: Dataset,
    view_index: int,
    rows: torch.Tensor,
    cols: torch.Tensor,
    shape: Tuple[int, int],
    schedule: PbrSchedule,
    options: RenderOptions,
    rng: Rng,
    iteration: int,
    features: Optional[FeatureMapSet] = None,
    geometry_active: bool = False,
) -> Tuple[Dict[str, torch.Tensor], int]:
    """Loss terms for one patch and the number of surface hits in it (terms are empty without hits)."""
    view = dataset.views[view_index]
    render = render_pixels(
        state, view.camera, rows, cols, options, rng=rng, with_indirect=iteration >= schedule.blend_start
    )
    mask = render.mask
    hits = int(mask.sum())
    if hits == 0:
        return {}, 0
    ref = view.image.as_tensor()[rows, cols]
    pred = torch.where(mask[:, None], render.rgb, ref.to(render.rgb.dtype))
    pred_img, ref_img = pred.reshape(*shape, 3), ref.reshape(*shape, 3)

    terms: Dict[str, torch.Tensor] = {
        "rgb": pyramid_l2(pred_img, ref_img, schedule.pyramid_levels),
        "ssim": ssim_loss(pred_img, ref_img),
    }
    surface = render.points[mask]
    anchors = surface.detach()
    if geometry_active:
        box = (rng.uniform((hits, 3), dtype=anchors.dtype) * 2.0 - 1.0) * state.scene.bound
        terms["eikonal"] = eikonal_loss(state.scene, torch.cat([anchors, box], dim=0))
    terms["roughness_range"] = roughness_range_loss(render.roughness[mask])
    terms["smoothness"] = material_smoothness(state.materials, anchors, rng, schedule.smoothness_std)
    if features is not None and state.features is not None:
        target = features.lookup(view.index, rows[mask], cols[mask])
        terms["dino"] = feature_loss(state.features(surface), target)
    return terms, hits


def pbr_step(
    state: SceneState,
    dataset: Dataset,
    optimizer: OptimizerState,
    iteration: int,
    schedule: PbrSchedule,
    options: RenderOptions,
    weights: LossWeights,
    rng: Rng,
    features: Optional[FeatureMapSet] = None,
) -> PbrStepResult:
    """One patch, one backward pass, one Adam step per active block.

    A patch without surface hits is skipped (nothing is stepped). A
    non-finite term raises ``NonFiniteLossError`` before any update.
    """
    blocks = state.blocks()
    active = schedule.active_blocks(iteration, state)
    set_frozen(blocks, [name for name in blocks if name not in active], True)
    set_frozen(blocks, active, False)

    view_index = rng.choice(len(dataset.views))
    camera = dataset.views[view_index].camera
    rows, cols, ph, pw = _patch(rng, camera.height, camera.width, schedule.patch_size)
    terms, hits = pbr_terms(
        state, dataset, view_index, rows, cols, (ph, pw), schedule, options, rng, iteration,
        features=features, geometry_active="sdf" in active,
    )
    if hits == 0:
        optimizer.zero_grad()
        return PbrStepResult(report=None, view=view_index, stepped=(), hits=0)
    report = total_loss(terms, weights)
    report.total.backward()
    optimizer.step(active)
    optimizer.zero_grad()
    return PbrStepResult(report=report, view=view_index, stepped=tuple(active), hits=hits)


def pbr_optimizer(state: SceneState, learning_rate: float) -> OptimizerState:
    blocks = state.blocks()
    return OptimizerState({name: block for name, block in blocks.items() if name not in ALWAYS_FROZEN}, learning_rate)
