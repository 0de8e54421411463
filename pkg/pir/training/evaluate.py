"""Full-view rendering of a trained scene and its metrics against the dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from pir.core.camera import Camera
from pir.core.errors import ScaleMatchError
from pir.core.image import ImageBuffer
from pir.core.rng import Rng
from pir.render.scene import RenderOptions, SceneState, render_pixels
from pir.scenegen.dataset import Dataset, ViewRecord
from pir.training.losses import albedo_scale_match, mse, psnr, ssim

RENDER_CHUNK = 1024
MAP_NAMES = ("rgb", "diffuse", "specular", "rough", "visibility", "indirect", "mask")


@dataclass
class RenderedView:
    """``H x W x C`` float32 maps of one view; background pixels are zero."""

    rgb: torch.Tensor
    direct: torch.Tensor
    indirect: torch.Tensor
    diffuse: torch.Tensor
    specular: torch.Tensor
    rough: torch.Tensor
    visibility: torch.Tensor
    mask: torch.Tensor

    def maps(self) -> Dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in MAP_NAMES}

    def save(self, out_dir: Union[str, Path]) -> List[Path]:
        """Each map as ``<name>.tnsr`` plus an sRGB ``<name>.png`` preview."""
        out_dir = Path(out_dir)
        written = []
        for name, tensor in self.maps().items():
            buffer = ImageBuffer.from_tensor(tensor)
            buffer.save(out_dir / f"{name}.tnsr")
            preview = buffer.data if buffer.channels == 3 else np.repeat(buffer.data[..., :1], 3, axis=-1)
            ImageBuffer(preview).save_preview(out_dir / f"{name}.png")
            written.append(out_dir / f"{name}.tnsr")
        return written


def render_view(
    state: SceneState,
    camera: Camera,
    options: RenderOptions,
    rng: Optional[Rng] = None,
    with_indirect: bool = True,
    chunk: int = RENDER_CHUNK,
) -> RenderedView:
    rows, cols = camera.pixel_grid()
    parts: Dict[str, List[torch.Tensor]] = {name: [] for name in ("rgb", "direct", "indirect", "diffuse", "specular", "rough", "visibility", "mask")}
    for start in range(0, rows.numel(), chunk):
        r, c = rows[start:start + chunk], cols[start:start + chunk]
        with torch.no_grad():
            out = render_pixels(state, camera, r, c, options, rng=rng, with_indirect=with_indirect)
        parts["rgb"].append(out.rgb.detach())
        parts["direct"].append(out.direct.detach())
        parts["indirect"].append(out.indirect.detach())
        parts["diffuse"].append(out.diffuse.detach())
        parts["specular"].append(out.specular.detach())
        parts["rough"].append(out.roughness.detach())
        parts["visibility"].append(out.visibility.detach()[:, None])
        parts["mask"].append(out.mask.to(torch.float32)[:, None])
    shape = (camera.height, camera.width)
    maps = {name: torch.cat(chunks, dim=0).to(torch.float32).reshape(*shape, -1) for name, chunks in parts.items()}
    return RenderedView(**maps)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def view_metrics(rendered: RenderedView, view: ViewRecord) -> Dict[str, Any]:
    """Image metrics for one view, plus material metrics where GT maps exist.

    Material metrics cover the pixels that are surface in both the GT mask and
    the render; the diffuse albedo is compared after a global scale match.
    """
    ref = view.image.as_tensor(torch.float64)
    rgb = rendered.rgb.to(torch.float64)
    row: Dict[str, Any] = {
        "view": view.index,
        "psnr": psnr(rgb, ref),
        "ssim": float(ssim(rgb, ref)),
        "mse": float(mse(rgb, ref)),
    }
    gt_mask = view.mask
    if gt_mask is None:
        return row
    both = torch.from_numpy(np.array(gt_mask)) & (rendered.mask[..., 0] > 0.5)
    row["surface_pixels"] = int(both.sum())
    if not bool(both.any()):
        return row
    if "diffuse" in view.gt:
        gt = view.gt["diffuse"].as_tensor(torch.float64)[both]
        try:
            scale, matched = albedo_scale_match(rendered.diffuse.to(torch.float64)[both], gt)
            row["albedo_scale"] = scale
            row["albedo_psnr"] = psnr(matched, gt)
        except ScaleMatchError:
            row["albedo_scale"] = None
            row["albedo_psnr"] = None
    if "specular" in view.gt:
        gt = view.gt["specular"].as_tensor(torch.float64)[both]
        row["specular_mse"] = float(mse(rendered.specular.to(torch.float64)[both], gt))
    if "rough" in view.gt:
        gt = view.gt["rough"].as_tensor(torch.float64)[both]
        row["roughness_mse"] = float(mse(rendered.rough.to(torch.float64)[both], gt))
    return row


def aggregate(rows: Sequence[Dict[str, Any]]) -> Dict[str, Optional[float]]:
    """Mean of every numeric metric over the views that report it."""
    keys = sorted({k for row in rows for k, v in row.items() if k != "view" and isinstance(v, (int, float))})
    means: Dict[str, Optional[float]] = {}
    for key in keys:
        values = [float(row[key]) for row in rows if isinstance(row.get(key), (int, float))]
        means[key] = _finite_or_none(float(np.mean(values))) if values else None
    return means


def light_offset_error(state: SceneState, dataset: Dataset) -> Optional[float]:
    truth = dataset.light_offset
    if truth is None:
        return None
    offset = state.light.offset.detach().to(torch.float64).numpy()
    return float(np.linalg.norm(offset - truth))


def evaluate_views(
    state: SceneState,
    dataset: Dataset,
    options: RenderOptions,
    seed: int,
    views: Optional[Sequence[int]] = None,
    with_indirect: bool = True,
) -> Dict[str, Any]:
    indices = list(range(len(dataset.views))) if views is None else list(views)
    for index in indices:
        if index < 0 or index >= len(dataset.views):
            raise IndexError(f"view {index} out of range (dataset has {len(dataset.views)} views)")
    base = Rng(seed)
    rows = []
    for index in indices:
        view = dataset.views[index]
        rendered = render_view(state, view.camera, options, rng=base.fork(1000 + index), with_indirect=with_indirect)
        rows.append(view_metrics(rendered, view))
    report: Dict[str, Any] = {"views": rows, "mean": aggregate(rows)}
    report["light_offset"] = [float(v) for v in state.light.offset.detach().tolist()]
    report["light_intensity"] = float(state.light.intensity.detach())
    report["light_offset_error"] = light_offset_error(state, dataset)
    return report
