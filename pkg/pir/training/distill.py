"""Surface feature distillation and injection into the material fields."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

import cv2
import numpy as np
import torch

from pir.core.camera import Camera
from pir.core.errors import FeatureDimensionError, MissingFeatureViewError, StageOrderError, TensorFormatError
from pir.core.logger import console_status, console_status_done, console_warn
from pir.core.rng import Rng
from pir.core.tensor_io import tensor_read, write_png
from pir.render.geometry import trace_rays
from pir.render.scene import FeatureField, SceneState
from pir.render.shading import MaterialFields
from pir.scenegen.dataset import Dataset
from pir.training.loss_log import LossLog
from pir.training.losses import feature_loss
from pir.training.optim import OptimizerState

PathLike = Union[str, Path]


@dataclass
class FeatureMapSet:
    """Per-view ``H x W x D`` feature maps at image resolution."""

    maps: Dict[int, torch.Tensor]
    dim: int

    def __len__(self) -> int:
        return len(self.maps)

    def lookup(self, view: int, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        if view not in self.maps:
            raise MissingFeatureViewError(f"no feature map for view {view}")
        return self.maps[view][rows, cols]


def _reduce_to(array: np.ndarray, size: Tuple[int, int], path: Path) -> np.ndarray:
    height, width = size
    fh, fw = array.shape[:2]
    if (fh, fw) == (height, width):
        return array
    if fh % height or fw % width or fh // height != fw // width:
        raise FeatureDimensionError(
            f"{path}: feature map {fh}x{fw} is not an integer multiple of the {height}x{width} image"
        )
    channels = [
        cv2.resize(np.ascontiguousarray(array[..., c]), (width, height), interpolation=cv2.INTER_AREA)
        for c in range(array.shape[2])
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def ingest_features(
    paths: Mapping[int, PathLike],
    expected_dim: int,
    image_size: Optional[Tuple[int, int]] = None,
) -> FeatureMapSet:
    """Validate and load one TNSR feature map per view.

    All maps must share one spatial size and the channel count
    ``expected_dim``. With ``image_size`` given, maps at an integer multiple
    of it are area-averaged down to it.
    """
    maps: Dict[int, torch.Tensor] = {}
    spatial: Optional[Tuple[int, int]] = None
    for view in sorted(paths):
        path = Path(paths[view])
        if not path.exists():
            raise MissingFeatureViewError(f"feature map for view {view} not found: {path}")
        try:
            dims, data = tensor_read(path)
        except TensorFormatError as exc:
            raise FeatureDimensionError(f"{path}: unreadable feature map: {exc}") from exc
        if len(dims) != 3:
            raise FeatureDimensionError(f"{path}: expected H x W x D, got dims {dims}")
        if dims[2] != expected_dim:
            raise FeatureDimensionError(f"{path}: feature dim {dims[2]} != expected {expected_dim}")
        if spatial is None:
            spatial = (dims[0], dims[1])
        elif (dims[0], dims[1]) != spatial:
            raise FeatureDimensionError(
                f"{path}: feature map is {dims[0]}x{dims[1]}, other views are {spatial[0]}x{spatial[1]}"
            )
        if image_size is not None:
            data = _reduce_to(data, image_size, path)
        maps[view] = torch.from_numpy(np.array(data, dtype=np.float32))
    return FeatureMapSet(maps=maps, dim=int(expected_dim))


def save_feature_preview(features: torch.Tensor, path: PathLike) -> None:
    """First three channels, each min-max normalised, as an sRGB PNG."""
    array = features.detach().cpu().numpy().astype(np.float64)
    if array.ndim != 3:
        raise FeatureDimensionError(f"feature preview needs H x W x D, got shape {array.shape}")
    channels = array[..., :3]
    if channels.shape[2] < 3:
        channels = np.concatenate([channels, np.zeros((*channels.shape[:2], 3 - channels.shape[2]))], axis=-1)
    lo = channels.min(axis=(0, 1), keepdims=True)
    span = channels.max(axis=(0, 1), keepdims=True) - lo
    write_png(path, (channels - lo) / np.where(span > 0, span, 1.0))


def distill_fit(
    state: SceneState,
    dataset: Dataset,
    features: FeatureMapSet,
    iters: int,
    weight: float = 1.0,
    rng: Optional[Rng] = None,
    rays_per_batch: int = 512,
    learning_rate: float = 1e-3,
    trace_steps: int = 128,
    trace_tolerance: float = 1e-5,
    log: Optional[LossLog] = None,
) -> Dict[str, float]:
    """Fit ``state.features`` to the feature maps at traced surface points, then freeze it.

    Background pixels are ignored; a batch with no surface hit is skipped.
    """
    field = state.features
    if field is None:
        raise FeatureDimensionError("scene has no feature field (features.dim is 0)")
    if field.frozen:
        raise StageOrderError("feature field is already frozen; distillation has run")
    if features.dim != field.dim:
        raise FeatureDimensionError(f"feature maps have dim {features.dim}, field outputs {field.dim}")
    rng = rng if rng is not None else Rng(0)
    block = state.blocks()["feature"]
    optimizer = OptimizerState({"feature": block}, learning_rate)
    skipped = 0
    last = float("nan")
    for iteration in range(iters):
        view = dataset.views[rng.choice(len(dataset.views))]
        camera = view.camera
        rows = rng.integers(camera.height, rays_per_batch)
        cols = rng.integers(camera.width, rays_per_batch)
        origins, dirs = camera.pixel_rays(rows, cols)
        hit = trace_rays(state.scene, origins, dirs, max_steps=trace_steps, tolerance=trace_tolerance)
        if not bool(hit.converged.any()):
            skipped += 1
            console_warn(f"[distill] iteration {iteration}: batch has no surface hits, skipped")
            continue
        mask = hit.converged
        target = features.lookup(view.index, rows[mask], cols[mask])
        raw = feature_loss(field(hit.x[mask].detach()), target)
        loss = weight * raw
        loss.backward()
        optimizer.step(["feature"])
        last = float(loss.detach())
        if log is not None:
            log.append(iteration, "distill", {"dino": float(raw.detach()), "total": last})
        console_status(f"[distill] {iteration + 1}/{iters} loss={last:.6f}")
    console_status_done()
    field.freeze()
    return {"iterations": float(iters), "skipped_batches": float(skipped), "final_loss": last}


def inject_features(materials: MaterialFields, feature_field: Optional[FeatureField]) -> None:
    """Feed the frozen feature field to the specular and roughness fields."""
    if feature_field is None:
        if materials.feature_dim:
            raise FeatureDimensionError(f"material fields expect {materials.feature_dim}-dim features, none given")
        materials.attach_features(None)
        return
    if not feature_field.frozen:
        raise StageOrderError("feature field must be frozen (distilled) before injection")
    if feature_field.dim != materials.feature_dim:
        raise FeatureDimensionError(
            f"feature field outputs {feature_field.dim} channels, material fields take {materials.feature_dim}"
        )
    materials.attach_features(feature_field)


def render_feature_map(state: SceneState, view_camera: Camera, trace_steps: int = 128) -> torch.Tensor:
    """``f_dino`` at the traced surface of every pixel (zero on background), ``H x W x D``."""
    field = state.features
    if field is None:
        raise FeatureDimensionError("scene has no feature field")
    origins, dirs = view_camera.pixel_rays()
    hit = trace_rays(state.scene, origins, dirs, max_steps=trace_steps)
    out = torch.zeros(origins.shape[0], field.dim)
    if bool(hit.converged.any()):
        with torch.no_grad():
            out[hit.converged] = field(hit.x[hit.converged])
    return out.reshape(view_camera.height, view_camera.width, field.dim)
