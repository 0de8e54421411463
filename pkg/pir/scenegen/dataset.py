"""Dataset layout shared by the generator and every training stage.

::

    scene.json
    images/{v:04}.tnsr                     linear RGB, H x W x 3
    gt/{diffuse,specular,rough,mask}/{v:04}.tnsr
    features/{v:04}.tnsr                   H x W x D
    previews/{v:04}.png
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from pir.app_identity import get_app_version
from pir.core.camera import Camera
from pir.core.errors import DatasetError, TensorFormatError
from pir.core.image import ImageBuffer
from pir.core.logger import console_info, console_status, console_status_done
from pir.core.rng import Rng
from pir.core.tensor_io import tensor_write, write_png
from pir.scenegen.oracle import material_features, reference_layers
from pir.scenegen.presets import ScenePreset, get_preset

SCENE_FILE = "scene.json"
GT_KINDS = ("diffuse", "specular", "rough", "mask")
FEATURE_DIM = 8


@dataclass
class ViewRecord:
    index: int
    camera: Camera
    image: ImageBuffer
    gt: Dict[str, ImageBuffer] = field(default_factory=dict)

    @property
    def mask(self) -> Optional[np.ndarray]:
        buffer = self.gt.get("mask")
        return None if buffer is None else buffer.data[..., 0] > 0.5


@dataclass
class Dataset:
    root: Path
    meta: Dict[str, Any]
    views: List[ViewRecord]

    def __len__(self) -> int:
        return len(self.views)

    @property
    def preset_name(self) -> str:
        return str(self.meta.get("preset") or "")

    @property
    def bound(self) -> float:
        return float(self.meta.get("bound", 1.0))

    @property
    def light_offset(self) -> Optional[np.ndarray]:
        light = self.meta.get("light") or {}
        return None if "offset" not in light else np.asarray(light["offset"], dtype=np.float64)

    @property
    def light_intensity(self) -> Optional[float]:
        light = self.meta.get("light") or {}
        return None if "intensity" not in light else float(light["intensity"])

    def preset(self) -> ScenePreset:
        if not self.preset_name:
            raise DatasetError(f"dataset {self.root} was not generated from a preset; no analytic geometry available")
        return get_preset(self.preset_name)

    def feature_paths(self, template: str) -> Dict[int, Path]:
        return {view.index: self.root / template.format(view=view.index) for view in self.views}

    @classmethod
    def load(cls, root: Union[str, Path]) -> "Dataset":
        root = Path(root)
        scene_path = root / SCENE_FILE
        if not scene_path.exists():
            raise DatasetError(f"dataset description not found: {scene_path}")
        try:
            meta = json.loads(scene_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{scene_path} is not valid JSON: {exc}") from exc
        cameras = meta.get("cameras")
        if not isinstance(cameras, list) or not cameras:
            raise DatasetError(f"{scene_path} lists no cameras")
        views = []
        for index, payload in enumerate(cameras):
            camera = Camera.from_json(payload)
            name = f"{index:04d}.tnsr"
            image_path = root / "images" / name
            if not image_path.exists():
                raise DatasetError(f"image for view {index} missing: {image_path}")
            try:
                image = ImageBuffer.load(image_path)
            except TensorFormatError as exc:
                raise DatasetError(f"image for view {index} unreadable: {exc}") from exc
            if (image.height, image.width) != (camera.height, camera.width):
                raise DatasetError(
                    f"view {index}: image is {image.height}x{image.width}, camera expects {camera.height}x{camera.width}"
                )
            gt = {}
            for kind in GT_KINDS:
                path = root / "gt" / kind / name
                if path.exists():
                    gt[kind] = ImageBuffer.load(path)
            views.append(ViewRecord(index=index, camera=camera, image=image, gt=gt))
        return cls(root=root, meta=meta, views=views)


def generate_dataset(
    preset: Union[str, ScenePreset],
    views: int,
    resolution: int,
    spp: int,
    out_dir: Union[str, Path],
    seed: int = 0,
    feature_dim: int = FEATURE_DIM,
) -> Dataset:
    """Render ``views`` reference images of ``preset`` plus GT material maps and material-ID features."""
    preset = get_preset(preset) if isinstance(preset, str) else preset
    if views < 1:
        raise DatasetError("a dataset needs at least one view")
    if resolution < 1:
        raise DatasetError("resolution must be >= 1")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {root}: {exc}") from exc

    rng = Rng(seed)
    cameras = preset.cameras(views, resolution, rng.fork(0))
    for index, camera in enumerate(cameras):
        console_status(f"[scenegen] {preset.name}: view {index + 1}/{views}")
        layers = reference_layers(preset, camera, spp=spp, rng=rng.fork(index + 1))
        name = f"{index:04d}"
        images = layers.as_images()
        images["rgb"].save(root / "images" / f"{name}.tnsr")
        for kind in GT_KINDS:
            images[kind].save(root / "gt" / kind / f"{name}.tnsr")
        features = material_features(layers.material_id, feature_dim)
        tensor_write(root / "features" / f"{name}.tnsr", features.shape, features)
        write_png(root / "previews" / f"{name}.png", images["rgb"].data)
    console_status_done()

    meta = {
        "format": "pir-dataset",
        "generator_version": get_app_version(),
        "preset": preset.name,
        "description": preset.description,
        "views": views,
        "resolution": resolution,
        "spp": spp,
        "seed": seed,
        "bound": preset.bound,
        "feature_dim": feature_dim,
        "light": {
            "offset": list(preset.light_offset),
            "intensity": preset.light_intensity,
            "offset_magnitude": float(np.linalg.norm(preset.light_offset)),
        },
        "materials": [
            {"name": m.name, "diffuse": list(m.diffuse), "specular": list(m.specular), "roughness": m.roughness}
            for m in preset.materials
        ],
        "cameras": [camera.to_json() for camera in cameras],
    }
    (root / SCENE_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    console_info(f"[scenegen] wrote {views} views of {preset.name} to {root}")
    return Dataset.load(root)
