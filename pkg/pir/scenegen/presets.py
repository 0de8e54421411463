"""Synthetic scene presets: exact CSG geometry, piecewise-constant materials, a flashlight rig.

Material regions are labelled by integer ids; ``material_at`` and
``material_id`` are closed-form, so ground-truth maps never depend on a
learned quantity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from pir.core.camera import Camera
from pir.core.rng import Rng
from pir.render.geometry import Bowl, Plane, Shape, Sphere, Union
from pir.render.shading import BrdfSample


@dataclass(frozen=True)
class Material:
    name: str
    diffuse: Tuple[float, float, float]
    specular: Tuple[float, float, float]
    roughness: float


RegionFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class ScenePreset:
    name: str
    shape: Shape
    materials: List[Material]
    region: RegionFn
    light_offset: Tuple[float, float, float]
    light_intensity: float
    camera_distance: float
    fov_degrees: float = 40.0
    views: int = 16
    resolution: int = 64
    bound: float = 1.0
    target: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    min_elevation: float = -60.0
    max_elevation: float = 75.0
    azimuth_range: Optional[Tuple[float, float]] = None
    description: str = ""

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.shape(x)

    def material_id(self, x: torch.Tensor) -> torch.Tensor:
        return self.region(x).to(torch.long)

    def material_at(self, x: torch.Tensor) -> BrdfSample:
        ids = self.material_id(x)
        table_d = torch.tensor([m.diffuse for m in self.materials], dtype=x.dtype)
        table_s = torch.tensor([m.specular for m in self.materials], dtype=x.dtype)
        table_r = torch.tensor([[m.roughness] for m in self.materials], dtype=x.dtype)
        return BrdfSample(diffuse=table_d[ids], specular=table_s[ids], roughness=table_r[ids])

    def light_position(self, camera: Camera, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return camera.light_position(torch.tensor(self.light_offset, dtype=dtype))

    def cameras(self, views: int, resolution: int, rng: Rng) -> List[Camera]:
        """``views`` look-at cameras on a Fibonacci spiral between the elevation limits, randomly rotated.

        With ``azimuth_range`` set, the spiral azimuths are folded into that range.
        """
        if views < 1:
            raise ValueError("a dataset needs at least one view")
        spin = float(rng.uniform((1,), dtype=torch.float64)[0]) * 2.0 * math.pi
        lo, hi = math.radians(self.min_elevation), math.radians(self.max_elevation)
        z_lo, z_hi = math.sin(lo), math.sin(hi)
        golden = math.pi * (3.0 - math.sqrt(5.0))
        cameras = []
        for index in range(views):
            z = z_hi - (index + 0.5) / views * (z_hi - z_lo)
            radius = math.sqrt(max(0.0, 1.0 - z * z))
            if self.azimuth_range is None:
                phi = spin + golden * index
            else:
                az_lo, az_hi = (math.radians(a) for a in self.azimuth_range)
                phi = az_lo + ((index * golden / (2.0 * math.pi) + spin / (2.0 * math.pi)) % 1.0) * (az_hi - az_lo)
            direction = np.array([radius * math.cos(phi), radius * math.sin(phi), z])
            eye = np.asarray(self.target) + self.camera_distance * direction
            cameras.append(Camera.look_at(eye, self.target, resolution, resolution, fov_degrees=self.fov_degrees))
        return cameras


# material tables

_WARM = Material("warm_plastic", (0.75, 0.35, 0.2), (0.6, 0.6, 0.6), 0.2)
_COOL = Material("cool_plastic", (0.2, 0.45, 0.75), (0.25, 0.25, 0.25), 0.4)
_GREY = Material("grey_glaze", (0.6, 0.6, 0.6), (0.5, 0.5, 0.5), 0.15)
_GLOSS = Material("gloss_panel", (0.3, 0.3, 0.3), (0.8, 0.8, 0.8), 0.3)
_FLOOR = Material("matte_floor", (0.55, 0.55, 0.5), (0.1, 0.1, 0.1), 0.45)


def _split_at_height(center_z: float) -> RegionFn:
    def region(x: torch.Tensor) -> torch.Tensor:
        return (x[..., 2] < center_z).to(torch.long)

    return region


def _single(x: torch.Tensor) -> torch.Tensor:
    return torch.zeros(x.shape[:-1], dtype=torch.long)


def _two_material_sphere() -> ScenePreset:
    return ScenePreset(
        name="two_material_sphere",
        shape=Sphere((0.0, 0.0, 0.0), 0.5),
        materials=[_WARM, _COOL],
        region=_split_at_height(0.0),
        light_offset=(0.02, -0.02, 0.0),
        light_intensity=1.5,
        camera_distance=2.0,
        description="sphere split into two plastics at the equator",
    )


def _concave_bowl() -> ScenePreset:
    return ScenePreset(
        name="concave_bowl",
        shape=Bowl((0.0, 0.0, 0.0), radius=0.6, thickness=0.04),
        materials=[_GREY],
        region=_single,
        light_offset=(0.03, 0.0, 0.0),
        light_intensity=2.0,
        camera_distance=2.2,
        min_elevation=25.0,
        max_elevation=80.0,
        description="glazed hemispherical bowl with strong inter-reflection",
    )


def _plane_pair() -> ScenePreset:
    def region(x: torch.Tensor) -> torch.Tensor:
        # floor is material 0, wall material 1
        return (x[..., 0] < x[..., 2]).to(torch.long)

    return ScenePreset(
        name="plane_pair",
        shape=Union(Plane((0.0, 0.0, 1.0), -0.3), Plane((1.0, 0.0, 0.0), -0.3)),
        materials=[_GLOSS, _GLOSS],
        region=region,
        light_offset=(0.1, -0.1, 0.0),
        light_intensity=3.0,
        camera_distance=2.0,
        target=(0.0, 0.0, 0.0),
        min_elevation=20.0,
        max_elevation=60.0,
        description="floor and wall meeting at a right angle",
        azimuth_range=(-60.0, 60.0),
    )


def _offset_light_sphere() -> ScenePreset:
    return ScenePreset(
        name="offset_light_sphere",
        shape=Sphere((0.0, 0.0, 0.0), 0.1),
        materials=[_WARM, _COOL],
        region=_split_at_height(0.0),
        light_offset=(0.015, 0.0, 0.0),
        light_intensity=0.2,
        camera_distance=0.35,
        bound=0.5,
        description="small sphere seen from 0.25 with the flashlight 0.015 off axis",
    )


def _sphere_over_plane() -> ScenePreset:
    return ScenePreset(
        name="sphere_over_plane",
        shape=Union(Sphere((0.0, 0.0, 0.1), 0.25), Plane((0.0, 0.0, 1.0), -0.4)),
        materials=[_WARM, _FLOOR],
        region=lambda x: (x[..., 2] < -0.39).to(torch.long),
        light_offset=(0.4, -0.3, 0.0),
        light_intensity=4.0,
        camera_distance=2.2,
        min_elevation=35.0,
        max_elevation=70.0,
        description="sphere floating over a floor that catches its shadow",
    )


PRESETS: Dict[str, Callable[[], ScenePreset]] = {
    "two_material_sphere": _two_material_sphere,
    "concave_bowl": _concave_bowl,
    "plane_pair": _plane_pair,
    "offset_light_sphere": _offset_light_sphere,
    "sphere_over_plane": _sphere_over_plane,
}


def preset_names() -> Sequence[str]:
    return tuple(PRESETS)


def get_preset(name: str) -> ScenePreset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown scene preset '{name}' (choose from {', '.join(PRESETS)})") from None
    return factory()
