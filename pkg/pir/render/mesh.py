"""Marching-cubes meshes of the learned SDF, with optional material maps.

The zero level set is extracted over the scene box, normals come from the SDF
gradient at each vertex, and :func:`paint_materials` samples the diffuse and
specular albedo and the roughness at the vertices. An exported OBJ carries the
diffuse albedo as sRGB vertex colours; the full linear material values sit
next to it as ``<stem>_<name>.tnsr`` files (one row per vertex).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import mcubes
import numpy as np
import torch
import trimesh

from pir.core.errors import EmptyLevelSetError
from pir.core.tensor_io import srgb_encode, tensor_read, tensor_write
from pir.render.geometry import SdfScene, sdf_gradient
from pir.render.shading import Materials

CHUNK = 64
VERTEX_BATCH = 1 << 16
MATERIAL_MAPS = ("diffuse", "specular", "rough")


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    cell_size: float
    materials: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_trimesh(self) -> trimesh.Trimesh:
        colors = None
        if "diffuse" in self.materials:
            rgb = np.round(srgb_encode(self.materials["diffuse"]) * 255.0).astype(np.uint8)
            colors = np.concatenate([rgb, np.full((len(rgb), 1), 255, dtype=np.uint8)], axis=-1)
        return trimesh.Trimesh(
            self.vertices, self.faces, vertex_normals=self.normals, vertex_colors=colors, process=False
        )

    def export_obj(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_trimesh().export(str(path), file_type="obj", include_normals=True)
        for name, values in self.materials.items():
            tensor_write(material_map_path(path, name), values.shape, values)
        return path


def material_map_path(obj_path: Union[str, Path], name: str) -> Path:
    obj_path = Path(obj_path)
    return obj_path.with_name(f"{obj_path.stem}_{name}.tnsr")


def load_material_maps(obj_path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Per-vertex material arrays written next to ``obj_path``; missing maps are left out."""
    maps = {}
    for name in MATERIAL_MAPS:
        path = material_map_path(obj_path, name)
        if path.exists():
            maps[name] = tensor_read(path)[1]
    return maps


def paint_materials(mesh: TriangleMesh, materials: Materials) -> TriangleMesh:
    """Copy of ``mesh`` with diffuse, specular and roughness sampled at every vertex."""
    vertices = torch.from_numpy(mesh.vertices.astype(np.float32))
    parts: Dict[str, List[np.ndarray]] = {name: [] for name in MATERIAL_MAPS}
    with torch.no_grad():
        for chunk in vertices.split(VERTEX_BATCH):
            sample = materials(chunk)
            parts["diffuse"].append(sample.diffuse.cpu().numpy())
            parts["specular"].append(sample.specular.cpu().numpy())
            parts["rough"].append(sample.roughness.cpu().numpy())
    painted = {name: np.concatenate(chunks, axis=0).astype(np.float32) for name, chunks in parts.items()}
    return replace(mesh, materials=painted)


def sample_sdf_volume(scene: SdfScene, resolution: int, bound: float) -> np.ndarray:
    axis = torch.linspace(-bound, bound, resolution).split(CHUNK)
    volume = np.zeros([resolution, resolution, resolution], dtype=np.float32)
    with torch.no_grad():
        for xi, xs in enumerate(axis):
            for yi, ys in enumerate(axis):
                for zi, zs in enumerate(axis):
                    xx, yy, zz = torch.meshgrid(xs, ys, zs, indexing="ij")
                    pts = torch.stack([xx, yy, zz], dim=-1).reshape(-1, 3)
                    val = scene.sdf(pts).reshape(len(xs), len(ys), len(zs)).cpu().numpy()
                    volume[xi * CHUNK: xi * CHUNK + len(xs), yi * CHUNK: yi * CHUNK + len(ys), zi * CHUNK: zi * CHUNK + len(zs)] = val
    return volume


def extract_mesh(scene: SdfScene, resolution: int = 128, bound: Optional[float] = None) -> TriangleMesh:
    """Marching cubes over ``[-bound, bound]^3`` (the scene box by default)."""
    if resolution < 8:
        raise ValueError(f"mesh resolution must be >= 8, got {resolution}")
    bound = float(scene.bound if bound is None else bound)
    volume = sample_sdf_volume(scene, resolution, bound)
    if volume.min() >= 0.0 or volume.max() <= 0.0:
        raise EmptyLevelSetError(
            f"SDF has no zero crossing in [-{bound}, {bound}]^3 at resolution {resolution} "
            f"(range {volume.min():.4g}..{volume.max():.4g})"
        )
    vertices, faces = mcubes.marching_cubes(-volume, 0.0)
    if len(faces) == 0:
        raise EmptyLevelSetError(f"marching cubes produced no triangles at resolution {resolution}")
    cell = 2.0 * bound / (resolution - 1.0)
    vertices = vertices * cell - bound
    grad = sdf_gradient(scene, torch.from_numpy(vertices.astype(np.float32)))
    normals = torch.nn.functional.normalize(grad, dim=-1).numpy()
    return TriangleMesh(vertices=vertices, faces=faces.astype(np.int64), normals=normals, cell_size=cell)
