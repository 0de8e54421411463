"""The optimisable scene and its per-pixel forward model.

``SceneState`` owns every learnable module (geometry, density, radiance head,
materials, feature field, light, blending net) and names the parameter
blocks the trainer steps. ``render_pixels`` is the photometric forward model
used by training, rendering and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import torch
from torch import nn

from pir.core.camera import Camera
from pir.core.config import SceneConfig
from pir.core.rng import Rng
from pir.core.vec import dot, normalize
from pir.render.fields import Field, FieldSpec, ParamBlock
from pir.render.geometry import Shape, SdfScene, trace_rays
from pir.render.interreflect import BlendNet, indirect_radiance_terms, reflect_dir, sample_lobe
from pir.render.shading import BrdfSample, MaterialFields, PointLight, shade_direct_terms
from pir.render.volume import NeusDensity, RadianceHead


@dataclass(frozen=True)
class RenderOptions:
    visibility_samples: int = 128
    lobe_samples: int = 4
    epsilon: float = 1e-3
    eta: float = 1.5
    trace_steps: int = 128
    trace_tolerance: float = 1e-5
    use_visibility: bool = True
    use_interreflection: bool = True

    @classmethod
    def from_config(cls, config: SceneConfig) -> "RenderOptions":
        sampling = config.section("sampling")
        return cls(
            visibility_samples=sampling["visibility_samples"],
            lobe_samples=sampling["lobe_samples"],
            epsilon=sampling["epsilon"],
            eta=sampling["eta"],
            trace_steps=sampling["trace_steps"],
            trace_tolerance=sampling["trace_tolerance"],
            use_visibility=sampling["use_visibility"],
            use_interreflection=sampling["use_interreflection"],
        )


class FeatureField(nn.Module):
    """Distilled surface feature field; frozen once distillation finishes."""

    def __init__(self, spec: FieldSpec) -> None:
        super().__init__()
        self.field = Field(spec, name="feature")
        self.frozen = False

    @property
    def dim(self) -> int:
        return self.field.spec.out_dim

    def freeze(self) -> None:
        self.frozen = True
        self.field.params.set_trainable(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.field(x)


class SceneState(nn.Module):
    def __init__(
        self,
        scene: SdfScene,
        density: NeusDensity,
        radiance: RadianceHead,
        materials: MaterialFields,
        light: PointLight,
        blend: BlendNet,
        features: Optional[FeatureField] = None,
    ) -> None:
        super().__init__()
        self.scene = scene
        self.density = density
        self.radiance = radiance
        self.materials = materials
        self.light = light
        self.blend = blend
        self.features = features

    @property
    def geometry_learned(self) -> bool:
        return self.scene.field is not None

    def blocks(self) -> Dict[str, ParamBlock]:
        blocks = {}
        if self.scene.field is not None:
            blocks["sdf"] = ParamBlock("sdf", list(self.scene.field.parameters()))
        blocks["density"] = ParamBlock("density", list(self.density.parameters()))
        blocks["radiance"] = ParamBlock("radiance", list(self.radiance.parameters()))
        blocks["diffuse"] = ParamBlock("diffuse", list(self.materials.diffuse.parameters()))
        blocks["specular"] = ParamBlock("specular", list(self.materials.specular.parameters()))
        blocks["roughness"] = ParamBlock("roughness", list(self.materials.roughness.parameters()))
        if self.features is not None:
            blocks["feature"] = ParamBlock("feature", list(self.features.parameters()))
        blocks["light"] = ParamBlock("light", list(self.light.parameters()))
        blocks["blend"] = ParamBlock("blend", list(self.blend.parameters()))
        return blocks

    def field_specs(self) -> Dict[str, dict]:
        specs = {
            "diffuse": self.materials.diffuse.spec.to_json(),
            "specular": self.materials.specular.spec.to_json(),
            "roughness": self.materials.roughness.spec.to_json(),
            "radiance": self.radiance.field.spec.to_json(),
        }
        if self.scene.field is not None:
            specs["sdf"] = self.scene.field.spec.to_json()
        if self.features is not None:
            specs["feature"] = self.features.field.spec.to_json()
        return specs


def build_scene_state(config: SceneConfig, analytic: Optional[Shape] = None, bound: Optional[float] = None) -> SceneState:
    """Fresh modules from the config; ``analytic`` replaces the learned SDF (fixed geometry)."""
    torch.manual_seed(int(config.get("seed")) & 0xFFFFFFFF)
    fields = config.section("fields")
    bound = float(fields["bound"] if bound is None else bound)
    geo_dim = int(fields["sdf"]["feature_dim"])
    if analytic is not None:
        scene = SdfScene(analytic=analytic, feature_dim=geo_dim, bound=bound)
    else:
        sdf_spec = FieldSpec.from_config(
            fields["sdf"], out_dim=1 + geo_dim, bound=bound, geometric_init=True, init_radius=0.5
        )
        scene = SdfScene(field=Field(sdf_spec, name="sdf"), bound=bound)
    feature_dim = int(config.get("features.dim")) if config.get("features.enabled") else 0

    materials = MaterialFields(
        FieldSpec.from_config(fields["diffuse"], bound=bound),
        FieldSpec.from_config(fields["specular"], bound=bound),
        FieldSpec.from_config(fields["roughness"], bound=bound),
        feature_dim=feature_dim,
    )
    features = None
    if feature_dim:
        features = FeatureField(FieldSpec.from_config(fields["feature"], out_dim=feature_dim, bound=bound))
    radiance = RadianceHead(
        FieldSpec.from_config(fields["radiance"], bound=bound), geo_feature_dim=geo_dim, view_freqs=int(fields["radiance"]["view_freqs"])
    )
    blend_cfg = fields["blend"]
    return SceneState(
        scene=scene,
        density=NeusDensity(float(config.get("sampling.sharpness_init"))),
        radiance=radiance,
        materials=materials,
        light=PointLight(config.get("light.offset_init"), float(config.get("light.intensity_init"))),
        blend=BlendNet(
            layers=blend_cfg["layers"],
            width=blend_cfg["width"],
            freqs=blend_cfg["freqs"],
            gamma_init=float(config.get("sampling.gamma_init")),
        ),
        features=features,
    )


@dataclass
class PixelRender:
    rgb: torch.Tensor
    mask: torch.Tensor
    direct: torch.Tensor
    indirect: torch.Tensor
    visibility: torch.Tensor
    diffuse: torch.Tensor
    specular: torch.Tensor
    roughness: torch.Tensor
    points: torch.Tensor


def render_pixels(
    state: SceneState,
    camera: Camera,
    rows: torch.Tensor,
    cols: torch.Tensor,
    options: RenderOptions,
    rng: Optional[Rng] = None,
    with_indirect: bool = True,
) -> PixelRender:
    """Shade the given pixels; background pixels stay zero and ``mask`` marks surface hits.

    Inter-reflection is added only when ``rng`` is given, ``with_indirect`` is
    set and the config enables it.
    """
    origins, dirs = camera.pixel_rays(rows, cols)
    hit = trace_rays(state.scene, origins, dirs, max_steps=options.trace_steps, tolerance=options.trace_tolerance)
    mask = hit.converged
    count = rows.numel()
    dtype = origins.dtype
    out = PixelRender(
        rgb=torch.zeros(count, 3, dtype=dtype),
        mask=mask,
        direct=torch.zeros(count, 3, dtype=dtype),
        indirect=torch.zeros(count, 3, dtype=dtype),
        visibility=torch.zeros(count, dtype=dtype),
        diffuse=torch.zeros(count, 3, dtype=dtype),
        specular=torch.zeros(count, 3, dtype=dtype),
        roughness=torch.zeros(count, 1, dtype=dtype),
        points=torch.zeros(count, 3, dtype=dtype),
    )
    if not bool(mask.any()):
        return out
    idx = mask.nonzero()[:, 0]
    terms = shade_direct_terms(
        state.scene,
        state.materials,
        state.light,
        camera,
        hit.select(mask),
        density=state.density if options.use_visibility else None,
        visibility_samples=options.visibility_samples,
        epsilon=options.epsilon,
        eta=options.eta,
    )
    radiance = terms.radiance
    indirect = torch.zeros_like(radiance)
    if with_indirect and options.use_interreflection and rng is not None:
        x, n = terms.points, terms.normals
        w_o = normalize(camera.origin(dtype) - x)
        front = dot(n, w_o, keepdim=False).detach() > 1e-6
        if bool(front.any()):
            sel = front.nonzero()[:, 0]
            w_r = reflect_dir(w_o[sel].detach(), n[sel].detach())
            material = terms.material
            samples = sample_lobe(rng, w_r, n[sel], material.roughness[sel], options.lobe_samples)
            ind = indirect_radiance_terms(
                state.scene,
                state.materials,
                state.light.position(camera).to(dtype),
                state.light.intensity,
                state.blend,
                x[sel],
                n[sel],
                w_o[sel],
                samples,
                material=BrdfSample(material.diffuse[sel], material.specular[sel], material.roughness[sel]),
                epsilon=options.epsilon,
                eta=options.eta,
                max_steps=options.trace_steps,
            )
            indirect = indirect.index_put((sel,), ind.radiance)
    out.direct = out.direct.index_put((idx,), radiance)
    out.indirect = out.indirect.index_put((idx,), indirect)
    out.rgb = out.rgb.index_put((idx,), radiance + indirect)
    out.visibility = out.visibility.index_put((idx,), terms.visibility)
    out.diffuse = out.diffuse.index_put((idx,), terms.material.diffuse)
    out.specular = out.specular.index_put((idx,), terms.material.specular)
    out.roughness = out.roughness.index_put((idx,), terms.material.roughness)
    out.points = out.points.index_put((idx,), terms.points)
    return out
