#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""pir/core/config.py - scene configuration manager.

A scene config is a JSON document merged over ``_DEFAULT_CONFIG``. Values are
read with dotted keys (``config.get("schedule.pbr_iters")``). Unknown keys
and type mismatches are rejected before any stage runs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pir.app_identity import resource_path
from pir.core.errors import SceneConfigError

SCHEMA_PATH = resource_path("scene_config.schema.json")

_FIELD_DEFAULTS = {
    "backend": "mlp",
    "freqs": 6,
    "layers": 3,
    "width": 64,
    "resolution": 32,
}

_DEFAULT_CONFIG: Dict[str, Any] = {
    "dataset": {
        "path": "",
        "fixed_geometry": False,
    },
    "output_dir": "runs/default",
    "seed": 0,
    "threads": 0,
    "fields": {
        "bound": 1.0,
        "sdf": dict(_FIELD_DEFAULTS, layers=4, feature_dim=16),
        "diffuse": dict(_FIELD_DEFAULTS, freqs=10, layers=4),
        "specular": dict(_FIELD_DEFAULTS),
        "roughness": dict(_FIELD_DEFAULTS),
        "feature": dict(_FIELD_DEFAULTS),
        "radiance": dict(_FIELD_DEFAULTS, freqs=4, view_freqs=4),
        "blend": {"layers": 4, "width": 32, "freqs": 6},
    },
    "light": {
        "offset_init": [0.0, 0.0, 0.0],
        "intensity_init": 1.0,
    },
    "loss": {
        "eikonal": 1e-4,
        "roughness_range": 0.1,
        "smoothness": 1e-5,
        "dino": 1e-5,
        "dino_distill": 1.0,
        "init_eikonal": 0.1,
        "pyramid_levels": 4,
        "smoothness_scale": 1.0,
    },
    "schedule": {
        "init_iters": 2000,
        "distill_iters": 1000,
        "pbr_iters": 5000,
        "warmup_iters": 200,
        "blend_start": 1000,
        "albedo_warmstart_iters": 200,
        "patch_size": 32,
        "rays_per_batch": 512,
        "samples_per_ray": 64,
        "learning_rate": 1e-3,  # desk scale; full-scale runs use 1e-4
        "optimize_geometry": True,
        "optimize_light": True,
        "log_every": 50,
        "checkpoint_every": 0,
    },
    "sampling": {
        "visibility_samples": 128,
        "lobe_samples": 4,
        "spp": 64,
        "epsilon": 1e-3,
        "trace_steps": 128,
        "trace_tolerance": 1e-5,
        "gamma_init": 0.05,
        "eta": 1.5,
        "sharpness_init": 20.0,
        "use_visibility": True,
        "use_interreflection": True,
    },
    "features": {
        "enabled": True,
        "dim": 8,
        "template": "features/{view:04}.tnsr",
    },
}


def default_config() -> Dict[str, Any]:
    return copy.deepcopy(_DEFAULT_CONFIG)


def _type_name(value: Any) -> str:
    return type(value).__name__


def _check_value(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise SceneConfigError(f"config key '{key}' expects a boolean, got {_type_name(value)}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise SceneConfigError(f"config key '{key}' expects an integer, got {_type_name(value)}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SceneConfigError(f"config key '{key}' expects a number, got {_type_name(value)}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise SceneConfigError(f"config key '{key}' expects a string, got {_type_name(value)}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or len(value) != len(default):
            raise SceneConfigError(f"config key '{key}' expects a list of {len(default)} numbers")
        return [_check_value(f"{key}[{i}]", d, v) for i, (d, v) in enumerate(zip(default, value))]
    return value


def _merge(defaults: Dict[str, Any], overrides: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise SceneConfigError(f"unknown config key '{dotted}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, Mapping):
                raise SceneConfigError(f"config key '{dotted}' expects an object")
            merged[key] = _merge(defaults[key], value, prefix=f"{dotted}.")
        else:
            merged[key] = _check_value(dotted, defaults[key], value)
    return merged


def _validate_semantics(values: Dict[str, Any]) -> None:
    schedule = values["schedule"]
    if schedule["warmup_iters"] > schedule["pbr_iters"]:
        raise SceneConfigError("schedule.warmup_iters must not exceed schedule.pbr_iters")
    if schedule["blend_start"] > schedule["pbr_iters"]:
        raise SceneConfigError("schedule.blend_start must not exceed schedule.pbr_iters")
    for name in (
        "init_iters", "distill_iters", "pbr_iters", "warmup_iters", "blend_start", "albedo_warmstart_iters", "checkpoint_every"
    ):
        if schedule[name] < 0:
            raise SceneConfigError(f"schedule.{name} must be >= 0")
    for name in ("patch_size", "rays_per_batch", "samples_per_ray", "log_every"):
        if schedule[name] < 1:
            raise SceneConfigError(f"schedule.{name} must be >= 1")
    for name, weight in values["loss"].items():
        if name != "pyramid_levels" and weight < 0:
            raise SceneConfigError(f"loss.{name} must be nonnegative")
    if values["loss"]["pyramid_levels"] < 1:
        raise SceneConfigError("loss.pyramid_levels must be >= 1")
    sampling = values["sampling"]
    for name in ("visibility_samples", "lobe_samples", "spp", "trace_steps"):
        if sampling[name] < 1:
            raise SceneConfigError(f"sampling.{name} must be >= 1")
    if values["light"]["intensity_init"] <= 0:
        raise SceneConfigError("light.intensity_init must be positive")
    fields = values["fields"]
    for name in ("sdf", "diffuse", "specular", "roughness", "feature", "radiance"):
        spec = fields[name]
        if spec["backend"] not in ("mlp", "grid"):
            raise SceneConfigError(f"fields.{name}.backend must be 'mlp' or 'grid'")
        if spec["resolution"] < 2 or spec["width"] < 1 or spec["layers"] < 1 or spec["freqs"] < 0:
            raise SceneConfigError(f"fields.{name} has an invalid shape")
    if values["features"]["dim"] < 0:
        raise SceneConfigError("features.dim must be >= 0")


class SceneConfig:
    """Validated scene configuration with dotted-key access."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, source: str = "") -> None:
        self._values = _merge(_DEFAULT_CONFIG, values or {})
        _validate_semantics(self._values)
        self.source = source

    def get(self, key: str, default: Any = None) -> Any:
        node: Any = self._values
        for part in key.split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return copy.deepcopy(node)

    def section(self, name: str) -> Dict[str, Any]:
        value = self.get(name)
        if not isinstance(value, dict):
            raise SceneConfigError(f"config has no section '{name}'")
        return value

    def with_overrides(self, overrides: Mapping[str, Any]) -> "SceneConfig":
        """New config with dotted-key overrides applied (``{"seed": 3}``)."""
        nested: Dict[str, Any] = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = nested
            parts = dotted.split(".")
            for part in parts[:-1]:
                node = node.setdefault(part, {})
            node[parts[-1]] = value
        return SceneConfig(nested, source=self.source)

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._values)

    def digest(self, *sections: str) -> str:
        """Stable hash of the given sections (all when empty), used for stage resumability."""
        payload = self._values if not sections else {name: self._values[name] for name in sections}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def resolve_path(self, key: str) -> Path:
        raw = Path(str(self.get(key, "") or ""))
        if raw.is_absolute() or not self.source:
            return raw
        return Path(self.source).resolve().parent / raw

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self._values, ensure_ascii=False, indent=2), encoding="utf-8")


def load_scene_config(path: Union[str, Path]) -> SceneConfig:
    config_path = Path(path)
    if not config_path.exists():
        raise SceneConfigError(f"scene config not found: {config_path}")
    try:
        payload = json.loads(config_path.read_text(encoding="utf-8-sig"))
    except json.JSONDecodeError as exc:
        raise SceneConfigError(f"scene config {config_path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise SceneConfigError(f"scene config {config_path} must be a JSON object")
    return SceneConfig(payload, source=str(config_path))
