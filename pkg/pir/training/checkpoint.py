"""Checkpoint directories: one TNSR file per tensor plus ``checkpoint.json``.

Layout::

    <dir>/checkpoint.json        version, stage, iteration, specs, rng, Adam steps
    <dir>/state/<key>.tnsr       every SceneState parameter and buffer
    <dir>/adam/<block>/<i>_{m,v}.tnsr
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from pir.core.errors import (
    CheckpointCorruptError,
    CheckpointSpecMismatchError,
    CheckpointVersionError,
    TensorFormatError,
)
from pir.core.rng import Rng
from pir.core.tensor_io import tensor_read, tensor_write
from pir.render.scene import SceneState
from pir.training.optim import OptimizerState

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "checkpoint.json"


@dataclass
class CheckpointInfo:
    stage: str
    iteration: int
    config_digest: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)


def _write_array(path: Path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float32)
    tensor_write(path, array.shape or (1,), array)


def _read_array(path: Path) -> np.ndarray:
    if not path.exists():
        raise CheckpointCorruptError(f"checkpoint tensor missing: {path}")
    try:
        _, data = tensor_read(path)
    except TensorFormatError as exc:
        raise CheckpointCorruptError(f"checkpoint tensor unreadable: {path}: {exc}") from exc
    return data


def checkpoint_save(
    path: Union[str, Path],
    state: SceneState,
    info: CheckpointInfo,
    optimizer: Optional[OptimizerState] = None,
    rng: Optional[Rng] = None,
) -> Path:
    """Write ``state`` (and optional Adam moments / RNG position) to a fresh directory."""
    target = Path(path)
    staging = target.with_name(target.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    (staging / "state").mkdir(parents=True)

    keys = []
    for key, tensor in state.state_dict().items():
        if tensor.numel() == 0:
            continue
        _write_array(staging / "state" / f"{key}.tnsr", tensor.detach().cpu().numpy())
        keys.append(key)

    adam_steps: Dict[str, Dict[str, int]] = {}
    lr = None
    if optimizer is not None:
        lr = optimizer.lr
        adam_steps = optimizer.step_table()
        for name, array in optimizer.moment_arrays().items():
            out = staging / "adam" / f"{name}.tnsr"
            out.parent.mkdir(parents=True, exist_ok=True)
            _write_array(out, array)

    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": info.stage,
        "iteration": int(info.iteration),
        "config_digest": info.config_digest,
        "specs": state.field_specs(),
        "feature_frozen": bool(state.features.frozen) if state.features is not None else None,
        "tensors": keys,
        "adam": {"lr": lr, "steps": adam_steps},
        "rng": rng.get_state() if rng is not None else None,
        "checksums": {name: block.checksum() for name, block in state.blocks().items()},
        "extra": info.extra,
    }
    (staging / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")

    if target.exists():
        shutil.rmtree(target)
    staging.rename(target)
    return target


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    manifest_path = Path(path) / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointCorruptError(f"checkpoint manifest missing: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"checkpoint manifest is not valid JSON: {manifest_path}") from exc
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    return manifest


def checkpoint_load(
    path: Union[str, Path],
    state: SceneState,
    optimizer: Optional[OptimizerState] = None,
    rng: Optional[Rng] = None,
) -> CheckpointInfo:
    """Restore values written by ``checkpoint_save`` into an identically configured ``state``."""
    root = Path(path)
    manifest = read_manifest(root)
    current = state.field_specs()
    saved = manifest.get("specs", {})
    if saved != current:
        changed = sorted(k for k in set(saved) | set(current) if saved.get(k) != current.get(k))
        raise CheckpointSpecMismatchError(f"checkpoint {root} field specs differ for: {', '.join(changed)}")

    target = state.state_dict()
    with torch.no_grad():
        for key in manifest.get("tensors", []):
            if key not in target:
                raise CheckpointSpecMismatchError(f"checkpoint {root} holds unknown tensor '{key}'")
            data = _read_array(root / "state" / f"{key}.tnsr")
            if data.size != target[key].numel():
                raise CheckpointCorruptError(f"checkpoint tensor '{key}' has {data.size} values, expected {target[key].numel()}")
            target[key].copy_(torch.from_numpy(np.array(data)).reshape(target[key].shape).to(target[key].dtype))

    if state.features is not None and manifest.get("feature_frozen"):
        state.features.freeze()

    if optimizer is not None:
        steps = manifest.get("adam", {}).get("steps", {})
        arrays = {}
        for name, rows in steps.items():
            for index in rows:
                for moment in ("m", "v"):
                    key = f"{name}/{index}_{moment}"
                    arrays[key] = _read_array(root / "adam" / f"{key}.tnsr")
        optimizer.load_moments(arrays, steps)
    if rng is not None and manifest.get("rng") is not None:
        rng.set_state(manifest["rng"])
    return CheckpointInfo(
        stage=str(manifest.get("stage", "")),
        iteration=int(manifest.get("iteration", 0)),
        config_digest=str(manifest.get("config_digest", "")),
        extra=dict(manifest.get("extra") or {}),
    )
