"""Stage orchestration: volume init, feature distillation and physically based optimisation.

Each stage reads its upstream checkpoint, runs, and writes its own checkpoint,
loss log and summary under the output directory. A stage whose fingerprint
(config keys it depends on, the dataset and the upstream fingerprint) matches
the stored summary is skipped. The manager also renders, evaluates and exports
meshes from any finished stage.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import torch

from pir.core.config import SceneConfig
from pir.core.errors import PirError, StageOrderError
from pir.core.logger import console_error, console_info, console_status, console_status_done, console_warn
from pir.core.rng import Rng
from pir.render.mesh import extract_mesh, paint_materials
from pir.render.scene import RenderOptions, SceneState, build_scene_state
from pir.scenegen.dataset import SCENE_FILE, Dataset
from pir.training.checkpoint import MANIFEST_NAME, CheckpointInfo, checkpoint_load, checkpoint_save, read_manifest
from pir.training.distill import (
    FeatureMapSet,
    distill_fit,
    ingest_features,
    inject_features,
    render_feature_map,
    save_feature_preview,
)
from pir.training.evaluate import evaluate_views, render_view
from pir.training.loss_log import LossLog
from pir.training.losses import LossWeights
from pir.training.optim import block_checksums
from pir.training.pbr import PBR_TERMS, PbrSchedule, pbr_optimizer, pbr_step
from pir.training.volinit import albedo_warmstart, init_fit

STAGES = ("init", "distill", "pbr")
RESUME_DIR = "pbr_resume"

# config keys each stage's output depends on, on top of its upstream stage
_STAGE_KEYS: Dict[str, Sequence[str]] = {
    "init": (
        "dataset", "seed", "fields", "features.enabled", "features.dim", "light", "sampling",
        "loss.init_eikonal", "schedule.init_iters", "schedule.albedo_warmstart_iters",
        "schedule.rays_per_batch", "schedule.samples_per_ray", "schedule.learning_rate",
    ),
    "distill": (
        "features", "loss.dino_distill", "schedule.distill_iters",
        "schedule.rays_per_batch", "schedule.learning_rate",
    ),
    "pbr": ("loss", "schedule"),
}


class TrainingManager:
    """Runs the stages in order against one scene config and keeps their artefacts.

    ::

        <output_dir>/checkpoints/<stage>/        checkpoint directory
        <output_dir>/checkpoints/<stage>.json    stage summary (fingerprint, result)
        <output_dir>/logs/<stage>_loss.csv
        <output_dir>/previews/, renders/, mesh.obj, eval.json
    """

    def __init__(self, config: SceneConfig, dataset: Optional[Dataset] = None) -> None:
        self.config = config
        self.output_dir = config.resolve_path("output_dir")
        self.seed = int(config.get("seed"))
        self._dataset = dataset
        threads = int(config.get("threads"))
        if threads > 0:
            torch.set_num_threads(threads)

    # paths

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            root = self.config.resolve_path("dataset.path")
            if not str(self.config.get("dataset.path")):
                raise StageOrderError("config has no dataset.path; generate a dataset with 'pir scenegen' first")
            self._dataset = Dataset.load(root)
        return self._dataset

    def checkpoint_dir(self, stage: str) -> Path:
        return self.output_dir / "checkpoints" / stage

    def summary_path(self, stage: str) -> Path:
        return self.output_dir / "checkpoints" / f"{stage}.json"

    def log_path(self, stage: str) -> Path:
        return self.output_dir / "logs" / f"{stage}_loss.csv"

    # resumability

    def _dataset_digest(self) -> str:
        scene = self.config.resolve_path("dataset.path") / SCENE_FILE
        if not scene.exists():
            return ""
        return hashlib.sha256(scene.read_bytes()).hexdigest()[:16]

    def fingerprint(self, stage: str) -> str:
        """Hash of everything the stage's checkpoint depends on, chained through the upstream stages."""
        index = STAGES.index(stage)
        payload: Dict[str, Any] = {"stage": stage, "config": {key: self.config.get(key) for key in _STAGE_KEYS[stage]}}
        if index == 0:
            payload["dataset"] = self._dataset_digest()
        else:
            payload["upstream"] = self.fingerprint(STAGES[index - 1])
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def read_summary(self, stage: str) -> Dict[str, Any]:
        path = self.summary_path(stage)
        if not path.exists():
            return {}
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            console_warn(f"[{stage}] summary {path} is unreadable; the stage will rerun")
            return {}

    def _write_summary(self, stage: str, summary: Dict[str, Any]) -> None:
        path = self.summary_path(stage)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")

    def is_current(self, stage: str) -> bool:
        summary = self.read_summary(stage)
        return (
            bool(summary.get("ok"))
            and summary.get("fingerprint") == self.fingerprint(stage)
            and (self.checkpoint_dir(stage) / MANIFEST_NAME).exists()
        )

    def _require_upstream(self, stage: str) -> None:
        index = STAGES.index(stage)
        if index == 0:
            return
        upstream = STAGES[index - 1]
        if not self.is_current(upstream):
            raise StageOrderError(f"stage '{upstream}' is missing or out of date for this config; run it before '{stage}'")

    # stages

    def build_state(self) -> SceneState:
        if self.config.get("dataset.fixed_geometry"):
            preset = self.dataset.preset()
            return build_scene_state(self.config, analytic=preset.shape, bound=preset.bound)
        return build_scene_state(self.config)

    def load_state(self, stage: Optional[str] = None) -> SceneState:
        """State from ``stage``'s checkpoint (the latest finished stage by default), features injected."""
        candidates = [stage] if stage else list(reversed(STAGES))
        for name in candidates:
            path = self.checkpoint_dir(name)
            if (path / MANIFEST_NAME).exists():
                state = self.build_state()
                checkpoint_load(path, state)
                if state.features is not None and state.features.frozen:
                    inject_features(state.materials, state.features)
                return state
        wanted = stage or "any stage"
        raise StageOrderError(f"no checkpoint for {wanted} under {self.output_dir / 'checkpoints'}; run training first")

    def run_stage(self, stage: str, force: bool = False) -> Dict[str, Any]:
        if stage not in STAGES:
            raise ValueError(f"unknown stage '{stage}' (choose from {', '.join(STAGES)})")
        fingerprint = self.fingerprint(stage)
        if not force and self.is_current(stage):
            console_info(f"[{stage}] up to date ({self.checkpoint_dir(stage)}); use --force to rerun")
            return dict(self.read_summary(stage), skipped=True)
        self._require_upstream(stage)

        runners: Dict[str, Callable[[str, bool], Dict[str, Any]]] = {
            "init": self._run_init,
            "distill": self._run_distill,
            "pbr": self._run_pbr,
        }
        started = time.time()
        try:
            result = runners[stage](fingerprint, force)
        except PirError as exc:
            console_error(f"[{stage}] aborted: {exc}; earlier checkpoints are kept")
            raise
        summary = {
            "ok": True,
            "stage": stage,
            "fingerprint": fingerprint,
            "checkpoint": str(self.checkpoint_dir(stage)),
            "loss_log": str(self.log_path(stage)),
            "result": result,
            "elapsed_seconds": round(time.time() - started, 3),
            "finished_at": time.strftime("%Y-%m-%d %H:%M:%S"),
        }
        self._write_summary(stage, summary)
        console_info(f"[{stage}] done -> {self.checkpoint_dir(stage)}")
        return summary

    def run_pipeline(self, force: bool = False, stages: Sequence[str] = STAGES) -> Dict[str, Dict[str, Any]]:
        return {stage: self.run_stage(stage, force=force) for stage in stages}

    def _stage_rng(self, stage: str) -> Rng:
        return Rng(self.seed).fork(STAGES.index(stage) + 1)

    def _run_init(self, fingerprint: str, force: bool) -> Dict[str, Any]:
        schedule = self.config.section("schedule")
        dataset = self.dataset
        state = self.build_state()
        rng = self._stage_rng("init")
        log = LossLog(self.log_path("init"), terms=("rgb", "eikonal"))
        report = init_fit(
            state,
            dataset,
            schedule["init_iters"],
            rng=rng,
            rays_per_batch=schedule["rays_per_batch"],
            samples_per_ray=schedule["samples_per_ray"],
            learning_rate=schedule["learning_rate"],
            eikonal_weight=float(self.config.get("loss.init_eikonal")),
            log=log,
        )
        warm_iters = schedule["albedo_warmstart_iters"]
        if warm_iters:
            report.warmstart_iterations = warm_iters
            report.warmstart_loss = albedo_warmstart(
                state,
                dataset,
                warm_iters,
                rng=rng,
                rays_per_batch=schedule["rays_per_batch"],
                learning_rate=schedule["learning_rate"],
                trace_steps=int(self.config.get("sampling.trace_steps")),
                log=log,
            )
        result = report.to_dict()
        checkpoint_save(
            self.checkpoint_dir("init"), state, CheckpointInfo("init", schedule["init_iters"], fingerprint), rng=rng
        )
        result["checksums"] = block_checksums(state.blocks())
        return result

    def load_feature_maps(self) -> FeatureMapSet:
        dataset = self.dataset
        camera = dataset.views[0].camera
        return ingest_features(
            dataset.feature_paths(str(self.config.get("features.template"))),
            int(self.config.get("features.dim")),
            image_size=(camera.height, camera.width),
        )

    def _run_distill(self, fingerprint: str, force: bool) -> Dict[str, Any]:
        state = self.build_state()
        checkpoint_load(self.checkpoint_dir("init"), state)
        if state.features is None:
            checkpoint_save(
                self.checkpoint_dir("distill"), state, CheckpointInfo("distill", 0, fingerprint, {"features": False})
            )
            console_info("[distill] features disabled; init checkpoint carried forward")
            return {"iterations": 0, "features": False}

        schedule = self.config.section("schedule")
        sampling = self.config.section("sampling")
        maps = self.load_feature_maps()
        rng = self._stage_rng("distill")
        result = distill_fit(
            state,
            self.dataset,
            maps,
            schedule["distill_iters"],
            weight=float(self.config.get("loss.dino_distill")),
            rng=rng,
            rays_per_batch=schedule["rays_per_batch"],
            learning_rate=schedule["learning_rate"],
            trace_steps=sampling["trace_steps"],
            trace_tolerance=sampling["trace_tolerance"],
            log=LossLog(self.log_path("distill"), terms=("dino",)),
        )
        preview = self.output_dir / "previews" / "features_0000.png"
        save_feature_preview(render_feature_map(state, self.dataset.views[0].camera, sampling["trace_steps"]), preview)
        checkpoint_save(
            self.checkpoint_dir("distill"),
            state,
            CheckpointInfo("distill", schedule["distill_iters"], fingerprint),
            rng=rng,
        )
        result["features"] = True
        result["preview"] = str(preview)
        result["feature_checksum"] = state.blocks()["feature"].checksum()
        return result

    def _run_pbr(self, fingerprint: str, force: bool) -> Dict[str, Any]:
        schedule = PbrSchedule.from_config(self.config)
        checkpoint_every = int(self.config.get("schedule.checkpoint_every"))
        state = self.build_state()
        checkpoint_load(self.checkpoint_dir("distill"), state)
        inject_features(state.materials, state.features)
        optimizer = pbr_optimizer(state, schedule.learning_rate)
        rng = self._stage_rng("pbr")

        resume_dir = self.output_dir / "checkpoints" / RESUME_DIR
        start = 0
        if not force and (resume_dir / MANIFEST_NAME).exists():
            if read_manifest(resume_dir).get("config_digest") == fingerprint:
                start = checkpoint_load(resume_dir, state, optimizer, rng).iteration
                console_info(f"[pbr] resuming at iteration {start} from {resume_dir}")
            else:
                console_warn(f"[pbr] ignoring {resume_dir}: written for a different config")
        log = LossLog(self.log_path("pbr"), terms=PBR_TERMS, resume=start > 0)
        if start > 0:
            log.drop_from(start, "pbr")

        maps = self.load_feature_maps() if state.features is not None else None
        weights = LossWeights.from_config(self.config.section("loss"))
        options = RenderOptions.from_config(self.config)
        blocks = state.blocks()
        watched = block_checksums(blocks, ["sdf", "light"])
        untouched = block_checksums(blocks, ["density", "radiance", "feature"])
        warmup_held: Optional[bool] = None
        skipped = 0
        last_total = float("nan")

        for iteration in range(start, schedule.iters):
            step = pbr_step(state, self.dataset, optimizer, iteration, schedule, options, weights, rng, features=maps)
            if step.skipped:
                skipped += 1
                console_warn(f"[pbr] iteration {iteration}: patch of view {step.view} has no surface hits, skipped")
            else:
                row = step.report.row()
                log.append(iteration, "pbr", row)
                last_total = row["total"]
            if iteration + 1 == schedule.warmup_iters and start == 0:
                warmup_held = block_checksums(blocks, ["sdf", "light"]) == watched
                if not warmup_held:
                    console_error("[pbr] geometry or light moved during warmup")
            if (iteration + 1) % schedule.log_every == 0 or iteration + 1 == schedule.iters:
                console_status(f"[pbr] {iteration + 1}/{schedule.iters} loss={last_total:.6f}")
            if checkpoint_every and (iteration + 1) % checkpoint_every == 0 and iteration + 1 < schedule.iters:
                checkpoint_save(resume_dir, state, CheckpointInfo("pbr", iteration + 1, fingerprint), optimizer, rng)
        console_status_done()

        checkpoint_save(
            self.checkpoint_dir("pbr"), state, CheckpointInfo("pbr", schedule.iters, fingerprint), optimizer, rng
        )
        if resume_dir.exists():
            shutil.rmtree(resume_dir)
        frozen_held = block_checksums(blocks, ["density", "radiance", "feature"]) == untouched
        return {
            "iterations": schedule.iters,
            "resumed_from": start,
            "skipped_patches": skipped,
            "final_loss": last_total,
            "warmup_freeze_held": warmup_held,
            "frozen_blocks_held": frozen_held,
            "light_offset": [float(v) for v in state.light.offset.detach().tolist()],
            "light_intensity": float(state.light.intensity.detach()),
            "checksums": block_checksums(blocks),
        }

    # outputs

    def render_outputs(self, views: Optional[Sequence[int]] = None, stage: Optional[str] = None) -> List[Path]:
        state = self.load_state(stage)
        options = RenderOptions.from_config(self.config)
        dataset = self.dataset
        indices = list(range(len(dataset.views))) if views is None else list(views)
        base = Rng(self.seed)
        written = []
        for index in indices:
            if index < 0 or index >= len(dataset.views):
                raise IndexError(f"view {index} out of range (dataset has {len(dataset.views)} views)")
            console_status(f"[render] view {index}")
            rendered = render_view(state, dataset.views[index].camera, options, rng=base.fork(1000 + index))
            out_dir = self.output_dir / "renders" / f"{index:04d}"
            rendered.save(out_dir)
            written.append(out_dir)
        console_status_done()
        return written

    def evaluate(self, views: Optional[Sequence[int]] = None, stage: Optional[str] = None) -> Dict[str, Any]:
        state = self.load_state(stage)
        report = evaluate_views(state, self.dataset, RenderOptions.from_config(self.config), self.seed, views=views)
        path = self.output_dir / "eval.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        return report

    def export_mesh(self, out_path: Optional[Path] = None, resolution: int = 128, stage: Optional[str] = None) -> Path:
        state = self.load_state(stage)
        mesh = paint_materials(extract_mesh(state.scene, resolution=resolution), state.materials)
        target = Path(out_path) if out_path is not None else self.output_dir / "mesh.obj"
        return mesh.export_obj(target)
