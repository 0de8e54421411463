from __future__ import annotations

import json
import math
import tempfile
import unittest
from pathlib import Path
from unittest import mock

from pir.core.config import SceneConfig
from pir.core.errors import NonFiniteLossError, StageOrderError
from pir.render.mesh import load_material_maps
from pir.scenegen.presets import get_preset
from pir.testing.scene_fixtures import SLOW_TESTS, tiny_config, tiny_dataset
from pir.training import pbr as pbr_module
from pir.training.checkpoint import MANIFEST_NAME, read_manifest
from pir.training.loss_log import read_loss_log
from pir.training.train_manager import RESUME_DIR, STAGES, TrainingManager


def _desk_config(dataset: Path, output_dir: Path, pbr_iters: int, seed: int = 0) -> SceneConfig:
    """Default field sizes on fixed ground-truth geometry, with short init and distillation."""
    return SceneConfig(
        {
            "dataset": {"path": str(dataset), "fixed_geometry": True},
            "output_dir": str(output_dir),
            "seed": seed,
            "schedule": {
                "init_iters": 50,
                "distill_iters": 300,
                "pbr_iters": pbr_iters,
                "warmup_iters": 200,
                "blend_start": min(1000, pbr_iters),
            },
            "sampling": {"visibility_samples": 32},
        }
    )


class PipelineTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls._tmp.name)
        tiny_dataset(cls.root / "data")
        cls.manager = TrainingManager(tiny_config(dataset=cls.root / "data", output_dir=cls.root / "run"))
        cls.summaries = cls.manager.run_pipeline()

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def test_every_stage_leaves_a_checkpoint_and_a_log(self) -> None:
        for stage in STAGES:
            self.assertTrue(self.summaries[stage]["ok"], stage)
            self.assertTrue((self.manager.checkpoint_dir(stage) / MANIFEST_NAME).exists(), stage)
            self.assertTrue(self.manager.is_current(stage), stage)
        self.assertTrue(self.manager.log_path("init").exists())
        self.assertTrue(self.manager.log_path("distill").exists())
        self.assertTrue((self.root / "run" / "previews" / "features_0000.png").exists())
        self.assertFalse((self.root / "run" / "checkpoints" / RESUME_DIR).exists())

    def test_freeze_policies_hold(self) -> None:
        result = self.summaries["pbr"]["result"]
        self.assertEqual(result["iterations"], 4)
        self.assertTrue(result["warmup_freeze_held"])
        self.assertTrue(result["frozen_blocks_held"])
        self.assertEqual(len(result["light_offset"]), 3)
        self.assertGreater(result["light_intensity"], 0.0)
        distilled = read_manifest(self.manager.checkpoint_dir("distill"))["checksums"]
        self.assertEqual(result["checksums"]["feature"], distilled["feature"])
        self.assertEqual(result["checksums"]["radiance"], distilled["radiance"])

    def test_loss_log_rows_follow_the_iterations(self) -> None:
        rows = read_loss_log(self.manager.log_path("pbr"))
        iters = [row["iter"] for row in rows]
        self.assertEqual(iters, sorted(iters))
        self.assertTrue(set(iters) <= {0, 1, 2, 3})
        for row in rows:
            self.assertTrue(math.isfinite(row["total"]))
        init_rows = read_loss_log(self.manager.log_path("init"))
        self.assertEqual({row["stage"] for row in init_rows}, {"init", "albedo_warmstart"})

    def test_current_stage_is_skipped(self) -> None:
        summary = self.manager.run_stage("distill")
        self.assertTrue(summary["skipped"])
        self.assertEqual(summary["fingerprint"], self.summaries["distill"]["fingerprint"])

    def test_fingerprint_tracks_the_config(self) -> None:
        longer = TrainingManager(
            tiny_config(dataset=self.root / "data", output_dir=self.root / "run", schedule={"pbr_iters": 5})
        )
        self.assertEqual(longer.fingerprint("init"), self.manager.fingerprint("init"))
        self.assertNotEqual(longer.fingerprint("pbr"), self.manager.fingerprint("pbr"))
        self.assertTrue(longer.is_current("distill"))
        self.assertFalse(longer.is_current("pbr"))
        wider = TrainingManager(
            tiny_config(dataset=self.root / "data", output_dir=self.root / "run", fields={"diffuse": {"width": 24}})
        )
        self.assertNotEqual(wider.fingerprint("init"), self.manager.fingerprint("init"))
        self.assertNotEqual(wider.fingerprint("pbr"), self.manager.fingerprint("pbr"))

    def test_evaluation_report(self) -> None:
        report = self.manager.evaluate()
        self.assertEqual(len(report["views"]), 2)
        self.assertIn("psnr", report["mean"])
        self.assertIsNotNone(report["light_offset_error"])
        written = json.loads((self.root / "run" / "eval.json").read_text(encoding="utf-8"))
        self.assertEqual(written["views"][0]["view"], 0)
        for row in report["views"]:
            self.assertIn("surface_pixels", row)

    def test_render_and_mesh_outputs(self) -> None:
        written = self.manager.render_outputs(views=[1])
        self.assertEqual(written, [self.root / "run" / "renders" / "0001"])
        for name in ("rgb", "diffuse", "specular", "rough", "visibility", "indirect", "mask"):
            self.assertTrue((written[0] / f"{name}.tnsr").exists(), name)
            self.assertTrue((written[0] / f"{name}.png").exists(), name)
        with self.assertRaises(IndexError):
            self.manager.render_outputs(views=[9])
        mesh = self.manager.export_mesh(resolution=16, stage="init")
        self.assertTrue(mesh.exists())
        self.assertIn("v ", mesh.read_text(encoding="utf-8"))
        maps = load_material_maps(mesh)
        self.assertEqual(set(maps), {"diffuse", "specular", "rough"})
        self.assertEqual(maps["diffuse"].shape[0], maps["rough"].shape[0])
        self.assertTrue(bool(((maps["diffuse"] >= 0.0) & (maps["diffuse"] <= 1.0)).all()))


class StageOrderTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        tiny_dataset(self.root / "data")

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def _manager(self, name: str = "run", **sections) -> TrainingManager:
        return TrainingManager(tiny_config(dataset=self.root / "data", output_dir=self.root / name, **sections))

    def test_stages_run_in_order(self) -> None:
        manager = self._manager()
        with self.assertRaises(StageOrderError):
            manager.run_stage("distill")
        with self.assertRaises(StageOrderError):
            manager.load_state()
        with self.assertRaises(ValueError):
            manager.run_stage("polish")
        manager.run_stage("init")
        with self.assertRaises(StageOrderError):
            manager.run_stage("pbr")

    def test_missing_dataset_path(self) -> None:
        manager = TrainingManager(tiny_config(output_dir=self.root / "run"))
        with self.assertRaises(StageOrderError):
            manager.run_stage("init")

    def test_force_reruns_a_current_stage(self) -> None:
        manager = self._manager()
        first = manager.run_stage("init")
        self.assertNotIn("skipped", first)
        again = manager.run_stage("init", force=True)
        self.assertNotIn("skipped", again)
        self.assertEqual(again["result"]["checksums"], first["result"]["checksums"])

    def test_zero_optimisation_iterations_keep_the_distilled_state(self) -> None:
        manager = self._manager(schedule={"pbr_iters": 0, "warmup_iters": 0, "blend_start": 0})
        manager.run_pipeline()
        distilled = read_manifest(manager.checkpoint_dir("distill"))["checksums"]
        optimised = read_manifest(manager.checkpoint_dir("pbr"))["checksums"]
        self.assertEqual(optimised, distilled)

    def test_disabled_features_carry_the_init_checkpoint(self) -> None:
        manager = self._manager(features={"enabled": False})
        manager.run_stage("init")
        summary = manager.run_stage("distill")
        self.assertFalse(summary["result"]["features"])
        init = read_manifest(manager.checkpoint_dir("init"))["checksums"]
        self.assertEqual(read_manifest(manager.checkpoint_dir("distill"))["checksums"], init)

    def test_non_finite_loss_aborts_and_keeps_earlier_checkpoints(self) -> None:
        manager = self._manager()
        manager.run_stage("init")
        manager.run_stage("distill")
        with mock.patch("pir.training.train_manager.pbr_step", side_effect=NonFiniteLossError("rgb", float("nan"))):
            with self.assertRaises(NonFiniteLossError):
                manager.run_stage("pbr")
        self.assertFalse(manager.summary_path("pbr").exists())
        self.assertFalse((manager.checkpoint_dir("pbr") / MANIFEST_NAME).exists())
        self.assertTrue(manager.is_current("distill"))

    def test_interrupted_optimisation_resumes_exactly(self) -> None:
        sections = {"schedule": {"checkpoint_every": 2}}
        reference = self._manager("a", **sections)
        expected = reference.run_pipeline()["pbr"]["result"]["checksums"]

        manager = self._manager("b", **sections)
        manager.run_stage("init")
        manager.run_stage("distill")
        real_step = pbr_module.pbr_step

        def crash_at_three(*args, **kwargs):
            if args[3] == 3:
                raise NonFiniteLossError("rgb", float("inf"))
            return real_step(*args, **kwargs)

        with mock.patch("pir.training.train_manager.pbr_step", side_effect=crash_at_three):
            with self.assertRaises(NonFiniteLossError):
                manager.run_stage("pbr")
        resume_dir = self.root / "b" / "checkpoints" / RESUME_DIR
        self.assertEqual(read_manifest(resume_dir)["iteration"], 2)

        summary = manager.run_stage("pbr")
        self.assertEqual(summary["result"]["resumed_from"], 2)
        self.assertIsNone(summary["result"]["warmup_freeze_held"])
        self.assertEqual(summary["result"]["checksums"], expected)
        self.assertFalse(resume_dir.exists())
        reference_iters = [row["iter"] for row in read_loss_log(reference.log_path("pbr"))]
        resumed_iters = [row["iter"] for row in read_loss_log(manager.log_path("pbr"))]
        self.assertEqual(resumed_iters, reference_iters)


@unittest.skipUnless(SLOW_TESTS, "set PIR_SLOW_TESTS=1 to run the slow training scenarios")
class SlowScenarioTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_fixed_geometry_materials_improve_on_a_concave_scene(self) -> None:
        tiny_dataset(self.root / "data", preset="concave_bowl", views=4, resolution=16, spp=16)
        config = tiny_config(
            dataset=self.root / "data",
            output_dir=self.root / "run",
            schedule={"pbr_iters": 60, "warmup_iters": 10, "blend_start": 30, "patch_size": 12},
        ).with_overrides({"dataset.fixed_geometry": True})
        manager = TrainingManager(config)
        manager.run_stage("init")
        manager.run_stage("distill")
        before = manager.evaluate(stage="distill")["mean"]["psnr"]
        manager.run_stage("pbr")
        after = manager.evaluate(stage="pbr")["mean"]["psnr"]
        self.assertGreater(after, before)

    def test_light_offset_is_recovered_within_five_percent_of_the_radius(self) -> None:
        preset = get_preset("offset_light_sphere")
        tiny_dataset(self.root / "data", preset=preset.name, views=8, resolution=32, spp=16)
        config = tiny_config(
            dataset=self.root / "data",
            output_dir=self.root / "run",
            schedule={"pbr_iters": 1500, "warmup_iters": 100, "blend_start": 1500, "patch_size": 16},
        ).with_overrides({"dataset.fixed_geometry": True})
        manager = TrainingManager(config)
        manager.run_pipeline()
        report = manager.evaluate()
        self.assertLessEqual(report["light_offset_error"], 0.05 * float(preset.shape.radius))

    def test_visibility_term_is_worth_two_db_of_albedo(self) -> None:
        tiny_dataset(self.root / "data", preset="sphere_over_plane", views=8, resolution=32, spp=16)

        def albedo_psnr(name: str, use_visibility: bool) -> float:
            config = tiny_config(
                dataset=self.root / "data",
                output_dir=self.root / name,
                schedule={"pbr_iters": 800, "warmup_iters": 50, "blend_start": 800, "patch_size": 16},
                sampling={"visibility_samples": 64, "use_visibility": use_visibility},
            ).with_overrides({"dataset.fixed_geometry": True})
            manager = TrainingManager(config)
            manager.run_pipeline()
            return manager.evaluate()["mean"]["albedo_psnr"]

        full = albedo_psnr("full", True)
        without = albedo_psnr("no_visibility", False)
        self.assertGreaterEqual(full - without, 2.0)

    def test_desk_scale_materials_on_the_two_material_sphere(self) -> None:
        tiny_dataset(self.root / "data", preset="two_material_sphere", views=16, resolution=64, spp=16)
        manager = TrainingManager(_desk_config(self.root / "data", self.root / "run", pbr_iters=5000))
        manager.run_pipeline()
        mean = manager.evaluate()["mean"]
        self.assertGreaterEqual(mean["albedo_psnr"], 30.0)
        self.assertLessEqual(mean["roughness_mse"], 5e-3)

    def test_feature_injection_lowers_the_specular_error(self) -> None:
        tiny_dataset(self.root / "data", preset="two_material_sphere", views=8, resolution=32, spp=16)
        errors = {True: [], False: []}
        for seed in range(3):
            for enabled in (True, False):
                config = _desk_config(
                    self.root / "data", self.root / f"seed{seed}_{enabled}", pbr_iters=1500, seed=seed
                ).with_overrides({"features.enabled": enabled})
                manager = TrainingManager(config)
                manager.run_pipeline()
                errors[enabled].append(manager.evaluate()["mean"]["specular_mse"])
        self.assertLess(sum(errors[True]) / 3.0, sum(errors[False]) / 3.0)


if __name__ == "__main__":
    unittest.main()
