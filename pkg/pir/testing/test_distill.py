from __future__ import annotations

import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from pir.core.errors import FeatureDimensionError, MissingFeatureViewError, StageOrderError
from pir.core.rng import Rng
from pir.core.tensor_io import tensor_write
from pir.render.scene import build_scene_state
from pir.testing.scene_fixtures import tiny_config, tiny_dataset
from pir.training.distill import (
    distill_fit,
    ingest_features,
    inject_features,
    render_feature_map,
    save_feature_preview,
)


def _write_map(path: Path, array: np.ndarray) -> Path:
    tensor_write(path, array.shape, array.astype(np.float32))
    return path


class IngestTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_maps_load_per_view(self) -> None:
        paths = {v: _write_map(self.root / f"{v}.tnsr", np.full((4, 5, 3), float(v))) for v in range(2)}
        maps = ingest_features(paths, expected_dim=3)
        self.assertEqual(len(maps), 2)
        self.assertEqual(maps.dim, 3)
        value = maps.lookup(1, torch.tensor([0, 3]), torch.tensor([4, 1]))
        self.assertTrue(torch.equal(value, torch.ones(2, 3)))
        with self.assertRaises(MissingFeatureViewError):
            maps.lookup(5, torch.tensor([0]), torch.tensor([0]))

    def test_missing_view_is_reported(self) -> None:
        paths = {0: _write_map(self.root / "0.tnsr", np.zeros((4, 4, 3))), 1: self.root / "absent.tnsr"}
        with self.assertRaises(MissingFeatureViewError):
            ingest_features(paths, expected_dim=3)

    def test_wrong_channel_count(self) -> None:
        paths = {0: _write_map(self.root / "0.tnsr", np.zeros((4, 4, 5)))}
        with self.assertRaises(FeatureDimensionError):
            ingest_features(paths, expected_dim=3)

    def test_views_must_share_a_size(self) -> None:
        paths = {
            0: _write_map(self.root / "0.tnsr", np.zeros((4, 4, 3))),
            1: _write_map(self.root / "1.tnsr", np.zeros((6, 4, 3))),
        }
        with self.assertRaises(FeatureDimensionError):
            ingest_features(paths, expected_dim=3)

    def test_integer_multiple_is_area_reduced(self) -> None:
        array = np.zeros((4, 4, 2))
        array[:2, :2, 0] = 1.0
        array[..., 1] = 0.5
        maps = ingest_features({0: _write_map(self.root / "0.tnsr", array)}, expected_dim=2, image_size=(2, 2))
        reduced = maps.maps[0]
        self.assertEqual(tuple(reduced.shape), (2, 2, 2))
        self.assertAlmostEqual(float(reduced[0, 0, 0]), 1.0, places=6)
        self.assertAlmostEqual(float(reduced[1, 1, 0]), 0.0, places=6)
        self.assertTrue(torch.allclose(reduced[..., 1], torch.full((2, 2), 0.5)))

    def test_non_multiple_size_is_rejected(self) -> None:
        paths = {0: _write_map(self.root / "0.tnsr", np.zeros((5, 5, 2)))}
        with self.assertRaises(FeatureDimensionError):
            ingest_features(paths, expected_dim=2, image_size=(2, 2))

    def test_preview_is_written(self) -> None:
        path = self.root / "previews" / "features.png"
        save_feature_preview(torch.rand(4, 4, 8), path)
        self.assertTrue(path.exists())
        with self.assertRaises(FeatureDimensionError):
            save_feature_preview(torch.rand(4, 8), path)


class DistillTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls._tmp = tempfile.TemporaryDirectory()
        cls.dataset = tiny_dataset(Path(cls._tmp.name) / "data")

    @classmethod
    def tearDownClass(cls) -> None:
        cls._tmp.cleanup()

    def _state(self, **sections):
        preset = self.dataset.preset()
        return build_scene_state(tiny_config(**sections), analytic=preset.shape, bound=self.dataset.bound)

    def _maps(self):
        return ingest_features(self.dataset.feature_paths("features/{view:04}.tnsr"), expected_dim=8)

    def test_fit_freezes_the_field(self) -> None:
        state = self._state()
        before = state.blocks()["feature"].checksum()
        report = distill_fit(state, self.dataset, self._maps(), iters=3, rng=Rng(0), rays_per_batch=32, trace_steps=48)
        self.assertEqual(report["iterations"], 3.0)
        self.assertTrue(state.features.frozen)
        self.assertFalse(any(p.requires_grad for p in state.features.parameters()))
        if report["skipped_batches"] < 3:
            self.assertNotEqual(state.blocks()["feature"].checksum(), before)
        with self.assertRaises(StageOrderError):
            distill_fit(state, self.dataset, self._maps(), iters=1)

    def test_fit_needs_a_feature_field(self) -> None:
        state = self._state(features={"enabled": False})
        self.assertIsNone(state.features)
        with self.assertRaises(FeatureDimensionError):
            distill_fit(state, self.dataset, self._maps(), iters=1)

    def test_fit_rejects_maps_of_another_width(self) -> None:
        state = self._state(features={"dim": 4})
        with self.assertRaises(FeatureDimensionError):
            distill_fit(state, self.dataset, self._maps(), iters=1)

    def test_injection_requires_a_frozen_field(self) -> None:
        state = self._state()
        with self.assertRaises(StageOrderError):
            inject_features(state.materials, state.features)
        state.features.freeze()
        inject_features(state.materials, state.features)
        self.assertIs(state.materials.feature_field, state.features)

    def test_injection_checks_the_width(self) -> None:
        state = self._state()
        with self.assertRaises(FeatureDimensionError):
            inject_features(state.materials, None)
        narrow = self._state(features={"dim": 4})
        narrow.features.freeze()
        with self.assertRaises(FeatureDimensionError):
            inject_features(state.materials, narrow.features)
        bare = self._state(features={"enabled": False})
        inject_features(bare.materials, None)

    def test_feature_map_covers_the_image(self) -> None:
        state = self._state()
        camera = self.dataset.views[0].camera
        image = render_feature_map(state, camera, trace_steps=48)
        self.assertEqual(tuple(image.shape), (camera.height, camera.width, 8))
        self.assertTrue(torch.equal(image[0, 0], torch.zeros(8)))


if __name__ == "__main__":
    unittest.main()
