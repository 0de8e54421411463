from __future__ import annotations

import json
import tempfile
import unittest
from pathlib import Path

import torch

from pir.core.errors import (
    CheckpointCorruptError,
    CheckpointSpecMismatchError,
    CheckpointVersionError,
    NonFiniteLossError,
)
from pir.core.rng import Rng
from pir.render.scene import build_scene_state
from pir.testing.scene_fixtures import tiny_config
from pir.training.checkpoint import MANIFEST_NAME, CheckpointInfo, checkpoint_load, checkpoint_save, read_manifest
from pir.training.loss_log import LossLog, read_loss_log
from pir.training.optim import OptimizerState, block_checksums

_STEPPED = ("diffuse", "specular", "light")


def _optimizer(state) -> OptimizerState:
    blocks = state.blocks()
    return OptimizerState({name: blocks[name] for name in _STEPPED}, lr=1e-2)


def _noisy_step(state, optimizer: OptimizerState, rng: Rng) -> None:
    x = rng.uniform((16, 3)) * 1.6 - 0.8
    sample = state.materials(x)
    target = rng.uniform((16, 3))
    loss = ((sample.diffuse - target) ** 2).mean() + sample.specular.mean() + state.light.offset.pow(2).sum()
    loss = loss + (state.light.offset - rng.normal((3,), std=0.1)).pow(2).sum()
    loss.backward()
    optimizer.step(_STEPPED)


class CheckpointTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_round_trip_is_bit_exact(self) -> None:
        source = build_scene_state(tiny_config())
        target = build_scene_state(tiny_config(seed=1))
        self.assertNotEqual(block_checksums(source.blocks()), block_checksums(target.blocks()))
        path = checkpoint_save(self.root / "ckpt", source, CheckpointInfo("init", 3, "abc", {"note": 1}))
        info = checkpoint_load(path, target)
        self.assertEqual(block_checksums(source.blocks()), block_checksums(target.blocks()))
        self.assertEqual((info.stage, info.iteration, info.config_digest, info.extra), ("init", 3, "abc", {"note": 1}))
        self.assertFalse((self.root / "ckpt.partial").exists())

    def test_manifest_records_block_checksums(self) -> None:
        state = build_scene_state(tiny_config())
        path = checkpoint_save(self.root / "ckpt", state, CheckpointInfo("init", 0))
        manifest = read_manifest(path)
        self.assertEqual(manifest["checksums"], block_checksums(state.blocks()))

    def test_feature_freeze_survives_a_reload(self) -> None:
        state = build_scene_state(tiny_config())
        state.features.freeze()
        path = checkpoint_save(self.root / "ckpt", state, CheckpointInfo("distill", 2))
        fresh = build_scene_state(tiny_config())
        checkpoint_load(path, fresh)
        self.assertTrue(fresh.features.frozen)
        self.assertFalse(any(p.requires_grad for p in fresh.features.parameters()))

    def test_spec_mismatch_is_rejected(self) -> None:
        path = checkpoint_save(self.root / "ckpt", build_scene_state(tiny_config()), CheckpointInfo("init", 0))
        wider = build_scene_state(tiny_config(fields={"diffuse": {"width": 24}}))
        with self.assertRaises(CheckpointSpecMismatchError) as ctx:
            checkpoint_load(path, wider)
        self.assertIn("diffuse", str(ctx.exception))

    def test_version_mismatch_is_rejected(self) -> None:
        path = checkpoint_save(self.root / "ckpt", build_scene_state(tiny_config()), CheckpointInfo("init", 0))
        manifest_path = path / MANIFEST_NAME
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        manifest["version"] = 99
        manifest_path.write_text(json.dumps(manifest), encoding="utf-8")
        with self.assertRaises(CheckpointVersionError):
            checkpoint_load(path, build_scene_state(tiny_config()))

    def test_corrupt_tensor_and_missing_manifest(self) -> None:
        path = checkpoint_save(self.root / "ckpt", build_scene_state(tiny_config()), CheckpointInfo("init", 0))
        victim = sorted((path / "state").glob("*.tnsr"))[0]
        victim.write_bytes(victim.read_bytes()[:-2])
        with self.assertRaises(CheckpointCorruptError):
            checkpoint_load(path, build_scene_state(tiny_config()))
        (path / MANIFEST_NAME).unlink()
        with self.assertRaises(CheckpointCorruptError):
            checkpoint_load(path, build_scene_state(tiny_config()))

    def test_resume_repeats_the_next_step(self) -> None:
        state = build_scene_state(tiny_config())
        optimizer = _optimizer(state)
        rng = Rng(5)
        for _ in range(2):
            _noisy_step(state, optimizer, rng)
        path = checkpoint_save(self.root / "resume", state, CheckpointInfo("pbr", 2), optimizer=optimizer, rng=rng)
        _noisy_step(state, optimizer, rng)
        expected = block_checksums(state.blocks(), _STEPPED)

        resumed = build_scene_state(tiny_config(seed=7))
        resumed_optimizer = _optimizer(resumed)
        resumed_rng = Rng(5)
        info = checkpoint_load(path, resumed, optimizer=resumed_optimizer, rng=resumed_rng)
        self.assertEqual(info.iteration, 2)
        self.assertEqual(resumed_optimizer.step_count("diffuse"), 2)
        _noisy_step(resumed, resumed_optimizer, resumed_rng)
        self.assertEqual(block_checksums(resumed.blocks(), _STEPPED), expected)

    def test_same_seed_writes_identical_files(self) -> None:
        for name in ("a", "b"):
            checkpoint_save(self.root / name, build_scene_state(tiny_config()), CheckpointInfo("init", 0))
        files = sorted(p.relative_to(self.root / "a") for p in (self.root / "a").rglob("*") if p.is_file())
        for rel in files:
            self.assertEqual((self.root / "a" / rel).read_bytes(), (self.root / "b" / rel).read_bytes(), str(rel))


class LossLogTests(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.path = Path(self._tmp.name) / "logs" / "pbr_loss.csv"

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_rows_keep_a_fixed_header(self) -> None:
        log = LossLog(self.path, terms=("rgb", "ssim"))
        log.append(0, "pbr", {"rgb": 0.5, "ssim": 0.25, "total": 0.75})
        log.append(1, "pbr", {"rgb": 0.4, "total": 0.4})
        header = self.path.read_text(encoding="utf-8").splitlines()[0]
        self.assertEqual(header, "iter,stage,rgb,ssim,total")
        rows = read_loss_log(self.path)
        self.assertEqual(rows[0]["ssim"], 0.25)
        self.assertIsNone(rows[1]["ssim"])
        self.assertEqual(rows[1]["iter"], 1)

    def test_non_finite_and_unknown_terms(self) -> None:
        log = LossLog(self.path, terms=("rgb",))
        with self.assertRaises(NonFiniteLossError):
            log.append(0, "pbr", {"rgb": float("nan")})
        log.append(0, "pbr", {"rgb": 1.0, "total": 1.0})
        with self.assertRaises(KeyError):
            log.append(1, "pbr", {"rgb": 1.0, "dino": 0.1})

    def test_resume_reads_the_existing_header(self) -> None:
        LossLog(self.path, terms=("rgb", "eikonal")).append(0, "pbr", {"rgb": 1.0, "eikonal": 2.0, "total": 3.0})
        resumed = LossLog(self.path, resume=True)
        self.assertEqual(resumed.terms, ["rgb", "eikonal"])
        resumed.append(1, "pbr", {"rgb": 0.5, "total": 0.5})
        self.assertEqual(len(read_loss_log(self.path)), 2)

    def test_drop_from_truncates_one_stage(self) -> None:
        log = LossLog(self.path, terms=("rgb",))
        for i in range(4):
            log.append(i, "pbr", {"rgb": float(i), "total": float(i)})
        log.append(2, "init", {"rgb": 9.0, "total": 9.0})
        self.assertEqual(log.drop_from(2, "pbr"), 2)
        rows = read_loss_log(self.path)
        self.assertEqual([(r["iter"], r["stage"]) for r in rows], [(0, "pbr"), (1, "pbr"), (2, "init")])
        self.assertEqual(LossLog(self.path.with_name("none.csv")).drop_from(0, "pbr"), 0)


if __name__ == "__main__":
    unittest.main()
