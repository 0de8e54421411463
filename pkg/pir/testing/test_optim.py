from __future__ import annotations

import unittest

import torch
from torch import nn

from pir.core.errors import NonFiniteGradientError
from pir.render.fields import ParamBlock
from pir.training.optim import OptimizerState, block_checksums, set_frozen


def _blocks(seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    a = nn.Parameter(torch.randn(4, 3, generator=gen))
    b = nn.Parameter(torch.randn(5, generator=gen))
    return {"a": ParamBlock("a", [a]), "b": ParamBlock("b", [b])}


def _quadratic_step(state: OptimizerState, names=("a", "b")) -> None:
    loss = sum((p ** 2).sum() for block in state.blocks.values() for p in block.params if p.requires_grad)
    loss.backward()
    state.step(names)


class AdamTests(unittest.TestCase):
    def test_zero_gradient_leaves_values(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.1)
        before = blocks["a"].values().clone()
        for p in blocks["a"].params:
            p.grad = torch.zeros_like(p)
        state.step(["a"])
        self.assertTrue(torch.equal(blocks["a"].values(), before))

    def test_first_step_moves_by_the_learning_rate(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.01)
        before = blocks["b"].values().clone()
        _quadratic_step(state, names=("b",))
        delta = (blocks["b"].values() - before).abs()
        self.assertTrue(torch.allclose(delta, torch.full_like(delta, 0.01), rtol=1e-4))

    def test_unstepped_block_keeps_values_and_moments(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.01)
        before = blocks["a"].checksum()
        _quadratic_step(state, names=("b",))
        self.assertEqual(blocks["a"].checksum(), before)
        self.assertNotIn("a/0_m", state.moment_arrays())
        self.assertIn("b/0_m", state.moment_arrays())
        self.assertEqual(state.step_count("b"), 1)
        self.assertEqual(state.step_count("a"), 0)

    def test_step_clears_gradients(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.01)
        _quadratic_step(state)
        self.assertTrue(all(p.grad is None for block in blocks.values() for p in block.params))

    def test_non_finite_gradient_aborts_the_step(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.01)
        before = blocks["a"].checksum()
        for p in blocks["a"].params:
            grad = torch.ones_like(p)
            grad[0, 0] = float("inf")
            p.grad = grad
        with self.assertRaises(NonFiniteGradientError) as ctx:
            state.step(["a"])
        self.assertEqual(ctx.exception.block, "a")
        self.assertEqual(blocks["a"].checksum(), before)

    def test_bad_later_block_leaves_earlier_blocks_unstepped(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.01)
        before = block_checksums(blocks)
        blocks["a"].params[0].grad = torch.ones_like(blocks["a"].params[0])
        bad = torch.ones_like(blocks["b"].params[0])
        bad[2] = float("nan")
        blocks["b"].params[0].grad = bad
        with self.assertRaises(NonFiniteGradientError) as ctx:
            state.step(["a", "b"])
        self.assertEqual(ctx.exception.block, "b")
        self.assertEqual(block_checksums(blocks), before)
        self.assertEqual(state.step_table(), {"a": {}, "b": {}})
        self.assertTrue(all(p.grad is None for block in blocks.values() for p in block.params))

    def test_same_start_same_trajectory(self) -> None:
        runs = []
        for _ in range(2):
            blocks = _blocks(3)
            state = OptimizerState(blocks, lr=0.05)
            for _ in range(5):
                _quadratic_step(state)
            runs.append(block_checksums(blocks))
        self.assertEqual(runs[0], runs[1])

    def test_learning_rate_must_be_positive(self) -> None:
        with self.assertRaises(ValueError):
            OptimizerState(_blocks(), lr=0.0)


class FreezeTests(unittest.TestCase):
    def test_set_frozen_toggles_requires_grad(self) -> None:
        blocks = _blocks()
        touched = set_frozen(blocks, ["a", "missing"], True)
        self.assertEqual(touched, ("a",))
        self.assertFalse(blocks["a"].params[0].requires_grad)
        self.assertTrue(blocks["b"].params[0].requires_grad)
        set_frozen(blocks, ["a"], False)
        self.assertTrue(blocks["a"].params[0].requires_grad)

    def test_frozen_block_holds_through_steps(self) -> None:
        blocks = _blocks()
        state = OptimizerState(blocks, lr=0.05)
        set_frozen(blocks, ["a"], True)
        before = block_checksums(blocks, ["a"])
        for _ in range(3):
            _quadratic_step(state)
        self.assertEqual(block_checksums(blocks, ["a"]), before)
        self.assertNotEqual(block_checksums(blocks, ["b"])["b"], _blocks()["b"].checksum())


if __name__ == "__main__":
    unittest.main()
