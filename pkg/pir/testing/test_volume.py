from __future__ import annotations

import unittest

import torch

from pir.core.rng import Rng
from pir.render.fields import FieldSpec
from pir.render.geometry import SdfScene, Sphere
from pir.render.volume import (
    NeusDensity,
    RadianceHead,
    alpha_from_cdf,
    composite,
    neus_alpha,
    stratified_depths,
    transmittance,
    volume_render,
)
from pir.testing.scene_fixtures import GRADCHECK_CONFIGS, TensorSphere, gradcheck64


class OpacityTests(unittest.TestCase):
    def test_alpha_is_zero_away_from_a_crossing(self) -> None:
        density = NeusDensity(50.0)
        s = torch.tensor([0.4, 0.1, 0.001])
        alpha = neus_alpha(s, s + 0.05, density)
        self.assertTrue(torch.equal(alpha, torch.zeros(3)))

    def test_alpha_of_a_sharp_crossing_is_near_one(self) -> None:
        density = NeusDensity(500.0)
        alpha = neus_alpha(torch.tensor([0.05]), torch.tensor([-0.05]), density)
        self.assertGreater(float(alpha[0]), 0.99)
        self.assertLessEqual(float(alpha[0]), 1.0)

    def test_alpha_guards_an_empty_cdf(self) -> None:
        alpha = alpha_from_cdf(torch.tensor([0.0]), torch.tensor([0.0]))
        self.assertEqual(float(alpha[0]), 0.0)

    def test_sharpness_must_be_positive(self) -> None:
        with self.assertRaises(ValueError):
            NeusDensity(0.0)
        self.assertAlmostEqual(float(NeusDensity(20.0).sharpness), 20.0, places=4)


class CompositeTests(unittest.TestCase):
    def test_transmittance_is_an_exclusive_product(self) -> None:
        trans = transmittance(torch.tensor([0.5, 0.5, 0.5]))
        self.assertTrue(torch.allclose(trans, torch.tensor([1.0, 0.5, 0.25])))

    def test_opaque_first_sample_hides_the_rest(self) -> None:
        colors = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        color, weights = composite(torch.tensor([1.0, 0.7]), colors)
        self.assertTrue(torch.equal(color, torch.tensor([1.0, 0.0, 0.0])))
        self.assertTrue(torch.equal(weights, torch.tensor([1.0, 0.0])))

    def test_weights_never_exceed_one(self) -> None:
        alphas = torch.rand(64, 10)
        _, weights = composite(alphas, torch.rand(64, 10, 3))
        self.assertTrue(bool((weights.sum(dim=-1) <= 1.0 + 1e-6).all()))


class StratifiedDepthTests(unittest.TestCase):
    def test_midpoints_without_rng(self) -> None:
        t = stratified_depths(torch.tensor([0.0]), torch.tensor([1.0]), 4)
        self.assertTrue(torch.allclose(t, torch.tensor([[0.125, 0.375, 0.625, 0.875]])))

    def test_jitter_stays_in_its_bin(self) -> None:
        t = stratified_depths(torch.zeros(50), torch.full((50,), 2.0), 8, Rng(4))
        bins = torch.floor(t / 0.25)
        self.assertTrue(torch.equal(bins, torch.arange(8, dtype=t.dtype).expand(50, 8)))


class VolumeRenderTests(unittest.TestCase):
    def setUp(self) -> None:
        torch.manual_seed(0)
        self.scene = SdfScene(analytic=Sphere((0.0, 0.0, 0.0), 0.5), bound=1.0)
        self.head = RadianceHead(FieldSpec(freqs=1, layers=1, width=8), geo_feature_dim=0, view_freqs=1)
        self.density = NeusDensity(200.0)

    def test_weights_concentrate_on_the_surface(self) -> None:
        o = torch.tensor([[0.0, 0.0, -2.0], [0.0, 0.8, -2.0], [0.0, 5.0, -2.0]])
        d = torch.tensor([[0.0, 0.0, 1.0]] * 3)
        out = volume_render(self.scene, self.head, self.density, o, d, samples=256)
        total = out.weights.sum(dim=-1)
        self.assertGreater(float(total[0]), 0.95)
        self.assertLess(float(total[1]), 1e-3)
        self.assertEqual(out.hit_box.tolist(), [True, True, False])
        self.assertTrue(torch.equal(out.color[2], torch.zeros(3)))
        self.assertAlmostEqual(float(out.depth[0]), 1.5, delta=0.02)

    def test_gradients_reach_the_head_and_the_density(self) -> None:
        o = torch.tensor([[0.1, 0.0, -2.0]])
        d = torch.tensor([[0.0, 0.0, 1.0]])
        out = volume_render(self.scene, self.head, self.density, o, d, samples=32, rng=Rng(0))
        out.color.sum().backward()
        self.assertIsNotNone(self.density.log_sharpness.grad)
        self.assertIsNotNone(self.head.field.linears[0].weight.grad)
        self.assertEqual(out.gradients.shape, (1, 32, 3))

    def test_zero_samples_is_rejected(self) -> None:
        with self.assertRaises(ValueError):
            volume_render(self.scene, self.head, self.density, torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 1.0]]), samples=0)

    def test_composite_matches_finite_differences_in_the_shape(self) -> None:
        head = self.head.double()
        density = NeusDensity(20.0)
        gen = torch.Generator().manual_seed(0)
        checked = 0
        while checked < GRADCHECK_CONFIGS:
            center = 0.1 * torch.randn(3, generator=gen, dtype=torch.float64)
            radius = 0.3 + 0.2 * torch.rand(1, generator=gen, dtype=torch.float64)
            o = torch.tensor([[0.0, 0.0, -2.0], [0.0, 0.0, -2.0]], dtype=torch.float64)
            o[:, :2] = 0.3 * torch.randn(2, 2, generator=gen, dtype=torch.float64)
            d = torch.zeros(2, 3, dtype=torch.float64)
            d[:, 2] = 1.0
            scene = SdfScene(analytic=TensorSphere(center, radius), bound=1.0)
            preview = volume_render(scene, head, density, o, d, samples=16)
            # the opacity bends where the view grazes the gradient
            if float((d[:, None, :] * preview.gradients).sum(dim=-1).abs().min()) < 1e-2:
                continue
            inputs = (center.requires_grad_(True), radius.requires_grad_(True))

            def render(center, radius):
                out = volume_render(SdfScene(analytic=TensorSphere(center, radius), bound=1.0), head, density, o, d, samples=16)
                return out.color, out.depth

            self.assertTrue(gradcheck64(render, inputs), checked)
            checked += 1


if __name__ == "__main__":
    unittest.main()
