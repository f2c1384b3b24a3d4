import json
import unittest
import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cutseg.errors import InvalidArgumentError
from cutseg.losses import (LossReport, loss_discriminator, loss_disjoincy,
                           loss_fence, loss_reconstruction, mae_to_targets,
                           soft_overlap)

scores = st.floats(min_value=-1.0, max_value=1.0, allow_nan=False)
pixels = st.lists(st.integers(0, 255).map(lambda v: v / 255),
                  min_size=16, max_size=16)


class TestLossValues(unittest.TestCase):
    """Closed-form values of the four objectives."""

    def test_fence(self):
        self.assertEqual(loss_fence([1, 1, 1]).item(), 0.0)
        self.assertEqual(loss_fence([0]).item(), 1.0)
        self.assertAlmostEqual(loss_fence([-0.5, 0.5]).item(), 1.0,
                               delta=1e-6)
        with self.assertRaises(InvalidArgumentError):
            loss_fence([])

    def test_disjoincy(self):
        ones = np.ones((4, 4))
        self.assertAlmostEqual(loss_disjoincy(ones, ones).item(), 1.0,
                               delta=1e-6)
        left = np.zeros((4, 4))
        left[:, :2] = 1
        self.assertEqual(loss_disjoincy(left, 1 - left).item(), 0.0)
        self.assertAlmostEqual(
            loss_disjoincy([1, 1, 0, 0], [0, 1, 1, 0]).item(), 0.5,
            delta=1e-6)
        with self.assertRaises(InvalidArgumentError):
            loss_disjoincy(np.ones((2, 2)), np.ones((2, 3)))

    def test_reconstruction(self):
        x = np.random.default_rng(0).uniform(size=(3, 1, 4, 4))
        self.assertEqual(loss_reconstruction(x, x).item(), 0.0)
        self.assertAlmostEqual(
            loss_reconstruction(np.ones((1, 2, 2)),
                                np.zeros((1, 2, 2))).item(), 1.0,
            delta=1e-6)
        y = np.random.default_rng(1).uniform(size=(3, 1, 4, 4))
        total = 0.0
        for n in range(3):
            for i in range(4):
                for j in range(4):
                    total += (x[n, 0, i, j] - y[n, 0, i, j]) ** 2
        self.assertAlmostEqual(loss_reconstruction(x, y).item(),
                               total / (3 * 16), delta=1e-12)

    def test_discriminator(self):
        self.assertEqual(loss_discriminator([-1, -1], [1, 1, 1]).item(), 0.0)
        self.assertAlmostEqual(loss_discriminator([0], [0]).item(), 1.0,
                               delta=1e-6)
        self.assertAlmostEqual(loss_discriminator([0.5], [0.5]).item(), 1.0,
                               delta=1e-6)
        with self.assertRaises(InvalidArgumentError):
            loss_discriminator([], [0.5])
        with self.assertRaises(InvalidArgumentError):
            loss_discriminator([0.5], [])

    def test_mae_to_targets(self):
        self.assertAlmostEqual(
            mae_to_targets([0.5, -0.5], [1, -1]).item(), 0.5, delta=1e-12)
        with self.assertRaises(InvalidArgumentError):
            mae_to_targets([0.5], [1, 1])

    def test_soft_overlap(self):
        a = np.zeros((4, 4))
        a[:2] = 1
        self.assertEqual(soft_overlap(a, 1 - a).item(), 0.0)
        self.assertAlmostEqual(soft_overlap(a, a).item(), 0.5, delta=1e-12)


class TestLossProperties(unittest.TestCase):

    def test_constant_sum(self):
        s = np.random.default_rng(0).uniform(-1, 1, size=1000)
        for value in s:
            total = (loss_fence([value]) +
                     loss_discriminator([value], [1.0]) * 2).item()
            self.assertAlmostEqual(total, 2.0, delta=1e-12)

    @given(st.lists(scores, min_size=1, max_size=20))
    def test_fence_plus_fake_target_is_two(self, values):
        fence = torch.abs(torch.tensor(values, dtype=torch.float64) - 1)
        fake = torch.abs(torch.tensor(values, dtype=torch.float64) + 1)
        torch.testing.assert_close(fence + fake,
                                   torch.full_like(fence, 2.0))

    @given(pixels, pixels)
    @settings(max_examples=50)
    def test_disjoincy_symmetric_and_bounded(self, a, b):
        ab = loss_disjoincy(a, b).item()
        ba = loss_disjoincy(b, a).item()
        self.assertEqual(ab, ba)
        self.assertGreaterEqual(ab, 0.0)
        self.assertLessEqual(ab, 1.0)

    @given(pixels, pixels)
    @settings(max_examples=50)
    def test_reconstruction_zero_iff_equal(self, a, b):
        value = loss_reconstruction(a, b).item()
        self.assertGreaterEqual(value, 0.0)
        self.assertEqual(value == 0.0, a == b)


class TestLossGradients(unittest.TestCase):

    def random(self, *shape, low=0.05, high=0.95, seed=0):
        g = torch.Generator().manual_seed(seed)
        x = low + (high - low) * torch.rand(shape, dtype=torch.float64,
                                            generator=g)
        return x.requires_grad_()

    def test_gradients(self):
        a = self.random(2, 1, 4, 4, seed=1)
        b = self.random(2, 1, 4, 4, seed=2)
        s = self.random(5, low=-0.9, high=0.9, seed=3)
        r = self.random(3, low=-0.9, high=0.9, seed=4)
        check = torch.autograd.gradcheck
        kwargs = dict(eps=1e-4, atol=1e-6, rtol=1e-3)
        self.assertTrue(check(loss_disjoincy, (a, b), **kwargs))
        self.assertTrue(check(loss_reconstruction, (a, b), **kwargs))
        self.assertTrue(check(loss_fence, (s,), **kwargs))
        self.assertTrue(check(loss_discriminator, (s, r), **kwargs))


class TestLossReport(unittest.TestCase):

    def test_json_nulls(self):
        report = LossReport(loss_discriminator=0.25, n=4, m=4)
        record = json.loads(report.to_json())
        self.assertIsNone(record['loss_fence'])
        self.assertEqual(record['loss_discriminator'], 0.25)
        self.assertEqual(set(record), {'loss_fence', 'loss_disjoincy',
                                       'loss_reconstruction',
                                       'loss_discriminator', 'n', 'm'})

    def test_main_total(self):
        report = LossReport(loss_fence=1.0, loss_disjoincy=0.5,
                            loss_reconstruction=0.25)
        self.assertEqual(report.main_total(), 1.75)
        self.assertEqual(report.main_total((0, 2, 4)), 2.0)


if __name__ == '__main__':
    unittest.main()
