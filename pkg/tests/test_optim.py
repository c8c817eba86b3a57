import math
import unittest

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from pyeegmae.entity import ContractError
from pyeegmae.optim import AdamW, CosineWarmupSchedule, clip_grad_norm
from pyeegmae.tensor import parameter

class TestCosineWarmupSchedule(unittest.TestCase):
    def test_landmarks(self):
        schedule = CosineWarmupSchedule(1e-3, 1e-6, 10, 110)
        self.assertEqual(schedule(0), 0.0)
        self.assertAlmostEqual(schedule(5), 5e-4)
        self.assertAlmostEqual(schedule(10), 1e-3)
        self.assertAlmostEqual(schedule(60), 1e-6 + 0.5 * (1e-3 - 1e-6))
        self.assertAlmostEqual(schedule(110), 1e-6)
        self.assertAlmostEqual(schedule(500), 1e-6)

    def test_no_warmup(self):
        self.assertAlmostEqual(CosineWarmupSchedule(1.0, 0.0, 0, 4)(0), 1.0)

    def test_bad_bounds(self):
        with self.assertRaises(ContractError):
            CosineWarmupSchedule(1.0, 0.0, 5, 5)

    @given(st.integers(1, 50), st.integers(1, 200))
    def test_monotone_after_warmup(self, warmup, length):
        schedule = CosineWarmupSchedule(1.0, 0.01, warmup, warmup + length)
        rates = [schedule(step) for step in range(warmup + length + 1)]
        self.assertTrue(all(a <= b for a, b in zip(rates[:warmup], rates[1:warmup + 1])))
        self.assertTrue(all(a >= b - 1e-15 for a, b in zip(rates[warmup:], rates[warmup + 1:])))

class TestClipGradNorm(unittest.TestCase):
    def test_clips_to_global_norm(self):
        a, b = parameter(np.zeros(2)), parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
        self.assertAlmostEqual(clip_grad_norm([a, b], 1.0), 5.0)
        self.assertAlmostEqual(math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum())), 1.0, places=5)

    def test_small_norm_untouched(self):
        a = parameter(np.zeros(2))
        a.grad = np.array([0.3, 0.4])
        self.assertAlmostEqual(clip_grad_norm([a], 1.0), 0.5)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])

class TestAdamW(unittest.TestCase):
    def test_first_step_moves_by_lr(self):
        weight = parameter(np.ones((2, 2)))
        weight.grad = np.full((2, 2), 0.5)
        AdamW([('w', weight)], weight_decay=0.0).step(0.1)
        np.testing.assert_allclose(weight.data, np.full((2, 2), 0.9), rtol=1e-6)

    def test_decay_only_for_matrices(self):
        weight, bias = parameter(np.ones((2, 2))), parameter(np.ones(2))
        weight.grad, bias.grad = np.zeros((2, 2)), np.zeros(2)
        AdamW([('w', weight), ('b', bias)], weight_decay=0.5).step(0.1)
        np.testing.assert_allclose(weight.data, np.full((2, 2), 0.95))
        np.testing.assert_array_equal(bias.data, np.ones(2))

    def test_lr_scales_and_missing_grads(self):
        a, b, c = parameter(np.zeros(1)), parameter(np.zeros(1)), parameter(np.zeros(1))
        a.grad, b.grad = np.ones(1), np.ones(1)
        AdamW([('a', a), ('b', b), ('c', c)], lr_scales={'b': 0.5}).step(0.2)
        np.testing.assert_allclose(a.data, [-0.2], rtol=1e-6)
        np.testing.assert_allclose(b.data, [-0.1], rtol=1e-6)
        np.testing.assert_array_equal(c.data, [0.0])

    def test_moments_round_trip(self):
        weight = parameter(np.ones(3))
        optimizer = AdamW([('w', weight)])
        weight.grad = np.array([1.0, 2.0, 3.0])
        optimizer.step(0.01)
        first = {name: m.copy() for name, (m, _) in optimizer.moments().items()}
        second = {name: v.copy() for name, (_, v) in optimizer.moments().items()}
        clone = AdamW([('w', parameter(np.ones(3)))])
        clone.load_moments(first, second, optimizer.step_count)
        self.assertEqual(clone.step_count, 1)
        np.testing.assert_array_equal(clone.moments()['w'][0], optimizer.moments()['w'][0])
        optimizer.zero_grad()
        self.assertIsNone(weight.grad)
