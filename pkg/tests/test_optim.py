"""Optimizer update rule and cosine schedule, evaluated by hand."""

import math

import numpy as np
import pytest

from deformad import numeric as nm


def make_param(value):
    return nm.Tensor(np.array(value, dtype=np.float64), requires_grad=True,
                     dtype=np.float64)


class TestAdamW:
    def test_zero_grad_zero_decay_fixed_point(self):
        p = make_param([1.0, -2.0])
        opt = nm.AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        # bias-corrected m = g, v = g*g; update = g/(|g|+eps) = ~1
        p = make_param(0.5)
        opt = nm.AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.array(1.0)
        opt.step()
        expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert p.data == pytest.approx(expected, abs=1e-12)

    def test_decoupled_weight_decay(self):
        p = make_param(2.0)
        opt = nm.AdamW([p], lr=0.1, weight_decay=0.5)
        p.grad = np.array(0.0)
        opt.step()
        # no gradient: pure decay, p -= lr * wd * p
        assert p.data == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_nonfinite_gradient_skipped_and_counted(self):
        p = make_param(1.0)
        q = make_param(3.0)
        opt = nm.AdamW([p, q], lr=0.1, weight_decay=0.0)
        p.grad = np.array(np.nan)
        q.grad = np.array(1.0)
        opt.step()
        assert p.data == 1.0
        assert q.data != 3.0
        assert opt.skipped_updates == 1

    def test_zero_grad_clears(self):
        p = make_param(1.0)
        opt = nm.AdamW([p])
        p.grad = np.array(1.0)
        opt.zero_grad()
        assert p.grad is None


class TestCosineSchedule:
    def test_start_is_base(self):
        assert nm.cosine_lr(2e-4, 0, 60) == pytest.approx(2e-4)

    def test_mid_horizon_is_half(self):
        base = 2e-4
        assert nm.cosine_lr(base, 30, 60) == pytest.approx(
            base * (1 + math.cos(math.pi / 2)) / 2)
        assert nm.cosine_lr(base, 30, 60) == pytest.approx(base / 2)

    def test_end_is_zero(self):
        assert nm.cosine_lr(1.0, 60, 60) == pytest.approx(0.0, abs=1e-15)

    def test_clamps_beyond_horizon(self):
        assert nm.cosine_lr(1.0, 99, 60) == pytest.approx(0.0, abs=1e-15)
