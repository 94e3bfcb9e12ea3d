"""Learning-rate schedule and Adam."""

import numpy as np
import pytest

from vlx4d import autodiff as ad
from vlx4d.autodiff import Tape, parameter
from vlx4d.optim import AdamState, OptimError, adam_step, lr_schedule


class TestSchedule:
    def test_peak_at_warmup(self):
        assert lr_schedule(4000, 3e-4, 4000) == pytest.approx(3e-4)

    def test_linear_half(self):
        assert lr_schedule(2000, 3e-4, 4000) == pytest.approx(1.5e-4)

    def test_sqrt_decay_quarter(self):
        assert lr_schedule(16000, 3e-4, 4000) == pytest.approx(1.5e-4)

    def test_monotone_after_warmup(self):
        vals = [lr_schedule(s, 1.0, 100) for s in range(100, 1000, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_step_zero(self):
        assert lr_schedule(0, 1.0, 100) == 0.0


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = parameter(np.array([1.0, -2.0]), name="p")
        p.grad = np.zeros(2)
        before = p.data.copy()
        adam_step(AdamState(peak_lr=1e-2, warmup=1), {"p": p})
        np.testing.assert_array_equal(p.data, before)

    def test_none_gradient_skipped(self):
        p = parameter(np.array([3.0]), name="p")
        adam_step(AdamState(peak_lr=1e-2, warmup=1), {"p": p})
        np.testing.assert_array_equal(p.data, [3.0])

    def test_quadratic_descends(self):
        p = parameter(np.array([1.0]), name="p")
        state = AdamState(peak_lr=1e-1, warmup=1)
        with Tape() as tape:
            loss = ad.sum(ad.square(p))
            tape.backward(loss)
        adam_step(state, {"p": p})
        assert 0.0 < p.data[0] < 1.0

    def test_quadratic_converges(self):
        p = parameter(np.array([1.0]), name="p")
        state = AdamState(peak_lr=5e-2, warmup=10)
        for _ in range(400):
            with Tape() as tape:
                loss = ad.sum(ad.square(p))
                tape.backward(loss)
            adam_step(state, {"p": p})
        assert abs(p.data[0]) < 1e-2

    def test_nonfinite_gradient_names_parameter(self):
        p = parameter(np.array([1.0]), name="bad_param")
        p.grad = np.array([np.nan])
        with pytest.raises(OptimError, match="bad_param"):
            adam_step(AdamState(peak_lr=1e-2, warmup=1), {"bad_param": p})

    def test_grads_cleared_after_step(self):
        p = parameter(np.array([1.0]), name="p")
        p.grad = np.ones(1)
        adam_step(AdamState(peak_lr=1e-2, warmup=1), {"p": p})
        assert p.grad is None

    def test_deterministic_across_runs(self):
        def run():
            rng = np.random.default_rng(11)
            p = parameter(rng.standard_normal(8), name="w")
            state = AdamState(peak_lr=1e-2, warmup=5)
            target = rng.standard_normal(8)
            for _ in range(50):
                with Tape() as tape:
                    loss = ad.sum(ad.square(ad.sub(p, np.asarray(target))))
                    tape.backward(loss)
                adam_step(state, {"w": p})
            return p.data.copy()

        assert np.array_equal(run(), run())

    def test_matches_scalar_reference(self):
        # textbook bias-corrected update, one step, lr fixed by warmup=1
        g = 0.3
        p = parameter(np.array([2.0]), name="p")
        p.grad = np.array([g])
        adam_step(AdamState(peak_lr=1e-2, warmup=1), {"p": p})
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        want = 2.0 - 1e-2 * m_hat / (np.sqrt(v_hat) + 1e-8)
        np.testing.assert_allclose(p.data, [want], rtol=1e-12)
