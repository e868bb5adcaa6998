import numpy as np
import pytest

from resdistill.optim import AdamConfig, Parameter, adam_step, he_init, zero_grad
from resdistill.tensor import backward


class TestAdamConfig:
    def test_defaults(self):
        cfg = AdamConfig()
        assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon) == (1e-3, 0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("kw", [{"beta1": 0.0}, {"beta1": 1.0}, {"beta2": 1.5}, {"learning_rate": 0.0},
                                    {"epsilon": -1e-8}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AdamConfig(**kw)


class TestAdamStep:
    def test_zero_gradient_leaves_parameters(self):
        p = Parameter(np.array([1.0, -2.0, 3.0]))
        before = p.data.copy()
        p.grad = np.zeros(3)
        adam_step([p], AdamConfig())
        np.testing.assert_array_equal(p.data, before)

    @pytest.mark.parametrize("g", [1e-3, 0.5, -7.0, 300.0])
    def test_first_step_magnitude_is_learning_rate(self, g):
        cfg = AdamConfig(learning_rate=0.01)
        p = Parameter(np.zeros(4))
        p.grad = np.full(4, g)
        adam_step([p], cfg)
        # m_hat / sqrt(v_hat) = sign(g); epsilon shifts it by at most eps/|g|
        np.testing.assert_allclose(p.data, -np.sign(g) * cfg.learning_rate, rtol=cfg.epsilon / abs(g) + 1e-12)

    def test_two_halves_equal_one_whole(self):
        rng = np.random.default_rng(0)
        g = rng.normal(size=(3, 2))
        a, b = Parameter(np.ones((3, 2))), Parameter(np.ones((3, 2)))
        a.grad = g.copy()
        b.grad = g / 2
        b.grad = b.grad + g / 2
        adam_step([a], AdamConfig())
        adam_step([b], AdamConfig())
        np.testing.assert_array_equal(a.data, b.data)

    def test_accumulation_through_backward(self):
        p = Parameter(np.array([1.0, 2.0]))
        for _ in range(3):
            backward((p * p).sum() * (1 / 3))
        np.testing.assert_allclose(p.accumulated_grad, 2 * p.data)

    def test_step_clears_gradient(self):
        p = Parameter(np.ones(2))
        p.grad = np.ones(2)
        adam_step([p], AdamConfig())
        assert p.grad is None and p.step_count == 1

    def test_frozen_parameter_untouched(self):
        p = Parameter(np.ones(2))
        p.requires_grad = False
        p.grad = np.ones(2)
        adam_step([p], AdamConfig())
        np.testing.assert_array_equal(p.data, np.ones(2))
        assert p.step_count == 0

    def test_second_moment_non_negative(self):
        p = Parameter(np.zeros(5))
        rng = np.random.default_rng(1)
        for _ in range(10):
            p.grad = rng.normal(size=5)
            adam_step([p], AdamConfig())
            assert (p.adam_v >= 0).all()
        assert p.adam_m.shape == p.adam_v.shape == p.data.shape

    def test_zero_grad(self):
        p = Parameter(np.ones(2))
        p.grad = np.ones(2)
        zero_grad([p])
        assert p.grad is None

    def test_float32_preserved(self):
        p = Parameter(np.ones(3, dtype=np.float32))
        p.grad = np.ones(3, dtype=np.float32)
        adam_step([p], AdamConfig())
        assert p.data.dtype == np.float32


class TestHeInit:
    def test_moments(self):
        w = he_init((100_000,), fan_in=50, rng_seed=0).data
        assert abs(w.mean()) < 0.01
        assert abs(w.var() / (2 / 50) - 1) < 0.05

    def test_deterministic(self):
        a = he_init((3, 4, 3, 3), 36, rng_seed=7).data
        b = he_init((3, 4, 3, 3), 36, rng_seed=7).data
        assert a.tobytes() == b.tobytes()

    def test_fan_in_positive(self):
        with pytest.raises(ValueError):
            he_init((2,), 0)
