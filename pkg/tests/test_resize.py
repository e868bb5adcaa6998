import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resdistill.resize import (ResizeMode, adaptive_max_pool, bicubic_resize, cubic_kernel, lanczos_kernel,
                               lanczos_resize, resize_teacher_maps)
from resdistill.tensor import Tensor

from oracles import lanczos_direct


class TestKernels:
    def test_lanczos_interpolates(self):
        np.testing.assert_allclose(lanczos_kernel(np.arange(-3, 4)), [0, 0, 0, 1, 0, 0, 0], atol=1e-15)

    def test_cubic_interpolates(self):
        np.testing.assert_allclose(cubic_kernel(np.arange(-2, 3)), [0, 0, 1, 0, 0], atol=1e-15)

    def test_cubic_partition_of_unity(self):
        x = np.linspace(0, 1, 17)
        total = sum(cubic_kernel(x + k) for k in range(-2, 3))
        np.testing.assert_allclose(total, 1.0, atol=1e-12)


class TestLanczos:
    @pytest.mark.parametrize("out", [(32, 32), (7, 13), (64, 64), (100, 90)])
    def test_constant_preserved(self, out):
        img = np.full((3, 64, 64), 0.37)
        np.testing.assert_allclose(lanczos_resize(img, *out), 0.37, rtol=0, atol=1e-6)

    @pytest.mark.parametrize("size,out", [((24, 24), (8, 8)), ((20, 30), (7, 11)), ((16, 16), (16, 16)),
                                          ((10, 12), (15, 17))])
    def test_matches_direct_oracle(self, size, out):
        img = np.random.default_rng(sum(size)).uniform(size=(2,) + size)
        np.testing.assert_allclose(lanczos_resize(img, *out), lanczos_direct(img, *out), rtol=0, atol=1e-6)

    def test_same_size_identity(self):
        img = np.random.default_rng(0).uniform(size=(3, 17, 9))
        np.testing.assert_allclose(lanczos_resize(img, 17, 9), img, rtol=0, atol=1e-6)

    def test_output_clipped(self):
        img = np.zeros((1, 16, 16))
        img[:, :, 8:] = 1.0
        out = lanczos_resize(img, 16, 5)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_translation_equivariance(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(size=(1, 48, 48))
        shifted = np.roll(img, 4, axis=-1)
        a = lanczos_resize(img, 24, 24, value_range=None)
        b = lanczos_resize(shifted, 24, 24, value_range=None)
        np.testing.assert_allclose(b[..., 8:18, 10:18], a[..., 8:18, 8:16], atol=1e-5)

    def test_invalid_size(self):
        with pytest.raises(ValueError):
            lanczos_resize(np.zeros((1, 4, 4)), 0, 2)


class TestBicubic:
    @pytest.mark.parametrize("out", [(4, 4), (3, 7), (16, 16)])
    def test_constant_preserved(self, out):
        np.testing.assert_allclose(bicubic_resize(np.full((5, 8, 8), -2.5), *out), -2.5, atol=1e-6)

    def test_linear_ramp_reproduced(self):
        h, w = 32, 32
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        ramp = (0.3 * xx - 0.7 * yy + 2.0)[None]
        out = bicubic_resize(ramp, h // 2, w // 2)
        # output pixel i samples source coordinate 2i + 0.5
        oy, ox = np.mgrid[0:h // 2, 0:w // 2].astype(np.float64)
        expect = 0.3 * (2 * ox + 0.5) - 0.7 * (2 * oy + 0.5) + 2.0
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], expect[1:-1, 1:-1], atol=1e-5)

    @staticmethod
    def _half_offset_weights():
        # a 2x downsample samples source coordinate 2i + 0.5: taps at -1.5, -0.5, 0.5, 1.5
        return cubic_kernel(np.array([-1.5, -0.5, 0.5, 1.5]))

    def test_overshoot_within_quarter_range_on_random_maps(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            src = rng.uniform(-1, 1, size=(1, 20, 20))
            out = bicubic_resize(src, 10, 10)[0]
            for i in range(1, 9):
                for j in range(1, 9):
                    nb = src[0, 2 * i - 1:2 * i + 3, 2 * j - 1:2 * j + 3]
                    lo, hi = nb.min(), nb.max()
                    assert lo - 0.25 * (hi - lo) - 1e-12 <= out[i, j] <= hi + 0.25 * (hi - lo) + 1e-12

    def test_worst_case_overshoot_is_negative_mass(self):
        w1 = self._half_offset_weights()
        w2 = np.outer(w1, w1)
        bound = -w2[w2 < 0].sum()
        assert bound == pytest.approx(0.28125)
        # put the low value under every negative weight: the output exceeds the max by `bound`
        src = np.ones((1, 12, 12))
        src[0, 3:7, 3:7] = np.where(w2 < 0, 0.0, 1.0)  # output (2, 2) reads source rows/cols 3..6
        out = bicubic_resize(src, 6, 6)[0]
        assert out[2, 2] == pytest.approx(1.0 + bound, abs=1e-12)

    def test_translation_equivariance(self):
        img = np.random.default_rng(3).normal(size=(2, 32, 32))
        a = bicubic_resize(img, 16, 16)
        b = bicubic_resize(np.roll(img, 2, axis=-2), 16, 16)
        np.testing.assert_allclose(b[:, 5:12, 3:13], a[:, 4:11, 3:13], atol=1e-5)

    def test_accepts_tensor(self):
        out = bicubic_resize(Tensor(np.ones((1, 4, 4), dtype=np.float32)), 2, 2)
        assert out.dtype == np.float32


class TestAdaptiveMaxPool:
    def test_quadrants(self):
        m = np.arange(1, 17, dtype=np.float64).reshape(1, 4, 4)
        np.testing.assert_array_equal(adaptive_max_pool(m, 2, 2), [[[6, 8], [14, 16]]])

    def test_same_size_identity(self):
        m = np.random.default_rng(0).normal(size=(3, 5, 7))
        np.testing.assert_array_equal(adaptive_max_pool(m, 5, 7), m)

    def test_non_integer_partition_constant(self):
        np.testing.assert_array_equal(adaptive_max_pool(np.full((2, 5, 5), 4.0), 2, 2), np.full((2, 2, 2), 4.0))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.data())
    def test_selection_property(self, h, w, data):
        oh = data.draw(st.integers(1, h))
        ow = data.draw(st.integers(1, w))
        m = np.random.default_rng(h * 100 + w).normal(size=(2, h, w))
        out = adaptive_max_pool(m, oh, ow)
        assert out.shape == (2, oh, ow)
        for c in range(2):
            assert set(out[c].ravel()) <= set(m[c].ravel())

    def test_cannot_grow(self):
        with pytest.raises(ValueError):
            adaptive_max_pool(np.zeros((1, 2, 2)), 3, 3)


class TestResizeTeacherMaps:
    def test_constant_both_equal(self):
        pair = resize_teacher_maps(np.full((2, 4, 8, 8), 1.5), (2, 4, 2, 2), ResizeMode.MP_AND_INT)
        assert len(pair.resized_teacher_maps) == 2
        a, b = (m.data for m in pair.resized_teacher_maps)
        np.testing.assert_allclose(a, 1.5, atol=1e-6)
        np.testing.assert_allclose(b, a, atol=1e-6)

    def test_mp_delegates(self):
        t = np.random.default_rng(0).normal(size=(1, 3, 6, 6))
        pair = resize_teacher_maps(t, (1, 3, 2, 2), "MP")
        assert len(pair.resized_teacher_maps) == 1
        np.testing.assert_array_equal(pair.resized_teacher_maps[0].data, adaptive_max_pool(t, 2, 2))

    def test_size_ratio_squared(self):
        t = np.zeros((1, 5, 16, 16))
        pair = resize_teacher_maps(t, (1, 5, 2, 2), ResizeMode.MP_AND_INT)
        for m in pair.resized_teacher_maps:
            assert m.shape == (1, 5, 2, 2)
            assert t.size / m.data.size == 64

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.data())
    def test_shapes_exact(self, th, tw, data):
        sh = data.draw(st.integers(1, th))
        sw = data.draw(st.integers(1, tw))
        student = Tensor(np.zeros((2, 3, sh, sw)))
        pair = resize_teacher_maps(np.ones((2, 3, th, tw)), student, ResizeMode.MP_AND_INT)
        assert pair.student_map is student
        assert all(m.shape == (2, 3, sh, sw) for m in pair.resized_teacher_maps)

    def test_none_rejected(self):
        with pytest.raises(ValueError):
            resize_teacher_maps(np.zeros((1, 1, 4, 4)), (1, 1, 2, 2), ResizeMode.NONE)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            resize_teacher_maps(np.zeros((1, 2, 4, 4)), (1, 3, 2, 2), "INT")

    def test_student_larger(self):
        with pytest.raises(ValueError):
            resize_teacher_maps(np.zeros((1, 2, 2, 2)), (1, 2, 4, 4), "INT")

    @pytest.mark.parametrize("text,mode", [("KD", ResizeMode.NONE), ("MP+INT", ResizeMode.MP_AND_INT),
                                           ("int", ResizeMode.INT), ("KD+MP", ResizeMode.MP)])
    def test_parse_aliases(self, text, mode):
        assert ResizeMode.parse(text) is mode
