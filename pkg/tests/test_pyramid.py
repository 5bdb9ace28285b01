"""Gaussian kernels, blurring, pyramid decomposition and reconstruction."""

import numpy as np
import pytest

from lapseg import ops
from lapseg.pyramid import (
    GaussianSpec,
    PyramidStack,
    build_pyramid,
    gaussian_blur,
    gaussian_kernel,
    reconstruct,
)
from lapseg.spectral import fft2_magnitude
from lapseg.tensor import ShapeError, Tensor


def t64(a):
    return Tensor(np.asarray(a), dtype=np.float64)


class TestGaussianKernel:
    @pytest.mark.parametrize("sigma,radius", [(0.5, 2), (1.0, 3), (2.7, 9)])
    def test_unit_sum(self, sigma, radius):
        k = gaussian_kernel(sigma, radius, dtype=np.float64)
        assert abs(k.data.sum() - 1.0) < 1e-9

    def test_zero_radius_is_delta(self):
        k = gaussian_kernel(0.1, 0, dtype=np.float64)
        np.testing.assert_array_equal(k.data, [[1.0]])

    def test_sigma_one_profile(self):
        # centre/corner ratio must match exp(0)/exp(-(3^2+3^2)/2) = exp(9);
        # normalisation cancels in the ratio.
        k = gaussian_kernel(1.0, 3, dtype=np.float64).data
        assert k[3, 3] == k.max()
        assert k[3, 3] / k[0, 0] == pytest.approx(np.exp(9.0), rel=1e-9)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_kernel(0.0, 1)


class TestGaussianBlur:
    def test_constant_preserved(self):
        x = t64(np.full((6, 5, 2), 1.7))
        for sigma in (0.5, 1.0, 3.0):
            out = gaussian_blur(x, sigma)
            np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_sigma_zero_is_identity(self, rng):
        x = t64(rng.normal(size=(4, 4, 1)))
        assert gaussian_blur(x, 0.0) is x

    def test_impulse_stamps_kernel(self):
        x = np.zeros((9, 9, 1))
        x[4, 4, 0] = 1.0
        out = gaussian_blur(t64(x), 1.0).data[:, :, 0]
        k = gaussian_kernel(1.0, 3, dtype=np.float64).data
        np.testing.assert_allclose(out[1:8, 1:8], k, atol=1e-12)

    def test_separable_matches_full_2d(self, rng):
        # the spec permits a separable path if it matches the 2-D kernel
        x = t64(rng.normal(size=(10, 8, 3)))
        sigma = 1.3
        r = int(np.ceil(3 * sigma))
        k2 = gaussian_kernel(sigma, r, dtype=np.float64).data
        kc = Tensor(np.repeat(k2[:, :, None], 3, axis=2), dtype=np.float64)
        direct = ops.corr2d_valid(ops.pad_reflect(x, r, r), kc)
        sep = gaussian_blur(x, sigma)
        assert np.abs(direct.data - sep.data).max() < 1e-6

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_blur(t64(np.zeros((2, 2, 1))), -1.0)


class TestGaussianSpec:
    def test_sigmas_must_increase(self):
        with pytest.raises(ValueError):
            GaussianSpec((2.0, 1.0))
        with pytest.raises(ValueError):
            GaussianSpec((1.0, 1.0))

    def test_sigmas_must_be_positive(self):
        with pytest.raises(ValueError):
            GaussianSpec((0.0, 1.0))

    def test_needs_at_least_one_level(self):
        with pytest.raises(ValueError):
            GaussianSpec(())

    def test_radius_rule(self):
        spec = GaussianSpec((1.0, 2.0))
        assert spec.radius(1.0) == 3
        assert spec.radius(2.0) == 6


class TestBuildPyramid:
    def test_constant_input_all_bands_zero(self):
        x = t64(np.full((8, 8, 2), 0.9))
        stack = build_pyramid(x, GaussianSpec((1.0, 2.0)))
        for band in stack.bands:
            np.testing.assert_allclose(band.data, 0.0, atol=1e-12)
        np.testing.assert_allclose(stack.residual.data, x.data, atol=1e-12)

    def test_single_level_definition(self, rng):
        x = t64(rng.normal(size=(6, 6, 1)))
        stack = build_pyramid(x, GaussianSpec((1.0,)))
        blurred = gaussian_blur(x, 1.0)
        np.testing.assert_allclose(stack.bands[0].data,
                                   x.data - blurred.data, atol=1e-12)
        np.testing.assert_allclose(stack.residual.data, blurred.data, atol=1e-12)

    def test_telescoping_independent_summation(self, rng):
        x = rng.normal(size=(8, 8, 2)).astype(np.float32)
        stack = build_pyramid(Tensor(x), GaussianSpec((1.0, 2.0, 4.0)))
        # independent summation: plain numpy over the parts
        total = np.zeros_like(x, dtype=np.float64)
        for band in stack.bands:
            total += band.data.astype(np.float64)
        total += stack.residual.data.astype(np.float64)
        assert np.abs(total - x).max() < 1e-6

    def test_level_count(self, rng):
        x = t64(rng.normal(size=(4, 4, 1)))
        stack = build_pyramid(x, GaussianSpec((0.5, 1.0, 2.0)))
        assert len(stack.bands) == 3
        assert len(stack.levels) == 4


class TestReconstruct:
    def test_inverts_build(self, rng):
        for _ in range(100):
            x = Tensor(rng.normal(size=(8, 8, 2)).astype(np.float32))
            stack = build_pyramid(x, GaussianSpec((1.0, 2.0, 4.0)))
            err = np.abs(reconstruct(stack).data - x.data).max()
            assert err < 1e-6

    def test_zero_stack(self):
        zero = t64(np.zeros((4, 4, 1)))
        stack = PyramidStack(bands=[zero, zero], residual=zero)
        np.testing.assert_array_equal(reconstruct(stack).data, zero.data)

    def test_single_nonzero_band(self, rng):
        b = t64(rng.normal(size=(4, 4, 1)))
        zero = t64(np.zeros((4, 4, 1)))
        stack = PyramidStack(bands=[b], residual=zero)
        np.testing.assert_array_equal(reconstruct(stack).data, b.data)

    def test_shape_mismatch(self, rng):
        stack = PyramidStack(bands=[t64(np.zeros((3, 3, 1)))],
                             residual=t64(np.zeros((4, 4, 1))))
        with pytest.raises(ShapeError):
            reconstruct(stack)


class TestSpectralProperties:
    def test_checkerboard_band0_dominates_residual(self):
        n = 16
        checker = ((np.indices((n, n)).sum(axis=0) % 2) * 2.0 - 1.0)
        stack = build_pyramid(t64(checker[:, :, None]), GaussianSpec((1.0, 2.0)))
        e_band0 = (fft2_magnitude(stack.bands[0].data[:, :, 0]) ** 2).sum()
        e_res = (fft2_magnitude(stack.residual.data[:, :, 0]) ** 2).sum()
        assert e_band0 > e_res

    def test_blur_reduces_total_variation(self, rng):
        x = rng.normal(size=(16, 16, 1))
        spec = GaussianSpec((1.0, 2.0, 4.0))

        def tv(a):
            return (np.abs(np.diff(a[:, :, 0], axis=0)).sum()
                    + np.abs(np.diff(a[:, :, 0], axis=1)).sum())

        levels = [t64(x)] + [gaussian_blur(t64(x), s) for s in spec.sigmas]
        tvs = [tv(lv.data) for lv in levels]
        for a, b in zip(tvs, tvs[1:]):
            assert b <= a + 1e-9
