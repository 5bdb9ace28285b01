"""Core tensor-engine ops: forward values against oracles, stabilisation
behaviour, error paths, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapseg import ops
from lapseg.tensor import ShapeError, Tape, Tensor


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data), dtype=np.float64, requires_grad=requires_grad)


class TestMatmul:
    def test_identity_is_bitwise(self, rng):
        a = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        eye = Tensor(np.eye(4, dtype=np.float32))
        out = ops.matmul(eye, a)
        assert np.array_equal(out.data, a.data)

    def test_zeros_annihilate(self, rng):
        z = Tensor(np.zeros((2, 3), dtype=np.float32))
        b = Tensor(rng.normal(size=(3, 4)).astype(np.float32))
        assert np.array_equal(ops.matmul(z, b).data, np.zeros((2, 4)))

    def test_hand_expansion(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[5.0], [6.0]])
        # oracle: row-by-column expansion of the definition
        expected = [[1 * 5 + 2 * 6], [3 * 5 + 4 * 6]]
        np.testing.assert_array_equal(ops.matmul(a, b).data, expected)

    def test_inner_extent_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))

    def test_batched_matches_per_slice(self, rng):
        a = rng.normal(size=(3, 4, 5))
        b = rng.normal(size=(3, 5, 2))
        out = ops.matmul(t64(a), t64(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = ops.softmax(t64([0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_shift_invariance(self):
        for c in (-3.0, 0.0, 1e4):
            out = ops.softmax(t64([c, c, c, c]), axis=0)
            np.testing.assert_allclose(out.data, [0.25] * 4, atol=1e-12)

    def test_two_logit_case(self):
        out = ops.softmax(t64([1.0, 2.0]), axis=0)
        # independent oracle: direct exp/sum evaluation
        e = np.exp([1.0, 2.0])
        np.testing.assert_allclose(out.data, e / e.sum(), atol=1e-12)
        np.testing.assert_allclose(out.data, [0.26894, 0.73106], atol=1e-5)

    def test_overflow_guard(self):
        out = ops.softmax(t64([1e4, 1e4 + 1.0]), axis=0)
        assert np.all(np.isfinite(out.data))

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(t64([1.0, 2.0]), axis=3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
           st.integers(2, 5))
    def test_rows_sum_to_one(self, row, nrows):
        x = Tensor(np.tile(np.asarray(row, dtype=np.float32), (nrows, 1)))
        out = ops.softmax(x, axis=1).data
        np.testing.assert_allclose(out.sum(axis=1), np.ones(nrows), atol=1e-6)
        assert np.all(out > 0) and np.all(out <= 1.0)


class TestLayerNorm:
    def test_constant_token_maps_to_zero(self):
        x = t64(np.full((3, 5), 2.5))
        out = ops.layer_norm(x, t64(np.ones(5)), t64(np.zeros(5)), eps=1e-6)
        np.testing.assert_allclose(out.data, np.zeros((3, 5)), atol=1e-9)

    def test_two_point_closed_form(self):
        # token [1, 3]: mean 2, population std 1, so normalised is [-1, 1]
        x = t64([[1.0, 3.0]])
        out = ops.layer_norm(x, t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_affine_collapse(self, rng):
        x = t64(rng.normal(size=(4, 6)))
        b = rng.normal(size=6)
        out = ops.layer_norm(x, t64(np.zeros(6)), t64(b), eps=1e-6)
        np.testing.assert_allclose(out.data, np.tile(b, (4, 1)), atol=1e-12)

    def test_normalises_mean_and_variance(self, rng):
        x = t64(rng.normal(size=(8, 16)) * 3 + 1)
        out = ops.layer_norm(x, t64(np.ones(16)), t64(np.zeros(16)), eps=1e-10).data
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1, atol=1e-6)

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            ops.layer_norm(t64(np.zeros((2, 2))), t64(np.ones(2)),
                           t64(np.zeros(2)), eps=0.0)


class TestDepthwiseConv:
    def test_delta_kernel_is_identity(self, rng):
        x = Tensor(rng.normal(size=(5, 6, 3)).astype(np.float32))
        k = np.zeros((3, 3, 3), dtype=np.float32)
        k[1, 1, :] = 1.0
        out = ops.depthwise_conv2d(x, Tensor(k))
        np.testing.assert_array_equal(out.data, x.data)

    def test_dc_preserved_under_reflect(self):
        x = t64(np.full((4, 4, 2), 3.0))
        k = t64(np.full((3, 3, 2), 1.0 / 9.0))
        out = ops.depthwise_conv2d(x, k)
        np.testing.assert_allclose(out.data, np.full((4, 4, 2), 3.0), atol=1e-12)

    def test_box_kernel_on_one_hot(self):
        x = np.zeros((3, 3, 1))
        x[1, 1, 0] = 1.0
        k = t64(np.full((3, 3, 1), 1.0 / 9.0))
        out = ops.depthwise_conv2d(t64(x), k)
        assert out.data[1, 1, 0] == pytest.approx(1.0 / 9.0, abs=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ops.depthwise_conv2d(t64(np.zeros((4, 4, 1))), t64(np.zeros((2, 2, 1))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            ops.depthwise_conv2d(t64(np.zeros((4, 4, 2))), t64(np.zeros((3, 3, 1))))


class TestGelu:
    def test_fixed_point(self):
        assert ops.gelu(t64([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert ops.gelu(t64([10.0])).data[0] == pytest.approx(10.0, abs=1e-4)

    def test_unit_value(self):
        # oracle: evaluate the tanh-approximation formula directly
        x = 1.0
        u = np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)
        expected = 0.5 * x * (1 + np.tanh(u))
        got = ops.gelu(t64([1.0])).data[0]
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.84119, abs=1e-3)


class TestPadReflect:
    def test_matches_numpy_pad_for_small_pads(self, rng):
        x = rng.normal(size=(5, 7, 2))
        out = ops.pad_reflect(t64(x), 3, 2).data
        expected = np.pad(x, ((3, 3), (2, 2), (0, 0)), mode="reflect")
        np.testing.assert_array_equal(out, expected)

    def test_pad_wider_than_input(self):
        x = t64(np.arange(3, dtype=np.float64).reshape(3, 1, 1))
        out = ops.pad_reflect(x, 4, 0).data[:, 0, 0]
        # mirror-without-repeat has period 4: ... 0 1 2 1 | 0 1 2 | 1 0 1 2
        np.testing.assert_array_equal(out, [0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2])

    def test_single_row_input(self):
        x = t64(np.ones((1, 4, 1)))
        out = ops.pad_reflect(x, 2, 0)
        assert out.shape == (5, 4, 1)
        assert np.all(out.data == 1.0)


class TestExtractPatches:
    def test_manual_two_by_two(self):
        x = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
        out = ops.extract_patches(t64(x), 2, 2, 2, 2).data
        np.testing.assert_array_equal(out[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(out[3], [10, 11, 14, 15])

    def test_overlapping_stride(self):
        x = np.arange(9, dtype=np.float64).reshape(3, 3, 1)
        out = ops.extract_patches(t64(x), 2, 2, 1, 1).data
        assert out.shape == (4, 4)
        np.testing.assert_array_equal(out[0], [0, 1, 3, 4])

    def test_too_large_patch(self):
        with pytest.raises(ShapeError):
            ops.extract_patches(t64(np.zeros((2, 2, 1))), 3, 3, 1, 1)


class TestDeterminism:
    def test_forward_backward_bit_identical(self, rng):
        data = rng.normal(size=(6, 6, 2)).astype(np.float32)

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            k = Tensor(np.full((3, 3, 2), 1 / 9, dtype=np.float32),
                       requires_grad=True)
            with Tape() as tape:
                y = ops.depthwise_conv2d(x, k)
                z = ops.softmax(ops.reshape(y, (36, 2)), axis=1)
                loss = ops.mean_(ops.mul(z, z))
            tape.backward(loss)
            return loss.data.copy(), x.grad.copy(), k.grad.copy()

        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gk1, gk2)

    def test_backward_twice_same_tape_inputs(self, rng):
        x = Tensor(rng.normal(size=(3, 3)).astype(np.float64), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.mul(x, x))
        tape.backward(loss)
        g1 = x.grad.copy()
        tape.backward(loss)
        assert np.array_equal(g1, x.grad)


class TestScalarLoss:
    def test_backward_rejects_vector_loss(self, rng):
        x = Tensor(rng.normal(size=(3,)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)
