"""Gradient and contract tests for the autodiff substrate.

Every differentiable op gets a randomized central-finite-difference check;
log_softmax additionally gets exact small cases and a high-precision oracle.
"""

import math

import mpmath
import numpy as np
import pytest

from conftest import fd_gradcheck
from degenlab import autodiff as ad
from degenlab.autodiff import Tensor
from degenlab.errors import ContractViolation, InvalidValue


def _leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestLogSoftmax:
    def test_symmetric_row(self):
        out = ad.log_softmax(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[-math.log(2)] * 2], atol=1e-15)

    def test_extreme_row_no_overflow(self):
        out = ad.log_softmax(Tensor([[1000.0, 0.0]]))
        assert out.data[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert out.data[0, 1] == pytest.approx(-1000.0, abs=1e-9)

    def test_high_precision_oracle(self):
        """Row [1,2,3] against a 50-digit mpmath evaluation."""
        mpmath.mp.dps = 50
        vals = [mpmath.mpf(v) for v in (1, 2, 3)]
        lse = mpmath.log(sum(mpmath.e ** v for v in vals))
        expected = [float(v - lse) for v in vals]
        out = ad.log_softmax(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data[0], expected, atol=1e-14)

    def test_rows_normalize(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(scale=5.0, size=(40, 9)))
        out = ad.log_softmax(x)
        lse = np.log(np.exp(out.data).sum(axis=1))
        assert np.abs(lse).max() < 1e-9

    def test_nonfinite_input_rejected(self):
        with pytest.raises(InvalidValue):
            ad.log_softmax(Tensor(np.zeros((2, 2))) * np.inf)


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.tensor_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_half_square_norm_gradient_is_w(self):
        rng = np.random.default_rng(1)
        w = _leaf(rng, (3, 4))
        ad.backward(ad.tensor_sum(ad.pow_const(w, 2.0)) * 0.5)
        np.testing.assert_allclose(w.grad, w.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractViolation):
            ad.backward(w * 2.0)

    def test_fanout_accumulates(self):
        w = Tensor(np.array(2.0), requires_grad=True)
        ad.backward(w + w)
        assert w.grad == pytest.approx(2.0)

    def test_mlp_matches_finite_differences(self):
        """Random 3-layer MLP: gradient agrees with central differences."""
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 5)))
        ws = [_leaf(rng, (5, 4)), _leaf(rng, (4, 4)), _leaf(rng, (4, 3))]
        bs = [_leaf(rng, (4,)), _leaf(rng, (4,)), _leaf(rng, (3,))]

        def loss():
            h = x
            for w, b in zip(ws, bs):
                h = ad.gelu(ad.matmul(h, w) + b)
            return ad.tensor_sum(ad.pow_const(h, 2.0))

        fd_gradcheck(loss, ws + bs)


class TestOpGradients:
    """Randomized finite-difference checks, one op at a time."""

    @pytest.mark.parametrize("trial", range(3))
    def test_elementwise_chain(self, trial):
        rng = np.random.default_rng(10 + trial)
        a = _leaf(rng, (3, 4))
        b = _leaf(rng, (3, 4))
        fd_gradcheck(
            lambda: ad.tensor_sum(ad.exp(a * 0.3) * b - ad.neg(a) + ad.mean(b)),
            [a, b],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_log_and_pow(self, trial):
        rng = np.random.default_rng(20 + trial)
        a = Tensor(rng.uniform(0.2, 2.0, size=(4, 3)), requires_grad=True)
        fd_gradcheck(
            lambda: ad.tensor_sum(ad.log(a) + ad.pow_const(a, 1.7)),
            [a],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_matmul_2d_and_batched(self, trial):
        rng = np.random.default_rng(30 + trial)
        a = _leaf(rng, (2, 3, 4))
        b = _leaf(rng, (2, 4, 3))
        w = _leaf(rng, (3, 5))
        fd_gradcheck(
            lambda: ad.tensor_sum(ad.matmul(ad.matmul(a, b), w)),
            [a, b, w],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_softmax_variants(self, trial):
        rng = np.random.default_rng(40 + trial)
        x = _leaf(rng, (4, 5))
        mask = np.tril(np.ones((4, 5), dtype=bool))
        coeff = Tensor(rng.normal(size=(4, 5)))
        fd_gradcheck(
            lambda: ad.tensor_sum(
                (ad.softmax(x) + ad.log_softmax(x) + ad.masked_softmax(x, mask)) * coeff
            ),
            [x],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_layer_norm(self, trial):
        rng = np.random.default_rng(50 + trial)
        x = _leaf(rng, (3, 6))
        g = _leaf(rng, (6,))
        b = _leaf(rng, (6,))
        coeff = Tensor(rng.normal(size=(3, 6)))
        fd_gradcheck(lambda: ad.tensor_sum(ad.layer_norm(x, g, b) * coeff), [x, g, b])

    @pytest.mark.parametrize("trial", range(3))
    def test_embedding_and_gathers(self, trial):
        rng = np.random.default_rng(60 + trial)
        table = _leaf(rng, (7, 4))
        ids = rng.integers(0, 7, size=5)
        mat = _leaf(rng, (5, 6))
        idx = rng.integers(0, 6, size=5)
        rows = rng.integers(0, 5, size=4)
        cols = rng.integers(0, 6, size=4)
        fd_gradcheck(
            lambda: ad.tensor_sum(ad.embedding(table, ids))
            + ad.tensor_sum(ad.take_per_row(mat, idx))
            + ad.tensor_sum(ad.take_at(mat, rows, cols)),
            [table, mat],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_shape_ops(self, trial):
        rng = np.random.default_rng(70 + trial)
        a = _leaf(rng, (2, 6))
        b = _leaf(rng, (3, 6))
        coeff = Tensor(rng.normal(size=(5, 2, 3)))
        fd_gradcheck(
            lambda: ad.tensor_sum(
                ad.transpose(
                    ad.reshape(ad.slice_rows(ad.concat_rows(a, b), 0, 5), (5, 2, 3)),
                    (0, 2, 1),
                ) * ad.transpose(coeff, (0, 2, 1))
            ),
            [a, b],
        )

    @pytest.mark.parametrize("trial", range(3))
    def test_gelu(self, trial):
        rng = np.random.default_rng(80 + trial)
        a = _leaf(rng, (4, 4))
        fd_gradcheck(lambda: ad.tensor_sum(ad.gelu(a)), [a])


class TestMaskedSoftmax:
    def test_masked_positions_exactly_zero(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 4)))
        mask = np.tril(np.ones((4, 4), dtype=bool))
        out = ad.masked_softmax(x, mask)
        assert (out.data[~mask] == 0.0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_fully_masked_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ContractViolation):
            ad.masked_softmax(Tensor(np.zeros((2, 2))), mask)


class TestDeterminismAndValidation:
    def test_bit_identical_forward_and_gradients(self):
        def run():
            rng = np.random.default_rng(99)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            x = Tensor(rng.normal(size=(2, 4)))
            loss = ad.tensor_sum(ad.gelu(ad.matmul(x, w)))
            ad.backward(loss)
            return loss.data.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
        with pytest.raises(ContractViolation):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_nonfinite_creation_rejected(self):
        with pytest.raises(InvalidValue):
            Tensor([np.nan])

    def test_dropout_identity_at_zero_rate(self):
        x = Tensor(np.ones(5), requires_grad=True)
        assert ad.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_dropout_scales_kept_values(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.ones((100, 100)))
        out = ad.dropout(x, 0.25, rng)
        kept = out.data[out.data != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs((out.data == 0).mean() - 0.25) < 0.02
