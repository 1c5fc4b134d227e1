import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import Tensor
from src.errors import NonFiniteError, ShapeError


def param(values):
    return Tensor(values, requires_grad=True)


class TestOps:
    def test_matmul_identity(self):
        out = ad.matmul(Tensor(np.eye(2)), Tensor([[2, 3], [4, 5]]))
        np.testing.assert_array_equal(out.data, [[2, 3], [4, 5]])

    def test_matmul_hand_arithmetic(self):
        assert ad.matmul(Tensor([[1, 0]]), Tensor([[0], [7]])).item() == 0.0

    def test_matmul_gradient(self):
        a = param([[1, 2]])
        ad.backward(ad.sum_all(ad.matmul(a, Tensor([[3], [4]]))))
        np.testing.assert_array_equal(a.grad, [[3, 4]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_elementwise_examples(self):
        np.testing.assert_array_equal(ad.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [[4, 6]])
        np.testing.assert_allclose(ad.elementwise("scale", Tensor([1, -1]), factor=0.2).data, [[0.2, -0.2]])

    def test_elementwise_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_gelu_derivative_at_zero(self):
        x = param([[0.0]])
        ad.backward(ad.sum_all(ad.gelu(x)))
        assert x.grad[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_softmax_symmetric_and_stable(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0, 0]])).data, [[0.5, 0.5]])
        big = ad.softmax_rows(Tensor([[1000, 0]])).data
        assert big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_softmax_rows_sum_to_one(self):
        data = np.random.default_rng(0).normal(size=(5, 7)) * 10
        sums = ad.softmax_rows(Tensor(data)).data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) <= 1e-12)

    def test_layer_norm_examples(self):
        gain, bias = Tensor.ones(1, 2), Tensor.zeros(1, 2)
        np.testing.assert_allclose(ad.layer_norm_rows(Tensor([[1, 3]]), gain, bias, eps=1e-12).data, [[-1, 1]])
        flat = ad.layer_norm_rows(Tensor([[5, 5, 5]]), Tensor.ones(1, 3), Tensor.zeros(1, 3), eps=1e-6)
        np.testing.assert_array_equal(flat.data, [[0, 0, 0]])

    def test_layer_norm_mean_matches_bias_mean(self):
        rng = np.random.default_rng(1)
        bias = Tensor(rng.normal(size=(1, 6)))
        out = ad.layer_norm_rows(Tensor(rng.normal(size=(4, 6))), Tensor.ones(1, 6), bias)
        assert np.all(np.abs(out.data.mean(axis=1) - bias.data.mean()) <= 1e-10)

    def test_non_finite_output_names_op(self):
        with pytest.raises(NonFiniteError) as info:
            ad.scale(Tensor([[1e308]]), 10.0)
        assert info.value.op == "scale"

    def test_gather_rows_scatter_adds(self):
        a = param([[1.0, 2.0], [3.0, 4.0]])
        ad.backward(ad.sum_all(ad.gather_rows(a, [0, 0, 1])))
        np.testing.assert_array_equal(a.grad, [[2, 2], [1, 1]])


class TestBackward:
    def test_square_gradient(self):
        x = param([[3.0]])
        ad.backward(ad.sum_all(ad.mul(x, x)))
        assert x.grad[0, 0] == 6.0

    def test_unused_parameter_gets_zeros(self):
        x, unused = param([[3.0]]), param([[1.0, 2.0]])
        ad.backward(ad.sum_all(ad.mul(x, x)), params=[x, unused])
        np.testing.assert_array_equal(unused.grad, [[0.0, 0.0]])

    def test_loss_must_be_scalar(self):
        with pytest.raises(ShapeError):
            ad.backward(ad.add(param([[1.0, 2.0]]), Tensor([[1.0, 1.0]])))

    def test_no_grad_records_nothing(self):
        x = param([[2.0]])
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad

    def test_forward_is_bitwise_deterministic(self):
        rng = np.random.default_rng(2)
        a, b = Tensor(rng.normal(size=(6, 6))), Tensor(rng.normal(size=(6, 6)))
        first = ad.softmax_rows(ad.matmul(a, b)).data
        second = ad.softmax_rows(ad.matmul(a, b)).data
        assert np.array_equal(first, second)


class TestFiniteDifference:
    def test_square(self):
        x = param([[3.0]])
        assert ad.finite_difference_check(lambda p: ad.sum_all(ad.mul(p[0], p[0])), [x]) < 1e-9

    def test_constant(self):
        x = param([[3.0]])
        constant = Tensor([[4.0]])
        assert ad.finite_difference_check(lambda p: ad.add(ad.scale(ad.sum_all(p[0]), 0.0), constant), [x]) == 0.0

    def test_eps_range(self):
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda p: ad.sum_all(p[0]), [param([[1.0]])], eps=1e-3)

    def test_non_deterministic_function_rejected(self):
        rng = np.random.default_rng(0)
        x = param([[1.0]])
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda p: ad.add(ad.sum_all(p[0]), Tensor([[rng.normal()]])), [x])

    @pytest.mark.parametrize("seed", range(20))
    def test_every_op_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        rows, inner, cols = rng.integers(1, 8, size=3)
        a = param(rng.normal(size=(rows, inner)))
        b = param(rng.normal(size=(inner, cols)))
        c = param(rng.normal(size=(rows, cols)))
        gain = param(rng.normal(size=(1, cols)) + 1.0)
        bias = param(rng.normal(size=(1, cols)))
        row = param(rng.normal(size=(1, cols)))
        targets = rng.integers(0, cols, size=rows)
        params = [a, b, c, gain, bias, row]

        def loss(p):
            a_, b_, c_, gain_, bias_, row_ = p
            h = ad.add_row(ad.matmul(a_, b_), row_)
            h = ad.gelu(ad.sub(h, ad.scale(c_, 0.5)))
            h = ad.mul(h, c_) if cols > 1 else h
            normed = ad.layer_norm_rows(h, gain_, bias_, eps=1e-3) if cols > 1 else h
            probs = ad.softmax_rows(ad.add(normed, ad.transpose(ad.transpose(c_))))
            mse = ad.mean_all(ad.mul(ad.sub(probs, c_), ad.sub(probs, c_)))
            return ad.add(mse, ad.cross_entropy(normed, targets))

        assert ad.finite_difference_check(loss, params) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_bce_and_concat_ops(self, seed):
        rng = np.random.default_rng(100 + seed)
        a = param(rng.normal(size=(3, 4)))
        b = param(rng.normal(size=(2, 4)))
        targets = rng.integers(0, 2, size=(5, 4)).astype(float)

        def loss(p):
            stacked = ad.concat_rows([p[0], p[1]])
            widened = ad.concat_cols([ad.slice_cols(stacked, 0, 2), ad.slice_cols(stacked, 2, 4)])
            return ad.bce_with_logits(widened, targets)

        assert ad.finite_difference_check(loss, [a, b]) < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_sequence_attention_gradient(self, seed):
        rng = np.random.default_rng(200 + seed)
        q, k, v = (param(rng.normal(size=(6, 4))) for _ in range(3))
        bias = np.zeros((3, 3))
        bias[1, 0] = -1e9

        def loss(p):
            out, _ = ad.sequence_attention(p[0], p[1], p[2], 3, bias=bias, scale=0.5)
            return ad.sum_all(ad.mul(out, out))

        assert ad.finite_difference_check(loss, [q, k, v]) < 1e-4

    def test_sequence_attention_matches_block_diagonal_softmax(self):
        rng = np.random.default_rng(7)
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        out, probs = ad.sequence_attention(Tensor(q), Tensor(k), Tensor(v), 3, scale=0.5)
        scores = q @ k.T * 0.5
        scores[:3, 3:] = scores[3:, :3] = -1e9
        dense = np.exp(scores - scores.max(axis=1, keepdims=True))
        dense /= dense.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, dense @ v, atol=1e-12)
        np.testing.assert_allclose(probs[1], dense[3:, 3:], atol=1e-12)
        assert probs.shape == (2, 3, 3)

    def test_sequence_attention_rows_must_split(self):
        x = Tensor(np.ones((5, 2)))
        with pytest.raises(ShapeError):
            ad.sequence_attention(x, x, x, 2)
