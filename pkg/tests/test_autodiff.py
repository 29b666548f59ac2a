import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attentive_gnn import autodiff as ad
from attentive_gnn.autodiff import (
    ShapeError,
    Tensor,
    backward,
    concat_features,
    finite_diff_check,
    leaky_relu,
    matmul,
    row_softmax,
    total_sum,
)


def naive_matmul(a, b):
    p, q = a.shape
    r = b.shape[1]
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1, 2], [3, 4]])
        np.testing.assert_array_equal(matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        assert matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]

    def test_random_against_triple_loop(self, rng):
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(p=st.integers(1, 64), q=st.integers(1, 64), r=st.integers(1, 64), seed=st.integers(0, 2**31))
    def test_matches_oracle_up_to_64(self, p, q, r, seed):
        g = np.random.default_rng(seed)
        a, b = g.normal(size=(p, q)), g.normal(size=(q, r))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestRowSoftmax:
    def test_symmetric_row(self):
        np.testing.assert_allclose(row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(row_softmax(Tensor([[np.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        y = row_softmax(Tensor(rng.normal(size=(3, 3)))).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
        assert (y >= 0).all()

    def test_mask_zeroes_excluded_entries(self, rng):
        mask = np.array([[True, False, True], [False, True, True], [True, True, True]])
        y = row_softmax(Tensor(rng.normal(size=(3, 3))), mask).data
        assert (y[~mask] == 0.0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)

    def test_empty_mask_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="empty"):
            row_softmax(Tensor(np.zeros((2, 2))), mask)

    def test_large_values_stay_finite(self):
        y = row_softmax(Tensor([[1000.0, 0.0, -1000.0]])).data
        assert np.isfinite(y).all()
        np.testing.assert_allclose(y, [[1.0, 0.0, 0.0]])


class TestLeakyRelu:
    def test_values(self):
        np.testing.assert_allclose(leaky_relu(Tensor([[1.0, -1.0]]), 0.2).data, [[1.0, -0.2]])

    def test_gradient_at_negative(self):
        x = Tensor([[-2.0]], trainable=True)
        backward(leaky_relu(x, 0.2))
        assert x.grad[0, 0] == 0.2

    def test_gradient_at_zero_is_slope(self):
        x = Tensor([[0.0]], trainable=True)
        backward(leaky_relu(x, 0.2))
        assert x.grad[0, 0] == 0.2

    def test_rejects_bad_slope(self):
        with pytest.raises(ValueError):
            leaky_relu(Tensor([[1.0]]), 1.5)


class TestConcat:
    def test_shape(self):
        assert concat_features(Tensor(np.ones((3, 2))), Tensor(np.ones((3, 4)))).shape == (3, 6)

    def test_slices_recover_inputs(self, rng):
        a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))
        c = concat_features(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(c[:, :2], a)
        np.testing.assert_array_equal(c[:, 2:], b)

    def test_gradient_is_ones(self, rng):
        a = Tensor(rng.normal(size=(3, 2)), trainable=True)
        b = Tensor(rng.normal(size=(3, 4)), trainable=True)
        backward(total_sum(concat_features(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones((3, 2)))

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            concat_features(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))


class TestBackward:
    def test_sum_of_product(self, rng):
        A = Tensor(rng.normal(size=(3, 4)), trainable=True)
        B = Tensor(rng.normal(size=(4, 2)), trainable=True)
        backward(total_sum(matmul(A, B)))
        np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T, atol=1e-14)

    def test_off_path_grad_stays_zero(self, rng):
        A = Tensor(rng.normal(size=(2, 2)), trainable=True)
        unused = Tensor(rng.normal(size=(2, 2)), trainable=True)
        backward(total_sum(A))
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))

    def test_three_op_chain(self, rng):
        W = Tensor(rng.normal(size=(4, 3)))

        def f(x):
            return total_sum(leaky_relu(matmul(x, W), 0.2))

        assert finite_diff_check(f, Tensor(rng.normal(size=(5, 4)))) < 1e-4

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones((2, 2)), trainable=True))

    def test_repeated_calls_accumulate(self, rng):
        x = Tensor(rng.normal(size=(2, 3)), trainable=True)
        out = total_sum(x)
        backward(out)
        backward(out)
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 3)))

    def test_reuse_doubles_gradient_exactly(self, rng):
        w = rng.normal(size=(3, 3))
        x1 = Tensor(w, trainable=True)
        backward(total_sum(ad.mul(x1, Tensor(w))))
        x2 = Tensor(w, trainable=True)
        backward(total_sum(ad.add(ad.mul(x2, Tensor(w)), ad.mul(x2, Tensor(w)))))
        np.testing.assert_array_equal(x2.grad, 2 * x1.grad)


class TestFiniteDiffCheck:
    def test_quadratic(self, rng):
        assert finite_diff_check(lambda x: total_sum(ad.mul(x, x)), Tensor(rng.normal(size=(4, 4)))) < 1e-8

    def test_linear(self, rng):
        c = Tensor(rng.normal(size=(3, 5)))
        assert finite_diff_check(lambda x: total_sum(ad.mul(x, c)), Tensor(rng.normal(size=(3, 5)))) < 1e-10

    def test_detects_corrupted_rule(self, rng, monkeypatch):
        real = ad.leaky_relu

        def broken(a, slope=0.2):
            out = real(a, slope)
            rule = out._rule
            out._rule = lambda g: (rule(g)[0] * 1.5,)
            return out

        monkeypatch.setattr(ad, "leaky_relu", broken)
        err = finite_diff_check(lambda x: total_sum(ad.leaky_relu(x)), Tensor(rng.normal(size=(3, 3))))
        assert err > 1e-2

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(total_sum, Tensor([[1.0]]), h=0.0)


def _nonzero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, lo * np.sign(x + 1e-30), x)


# each entry: (name, f(x) -> scalar, input shape)
def _op_cases(rng):
    W = Tensor(rng.normal(size=(4, 3)))
    C = Tensor(rng.normal(size=(5, 4)))
    R = Tensor(rng.normal(size=(5, 5)))
    mask = rng.random((5, 5)) < 0.6
    mask[np.arange(5), rng.integers(0, 5, 5)] = True
    weights = Tensor(rng.normal(size=(5, 5)))
    return [
        ("matmul_left", lambda x: total_sum(matmul(x, W)), (5, 4)),
        ("matmul_right", lambda x: total_sum(matmul(C, x)), (4, 3)),
        ("add", lambda x: total_sum(ad.mul(ad.add(x, C), C)), (5, 4)),
        ("add_row", lambda x: total_sum(ad.mul(ad.add(C, x), C)), (1, 4)),
        ("sub", lambda x: total_sum(ad.mul(ad.sub(C, x), C)), (5, 4)),
        ("mul", lambda x: total_sum(ad.mul(x, x)), (5, 4)),
        ("scale_by_tensor", lambda x: total_sum(ad.mul(ad.scale(C, x), C)), (1, 1)),
        ("transpose", lambda x: total_sum(ad.mul(ad.transpose(x), W)), (3, 4)),
        ("reshape", lambda x: total_sum(ad.mul(ad.reshape(x, 5, 4), C)), (4, 5)),
        ("concat", lambda x: total_sum(ad.mul(concat_features(x, C), concat_features(C, C))), (5, 4)),
        ("take_rows", lambda x: total_sum(ad.mul(ad.take_rows(x, [0, 2, 2, 4, 1]), C)), (5, 4)),
        ("take_cols", lambda x: total_sum(ad.mul(ad.take_cols(x, [3, 0, 0]), ad.take_cols(C, [0, 1, 2]))), (5, 4)),
        ("leaky_relu", lambda x: total_sum(ad.mul(leaky_relu(x, 0.2), C)), (5, 4)),
        ("row_softmax", lambda x: total_sum(ad.mul(row_softmax(x), weights)), (5, 5)),
        ("row_softmax_masked", lambda x: total_sum(ad.mul(row_softmax(x, mask), weights)), (5, 5)),
        ("mask_entries", lambda x: total_sum(ad.mul(ad.mask_entries(x, mask), R)), (5, 5)),
        ("row_normalize", lambda x: total_sum(ad.mul(ad.row_normalize(ad.mul(x, x)), weights)), (5, 5)),
        ("normalized_gram", lambda x: total_sum(ad.mul(ad.normalized_gram(x), weights)), (5, 4)),
        ("pairwise_absdiff", lambda x: total_sum(ad.mul(ad.pairwise_absdiff(x), Tensor(np.arange(100.0).reshape(25, 4) / 50))), (5, 4)),
        ("nll_log_softmax", lambda x: ad.nll_log_softmax(x, [0, 3, 1, 1, 2]), (5, 4)),
    ]


@pytest.mark.parametrize("case", range(20))
def test_every_op_passes_finite_differences(case):
    rng = np.random.default_rng(100 + case)
    name, f, shape = _op_cases(rng)[case]
    worst = 0.0
    for _ in range(5):
        worst = max(worst, finite_diff_check(f, Tensor(_nonzero(rng, shape))))
    assert worst < 1e-4, name


def test_leaky_relu_gradient_at_100_points():
    rng = np.random.default_rng(7)
    x = Tensor(_nonzero(rng, (10, 10)))
    assert finite_diff_check(lambda t: total_sum(ad.mul(leaky_relu(t, 0.2), t)), x) < 1e-4


def test_tensor_rejects_rank3():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))


def test_nll_rejects_out_of_range_target():
    with pytest.raises(ValueError, match="out of range"):
        ad.nll_log_softmax(Tensor(np.zeros((1, 3))), [3])
