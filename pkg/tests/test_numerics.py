import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnelkit.errors import ConfigError, ShapeError, UsageError
from funnelkit.numerics import (
    GradTape,
    Tensor,
    add,
    count_matmul_flops,
    cross_entropy,
    gather,
    gelu,
    matmul,
    maximum,
    mean_all,
    mul,
    parameter,
    reshape,
    rmsnorm,
    scale,
    softmax_lastdim,
    sum_all,
    transpose,
)

from helpers import brute_matmul, fd_check


class TestMatmul:
    def test_scalar(self):
        assert matmul([[2.0]], [[3.0]]).data.tolist() == [[6.0]]

    def test_identity(self):
        a = np.random.default_rng(1).normal(size=(3, 3))
        np.testing.assert_array_equal(matmul(a, np.eye(3)).data, a)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
        np.testing.assert_allclose(matmul(a, b).data, brute_matmul(a, b), rtol=0, atol=1e-12)

    def test_mismatch(self):
        with pytest.raises(ConfigError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_flop_tally(self):
        with count_matmul_flops() as tally:
            matmul(np.ones((2, 4, 5)), np.ones((5, 3)))
        assert tally[0] == 2 * 2 * 4 * 3 * 5


class TestSoftmax:
    def test_uniform(self):
        out = softmax_lastdim(np.zeros((1, 1, 3))).data[0, 0]
        np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_dominance(self):
        out = softmax_lastdim(np.array([[[1000.0, 0.0]]])).data[0, 0]
        assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12

    def test_masked_matches_direct_evaluation(self):
        x = np.array([[[1.0, 2.0, 3.0]]])
        out = softmax_lastdim(x, np.array([True, True, False])).data[0, 0]
        e = np.array([np.e ** 1, np.e ** 2])
        np.testing.assert_allclose(out[:2], e / e.sum(), rtol=0, atol=1e-12)
        assert out[2] == 0.0

    def test_empty_row(self):
        with pytest.raises(ShapeError, match="empty attention row"):
            softmax_lastdim(np.zeros((1, 1, 2)), np.array([False, False]))

    def test_mask_length(self):
        with pytest.raises(ShapeError):
            softmax_lastdim(np.zeros((1, 1, 3)), np.array([True, True]))

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=8),
        st.lists(st.booleans(), min_size=8, max_size=8),
    )
    def test_rows_sum_to_one(self, vals, flags):
        x = np.array(vals)[None, None, :]
        mask = np.array(flags[: len(vals)])
        mask[0] = True
        p = softmax_lastdim(x, mask).data[0, 0]
        assert (p >= 0).all()
        assert abs(p[mask].sum() - 1.0) < 1e-12
        assert (p[~mask] == 0).all()


class TestRmsnorm:
    def test_unit_rms(self):
        out = rmsnorm(np.ones((1, 2, 4)), np.ones(4), eps=0.0).data
        np.testing.assert_array_equal(out, np.ones((1, 2, 4)))

    def test_zero_vector(self):
        out = rmsnorm(np.zeros((1, 1, 4)), np.ones(4), eps=1e-6).data
        np.testing.assert_array_equal(out, np.zeros((1, 1, 4)))

    def test_formula(self):
        rng = np.random.default_rng(3)
        x, g = rng.normal(size=(2, 3, 5)), rng.normal(size=5)
        expected = np.empty_like(x)
        for i in range(2):
            for j in range(3):
                v = x[i, j]
                expected[i, j] = v / np.sqrt(sum(t * t for t in v) / 5 + 1e-6) * g
        np.testing.assert_allclose(rmsnorm(x, g, 1e-6).data, expected, rtol=0, atol=1e-12)

    def test_gain_shape(self):
        with pytest.raises(ShapeError):
            rmsnorm(np.ones((1, 1, 4)), np.ones(3))


class TestBackward:
    def test_sum_gives_ones(self):
        w = parameter(np.arange(6.0).reshape(2, 3), "w")
        with GradTape() as tape:
            loss = sum_all(w)
        np.testing.assert_array_equal(tape.backward(loss)["w"], np.ones((2, 3)))

    def test_half_square_gives_params(self):
        w = parameter(np.random.default_rng(4).normal(size=(3, 2)), "w")
        with GradTape() as tape:
            loss = scale(sum_all(mul(w, w)), 0.5)
        np.testing.assert_allclose(tape.backward(loss)["w"], w.data, rtol=0, atol=1e-15)

    def test_backward_before_forward(self):
        with pytest.raises(UsageError):
            GradTape().backward(Tensor(1.0))

    def test_backward_on_foreign_value(self):
        w = parameter(np.ones(2), "w")
        with GradTape() as tape:
            sum_all(w)
        with pytest.raises(UsageError):
            tape.backward(Tensor(0.0))

    def test_reverse_order_and_shapes(self):
        rng = np.random.default_rng(5)
        a = parameter(rng.normal(size=(3, 4)), "a")
        b = parameter(rng.normal(size=(4,)), "b")
        with GradTape() as tape:
            loss = sum_all(gelu(add(a, b)))
        grads = tape.backward(loss)
        assert grads["a"].shape == a.shape and grads["b"].shape == b.shape
        assert [r.out for r in tape.records][-1] is loss

    def test_no_tape_no_record(self):
        w = parameter(np.ones(2), "w")
        out = sum_all(w)
        assert out.is_leaf


def _fd(loss_fn, params, n=10):
    worst, checked = fd_check(loss_fn, params, n_coords=n)
    assert checked >= 10
    assert worst < 1e-4, worst


class TestFiniteDifferences:
    rng = np.random.default_rng(6)

    def test_matmul_batched(self):
        p = {"a": parameter(self.rng.normal(size=(2, 3, 4)), "a"), "b": parameter(self.rng.normal(size=(4, 5)), "b")}
        _fd(lambda: sum_all(mul(matmul(p["a"], p["b"]), matmul(p["a"], p["b"]))), p)

    def test_softmax_masked(self):
        p = {"x": parameter(self.rng.normal(size=(2, 3, 4)), "x"), "w": parameter(self.rng.normal(size=(2, 3, 4)), "w")}
        mask = np.array([True, False, True, True])
        _fd(lambda: sum_all(mul(softmax_lastdim(p["x"], mask), p["w"])), p)

    def test_rmsnorm(self):
        p = {"x": parameter(self.rng.normal(size=(2, 3, 4)), "x"), "g": parameter(self.rng.normal(size=4), "g")}
        w = self.rng.normal(size=(2, 3, 4))
        _fd(lambda: sum_all(mul(rmsnorm(p["x"], p["g"]), w)), p)

    def test_gelu_maximum(self):
        p = {"x": parameter(self.rng.normal(size=(3, 4)), "x"), "y": parameter(self.rng.normal(size=(3, 4)), "y")}
        _fd(lambda: sum_all(mul(gelu(maximum(p["x"], p["y"])), p["x"])), p)

    def test_gather_reshape_transpose(self):
        p = {"t": parameter(self.rng.normal(size=(5, 4)), "t")}
        ids = np.array([[0, 3, 3], [1, 4, 0]])
        w = self.rng.normal(size=(2, 4, 3))
        _fd(lambda: sum_all(mul(transpose(reshape(gather(p["t"], ids), (2, 3, 4)), (0, 2, 1)), w)), p)

    def test_cross_entropy(self):
        p = {"z": parameter(self.rng.normal(size=(2, 3, 5)), "z")}
        t = np.array([[0, 4, 2], [1, 1, 3]])
        w = np.array([[1, 0, 1], [1, 1, 0]])
        _fd(lambda: cross_entropy(p["z"], t, w), p)

    def test_mean(self):
        p = {"z": parameter(self.rng.normal(size=(3, 3)), "z")}
        _fd(lambda: mean_all(mul(p["z"], p["z"])), p)


def test_determinism():
    rng = np.random.default_rng(7)
    x, g = rng.normal(size=(2, 5, 8)), rng.normal(size=8)
    a = softmax_lastdim(matmul(rmsnorm(x, g), np.ones((8, 8)))).data
    b = softmax_lastdim(matmul(rmsnorm(x, g), np.ones((8, 8)))).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        mul(np.array([1e308]), np.array([1e308]))


def test_per_op_checks_can_be_disabled_per_thread():
    from funnelkit.numerics import per_op_finite_checks

    with per_op_finite_checks(False), np.errstate(all="ignore"):
        out = mul(Tensor([1e308]), Tensor([10.0]))
    assert np.isinf(out.data).all()
    with pytest.raises(FloatingPointError), np.errstate(all="ignore"):
        mul(Tensor([1e308]), Tensor([10.0]))
