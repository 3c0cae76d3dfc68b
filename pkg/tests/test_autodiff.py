import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capfuse import autodiff as ad
from capfuse.autodiff import (
    Adam,
    Parameter,
    Tensor,
    affine,
    concat_last,
    dropout,
    gather_rows,
    glu,
    grad_check,
    hadamard,
    log_softmax,
    matmul,
    no_grad,
    slice_last,
    softmax,
    softmax_xent,
    softmax_xent_rows,
)
from capfuse.errors import ConfigError, NumericError, ShapeError, StateError


def t(values, rg=True):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=rg)


def rand(rng, *shape):
    return Tensor(rng.uniform(-2.0, 2.0, shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = t(np.eye(2))
        b = t([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_projection(self):
        a = t([[1.0, 0.0], [0.0, 0.0]])
        b = t([[5.0], [7.0]])
        assert np.array_equal(matmul(a, b).data, [[5.0], [0.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        a, b = rand(rng, 3, 4), rand(rng, 4, 2)
        err = grad_check(lambda x, y: matmul(x, y).sum(), [a, b])
        assert err <= 1e-6

    def test_vector_cases(self):
        rng = np.random.default_rng(1)
        v, m = rand(rng, 4), rand(rng, 4, 3)
        assert matmul(v, m).shape == (3,)
        assert grad_check(lambda x, y: matmul(x, y).sum(), [v, m]) <= 1e-6
        m2, v2 = rand(rng, 3, 4), rand(rng, 4)
        assert matmul(m2, v2).shape == (3,)
        assert grad_check(lambda x, y: matmul(x, y).sum(), [m2, v2]) <= 1e-6


class TestAffine:
    def test_zero_weights(self):
        x = t([1.0, 1.0])
        w = t(np.zeros((2, 2)))
        b = t([3.0, 3.0])
        assert np.array_equal(affine(x, w, b).data, [3.0, 3.0])

    def test_hand_computation(self):
        x = t([2.0])
        w = t([[1.0, -1.0]])
        b = t([0.0, 0.0])
        assert np.array_equal(affine(x, w, b).data, [2.0, -2.0])

    def test_bias_broadcast_rows(self):
        x = t(np.ones((3, 2)))
        w = t(np.eye(2))
        b = t([1.0, -1.0])
        out = affine(x, w, b)
        assert np.array_equal(out.data, np.tile([2.0, 0.0], (3, 1)))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, w, b = rand(rng, 3, 4), rand(rng, 4, 2), rand(rng, 2)
        err = grad_check(lambda *a: affine(*a).sum(), [x, w, b])
        assert err <= 1e-6


class TestConcat:
    def test_basic(self):
        out = concat_last(t([1.0, 2.0]), t([3.0]))
        assert np.array_equal(out.data, [1.0, 2.0, 3.0])

    def test_rejects_empty_last_axis(self):
        with pytest.raises(ShapeError):
            concat_last(t(np.ones(0)), t([1.0]))

    def test_gradient_splits(self):
        rng = np.random.default_rng(3)
        a, b = rand(rng, 2, 3), rand(rng, 2, 2)
        err = grad_check(
            lambda x, y: (concat_last(x, y) * concat_last(x, y)).sum(), [a, b]
        )
        assert err <= 1e-6

    def test_split_recovers_inputs(self):
        rng = np.random.default_rng(4)
        a, b = rand(rng, 2, 3), rand(rng, 2, 2)
        cat = concat_last(a, b)
        assert np.array_equal(slice_last(cat, 0, 3).data, a.data)
        assert np.array_equal(slice_last(cat, 3, 5).data, b.data)


class TestHadamard:
    def test_annihilator(self):
        assert np.array_equal(hadamard(t([1.0, 2.0]), t([0.0, 0.0])).data, [0.0, 0.0])

    def test_values(self):
        assert np.array_equal(hadamard(t([2.0, 3.0]), t([4.0, 5.0])).data, [8.0, 15.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hadamard(t([1.0, 2.0]), t([1.0, 2.0, 3.0]))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        a, b = rand(rng, 3, 3), rand(rng, 3, 3)
        assert grad_check(lambda x, y: hadamard(x, y).sum(), [a, b]) <= 1e-6


class TestActivations:
    def test_relu_values(self):
        assert np.array_equal(t([-1.0, 0.0, 2.0]).relu().data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert t([0.0]).sigmoid().data[0] == pytest.approx(0.5)

    def test_sigmoid_extreme_inputs_finite(self):
        out = t([-1000.0, 1000.0]).sigmoid()
        assert np.isfinite(out.data).all()

    def test_tanh_gradient(self):
        rng = np.random.default_rng(6)
        x = rand(rng, 4)
        assert grad_check(lambda a: a.tanh().sum(), [x]) <= 1e-6

    def test_relu_gradient_away_from_kink(self):
        x = t([-1.5, -0.2, 0.4, 1.9])
        assert grad_check(lambda a: (a.relu() * a.relu()).sum(), [x]) <= 1e-6

    def test_relu_derivative_at_zero_is_zero(self):
        x = t([0.0])
        y = x.relu().sum()
        y.backward()
        assert x.grad[0] == 0.0


class TestGlu:
    def test_zero_gate_half(self):
        out = glu(t([2.0, 4.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1.0, 2.0])

    def test_zero_value_half(self):
        out = glu(t([0.0, 0.0, 9.0, 9.0]))
        assert np.array_equal(out.data, [0.0, 0.0])

    def test_odd_dimension_rejected(self):
        with pytest.raises(ShapeError):
            glu(t([1.0, 2.0, 3.0]))

    def test_halves_dimension(self):
        assert glu(t(np.ones((3, 8)))).shape == (3, 4)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = rand(rng, 2, 6)
        assert grad_check(lambda a: glu(a).sum(), [x]) <= 1e-6


class TestSoftmaxXent:
    def test_uniform_logits(self):
        loss = softmax_xent(t(np.zeros(4)), 2)
        assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)

    def test_saturated(self):
        logits = np.zeros(5)
        logits[3] = 1e3
        assert softmax_xent(t(logits), 3).item() == pytest.approx(0.0, abs=1e-9)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_xent(t(np.zeros(4)), 4)

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(8)
        x = rand(rng, 6)
        loss = softmax_xent(x, 1)
        loss.backward()
        expect = softmax(x.data).copy()
        expect[1] -= 1.0
        assert np.allclose(x.grad, expect, atol=1e-12)
        x2 = Tensor(x.data.copy(), requires_grad=True)
        assert grad_check(lambda a: softmax_xent(a, 1), [x2]) <= 1e-6

    def test_rows_variant_matches_single(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(3, 5))
        targets = np.array([0, 4, 2])
        rows = softmax_xent_rows(t(logits), targets)
        for i in range(3):
            single = softmax_xent(t(logits[i]), int(targets[i]))
            assert rows.data[i] == pytest.approx(single.item(), abs=1e-12)

    def test_rows_gradient(self):
        rng = np.random.default_rng(10)
        x = rand(rng, 3, 5)
        targets = np.array([1, 0, 3])
        err = grad_check(lambda a: softmax_xent_rows(a, targets).sum(), [x])
        assert err <= 1e-6

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            logits = rng.normal(scale=3.0, size=7)
            assert softmax_xent(t(logits), int(rng.integers(7))).item() >= 0.0

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=9))
    @settings(max_examples=60, deadline=None)
    def test_softmax_rows_sum_to_one(self, logits):
        p = softmax(np.asarray(logits))
        assert abs(p.sum() - 1.0) <= 1e-12

    def test_log_softmax_matches_naive(self):
        x = np.array([1.0, 2.0, 3.0])
        naive = np.log(np.exp(x) / np.exp(x).sum())
        assert np.allclose(log_softmax(x), naive, atol=1e-12)


class TestDropout:
    def test_rate_zero_identity(self):
        x = t([1.0, 2.0])
        out = dropout(x, 0.0, training=True, rng=np.random.default_rng(0))
        assert out is x

    def test_inference_identity(self):
        x = t([1.0, 2.0])
        out = dropout(x, 0.9, training=False, rng=np.random.default_rng(0))
        assert out is x

    def test_invalid_rate(self):
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ConfigError):
                dropout(t([1.0]), bad, training=True, rng=np.random.default_rng(0))

    def test_empirical_drop_fraction(self):
        rng = np.random.default_rng(12)
        x = Tensor(np.ones(1_000_000))
        out = dropout(x, 0.3, training=True, rng=rng)
        dropped = float((out.data == 0.0).mean())
        assert abs(dropped - 0.3) <= 0.01

    def test_survivors_scaled(self):
        rng = np.random.default_rng(13)
        out = dropout(Tensor(np.ones(1000)), 0.25, training=True, rng=rng)
        kept = out.data[out.data != 0.0]
        assert np.allclose(kept, 1.0 / 0.75)

    def test_gradient_with_fixed_mask(self):
        x = t(np.linspace(-1.0, 1.0, 8))

        def f(a):
            return dropout(a, 0.5, training=True, rng=np.random.default_rng(99)).sum()

        assert grad_check(f, [x]) <= 1e-6


class TestAdam:
    def test_frozen_parameter_unchanged(self):
        p = Parameter("w", np.array([1.0, 2.0]), frozen=True)
        p.grad = np.array([5.0, 5.0])
        before = p.data.copy()
        Adam([p], lr=0.1).step()
        assert np.array_equal(p.data, before)
        assert p.grad is None

    def test_first_step_hand_derived(self):
        # One Adam step with g=1, lr=0.1: m_hat=1, v_hat=1, so the update is
        # -0.1/(1+eps), slightly smaller in magnitude than 0.1.
        p = Parameter("w", np.array([0.0]))
        p.grad = np.array([1.0])
        opt = Adam([p], lr=0.1)
        opt.step()
        expected = -0.1 * 1.0 / (1.0 + opt.eps)
        assert p.data[0] == pytest.approx(expected, abs=1e-15)
        assert abs(p.data[0] + 0.1) < 1e-8

    def test_hand_executed_recurrence_three_steps(self):
        rng = np.random.default_rng(14)
        p = Parameter("w", rng.normal(size=4))
        shadow = p.data.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        opt = Adam([p], lr=0.01)
        for step in range(1, 4):
            g = rng.normal(size=4)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1 - 0.9 ** step)
            v_hat = v / (1 - 0.999 ** step)
            shadow -= 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8)
            assert np.allclose(p.data, shadow, atol=1e-15)

    def test_missing_gradient_raises(self):
        p = Parameter("w", np.array([1.0]))
        with pytest.raises(StateError, match="w"):
            Adam([p]).step()

    def test_two_runs_bit_identical(self):
        def run():
            rng = np.random.default_rng(15)
            p = Parameter("w", np.zeros(6))
            opt = Adam([p], lr=0.05)
            for _ in range(10):
                p.grad = rng.normal(size=6)
                opt.step()
            return p.data

        assert np.array_equal(run(), run())

    def test_step_counter_increments(self):
        p = Parameter("w", np.array([0.0]))
        opt = Adam([p])
        assert opt.t == 0
        for k in range(1, 4):
            p.grad = np.array([1.0])
            opt.step()
            assert opt.t == k


class TestGradCheck:
    def test_quadratic(self):
        x = t([1.0, 2.0])
        assert grad_check(lambda a: (a * a).sum(), [x]) <= 1e-8

    def test_constant_function(self):
        x = t([1.0, 2.0])
        c = Tensor(np.array(3.0))
        assert grad_check(lambda a: (a * 0.0).sum() + c.item(), [x]) == 0.0

    def test_nonfinite_raises(self):
        x = t([1.0])

        def f(a):
            return Tensor(np.array(np.inf), requires_grad=True)

        with pytest.raises(NumericError):
            grad_check(f, [x])


class TestGraphMechanics:
    def test_backward_requires_scalar(self):
        x = t([1.0, 2.0])
        with pytest.raises(StateError):
            (x * x).backward()

    def test_grad_accumulates_over_reuse(self):
        x = t([3.0])
        y = (x * x).sum() + x.sum()
        y.backward()
        assert x.grad[0] == pytest.approx(7.0)

    def test_no_grad_suppresses_graph(self):
        x = t([1.0, 2.0])
        with no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        assert y._backward is None

    def test_non_required_leaf_gets_no_grad(self):
        x = t([1.0, 2.0])
        c = Tensor(np.array([4.0, 5.0]))
        ((x * c).sum()).backward()
        assert c.grad is None
        assert x.grad is not None

    def test_gather_rows_gradient(self):
        table = Parameter("e", np.arange(12, dtype=np.float64).reshape(4, 3))
        ids = np.array([1, 1, 3])
        out = gather_rows(table, ids)
        out.sum().backward()
        expect = np.zeros((4, 3))
        expect[1] = 2.0
        expect[3] = 1.0
        assert np.array_equal(table.grad, expect)

    def test_deep_graph_iterative_topo(self):
        x = t([1.0])
        y = x
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    @given(
        st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
        st.integers(0, 2 ** 31 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_random_composite_gradients(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        x, w, b = rand(rng, m, k), rand(rng, k, n), rand(rng, n)

        def f(xx, ww, bb):
            out = affine(xx, ww, bb).tanh()
            return (out * out).sum()

        assert grad_check(f, [x, w, b]) <= 1e-4


def test_params_checksum_sensitivity():
    p1 = Parameter("a", np.array([1.0, 2.0]))
    p2 = Parameter("b", np.array([3.0]))
    base = ad.params_checksum([p1, p2])
    assert ad.params_checksum([p2, p1]) == base  # order independent
    p1.data[0] = 1.0 + 1e-15
    assert ad.params_checksum([p1, p2]) != base
