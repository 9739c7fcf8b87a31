"""Tensor and tape behavior: op semantics, backward rules, error paths."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grads_match
from stickformer import autograd as ag
from stickformer.autograd import (DomainError, NonFiniteError, ShapeError, Tape,
                                  TapeError, Tensor)


class TestElementwise:
    def test_add(self):
        out = ag.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_relu(self):
        out = ag.relu(Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ag.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extreme_inputs_stay_finite(self):
        out = ag.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0, abs=1e-12)
        assert out.data[1] == pytest.approx(1.0, abs=1e-12)

    def test_broadcast_trailing(self):
        out = ag.mul(Tensor(np.ones((3, 1))), Tensor(np.arange(4.0)))
        assert out.shape == (3, 4)

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError):
            ag.add(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0]))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ag.log(Tensor([1.0, -1.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            ag.div(Tensor([1.0]), Tensor([0.0]))

    def test_nan_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_overflow_detected(self):
        with pytest.raises(NonFiniteError):
            ag.exp(Tensor([1000.0]))


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ag.matmul(Tensor(np.eye(2)), Tensor(a))
        assert np.array_equal(out.data, a)

    def test_small_product(self):
        out = ag.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        assert np.array_equal(out.data, [[2.0]])

    def test_matches_triple_loop_oracle(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = ag.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - want)) < 1e-10

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_stabilized_against_overflow(self):
        out = ag.softmax(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_matches_extended_precision_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        vals = [1.0, 2.0, 3.0]
        exps = [mpmath.exp(v) for v in vals]
        total = sum(exps)
        want = np.array([float(e / total) for e in exps])
        got = ag.softmax(Tensor(vals)).data
        assert np.max(np.abs(got - want)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-300, max_value=300), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, values):
        out = ag.softmax(Tensor(values)).data
        assert np.all(out >= 0)
        assert abs(out.sum() - 1.0) <= 1e-12


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ag.parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            tape.backward(ag.tsum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = ag.parameter([1.0, 2.0])
        with Tape() as tape:
            tape.backward(ag.tsum(ag.mul(x, x)))
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_composite_graph_matches_finite_differences(self, rng):
        x = ag.parameter(rng.uniform(0.5, 1.5, size=(3, 4)))
        y = ag.parameter(rng.uniform(0.5, 1.5, size=(4, 2)))

        def f():
            z = ag.matmul(ag.sigmoid(x), y)
            return ag.tsum(ag.mul(ag.softmax(z, axis=-1), ag.exp(ag.neg(z))))
        assert_grads_match(f, [x, y])

    def test_shared_input_accumulates(self):
        x = ag.parameter([3.0])
        with Tape() as tape:
            tape.backward(ag.tsum(ag.add(ag.mul(x, x), x)))
        assert np.allclose(x.grad, [7.0])

    def test_unreachable_leaf_gets_zero_grad(self):
        x = ag.parameter([1.0, 2.0])
        y = ag.parameter([3.0])
        with Tape() as tape:
            ag.mul(y, 2.0)  # y participates but loss ignores it
            tape.backward(ag.tsum(x))
        assert np.array_equal(x.grad, [1.0, 1.0])
        assert np.array_equal(y.grad, [0.0])

    def test_backward_needs_scalar(self):
        x = ag.parameter([1.0, 2.0])
        with Tape() as tape:
            out = ag.mul(x, 2.0)
            with pytest.raises(TapeError):
                tape.backward(out)

    def test_double_backward_rejected(self):
        x = ag.parameter([1.0])
        with Tape() as tape:
            out = ag.tsum(x)
            tape.backward(out)
            with pytest.raises(TapeError):
                tape.backward(out)

    def test_reset_allows_reuse(self):
        x = ag.parameter([1.0])
        tape = Tape()
        with tape:
            out = ag.tsum(x)
            tape.backward(out)
        tape.reset()
        with tape:
            out = ag.tsum(ag.mul(x, 3.0))
            tape.backward(out)
        # 1 from the first pass + 3 from the second
        assert np.allclose(x.grad, [4.0])

    def test_no_tape_means_no_recording(self):
        x = ag.parameter([1.0])
        out = ag.mul(x, 2.0)
        assert not out.requires_grad


class TestMoversAndGathers:
    def test_getitem_backward_scatters(self):
        x = ag.parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            tape.backward(ag.tsum(x[0, 1:]))
        assert np.array_equal(x.grad, [[0, 1, 1], [0, 0, 0]])

    def test_take_accumulates_duplicates(self):
        x = ag.parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            tape.backward(ag.tsum(ag.take(x, np.array([0, 0, 2]))))
        assert np.array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_take_rows(self):
        x = ag.parameter(np.arange(6.0).reshape(3, 2))
        out = ag.take_rows(x, np.array([[2, 0], [2, 1]]))
        assert out.shape == (2, 2, 2)
        with Tape() as tape:
            tape.backward(ag.tsum(ag.take_rows(x, np.array([2, 2, 0]))))
        assert np.array_equal(x.grad, [[1, 1], [0, 0], [2, 2]])

    def test_concat_and_slice_roundtrip(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(4, 3))
        out = ag.concat([Tensor(a), Tensor(b)], axis=0)
        assert np.array_equal(out.data[:2], a)
        assert np.array_equal(out.data[2:], b)

    def test_pad2d(self):
        x = Tensor(np.ones((2, 2, 1)))
        out = ag.pad2d(x, 1)
        assert out.shape == (4, 4, 1)
        assert out.data.sum() == 4.0

    def test_mover_gradients(self, rng):
        x = ag.parameter(rng.normal(size=(4, 6)))
        proj = ag.constant(rng.normal(size=(3, 4, 2)))

        def f():
            r = ag.reshape(x, (3, 4, 2))
            t = ag.transpose(r, (1, 0, 2))
            back = ag.transpose(ag.concat([t[:2], t[2:]], axis=0), (1, 0, 2))
            return ag.tsum(ag.mul(back, proj))
        assert_grads_match(f, [x])


class TestReductions:
    def test_tuple_axis_sum_and_mean(self, rng):
        x = ag.parameter(rng.normal(size=(2, 3, 4)))
        got = ag.tsum(x, axis=(1, 2)).data
        assert np.allclose(got, x.data.sum(axis=(1, 2)))
        got = ag.tmean(x, axis=(0, 2)).data
        assert np.allclose(got, x.data.mean(axis=(0, 2)))
        with Tape() as tape:
            tape.backward(ag.tsum(ag.mul(ag.tmean(x, axis=(1, 2)), ag.constant([2.0, 3.0]))))
        want = np.zeros((2, 3, 4))
        want[0] = 2.0 / 12
        want[1] = 3.0 / 12
        assert np.allclose(x.grad, want)

    def test_keepdims(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        assert ag.tsum(x, axis=1, keepdims=True).shape == (3, 1)
        assert ag.tmean(x, axis=0, keepdims=True).shape == (1, 4)


class TestDeterminism:
    def test_identical_graphs_are_bit_identical(self, rng):
        data = rng.normal(size=(5, 5))

        def run():
            x = ag.parameter(data.copy())
            with Tape() as tape:
                loss = ag.tsum(ag.softmax(ag.matmul(x, x), axis=-1))
                tape.backward(loss)
            return loss.item(), x.grad.copy()
        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)
