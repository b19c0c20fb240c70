import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ppltape.autodiff import Parameter, ParamStore, Tape, backward, grad_check, ops
from ppltape.autodiff.gradcheck import relative_error
from ppltape.autodiff.ops import unbroadcast
from ppltape.errors import NonDeterministicError, ShapeError, TapeError

finite = st.floats(-5.0, 5.0, allow_nan=False, allow_infinity=False)


class TestForward:
    def test_matmul_shape(self):
        with Tape():
            out = ops.matmul(np.ones((2, 3)), np.ones((3, 4)))
        assert out.shape == (2, 4)

    def test_softplus_zero(self):
        with Tape():
            assert float(ops.softplus(0.0).data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_softplus_is_stable_for_large_inputs(self):
        with Tape():
            out = ops.softplus(np.array([-800.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 800.0], atol=1e-300)

    def test_gather_rows(self):
        with Tape():
            out = ops.gather(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), np.array([2, 0]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [1.0, 2.0]])

    def test_gather_rejects_bad_indices(self):
        with Tape():
            with pytest.raises(IndexError):
                ops.gather(np.ones((3, 2)), np.array([3]))
            with pytest.raises(ShapeError, match="integers"):
                ops.gather(np.ones((3, 2)), np.array([0.5]))

    def test_logsumexp_is_overflow_safe(self):
        with Tape():
            out = ops.logsumexp(np.array([1000.0, 1000.0]), axis=0)
        assert float(out.data) == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_incompatible_shapes_raise(self):
        with Tape():
            with pytest.raises(ShapeError):
                ops.add(np.ones(3), np.ones(4))
            with pytest.raises(ShapeError):
                ops.reshape(np.ones(6), (4, 2))
            with pytest.raises(ShapeError):
                ops.broadcast_to(np.ones(3), (3, 2))

    def test_one_hot(self):
        with Tape():
            out = ops.one_hot(np.array([2, 0]), 3)
        np.testing.assert_array_equal(out.data, [[0, 0, 1], [1, 0, 0]])

    def test_operator_overloads(self):
        p = Parameter("p", [1.0, 2.0])
        with Tape():
            out = (2.0 * p + 1.0) / p - p ** 2
            np.testing.assert_allclose(out.data, [2.0, -1.5])
            np.testing.assert_allclose((np.ones(2) @ p).data, 3.0)


class TestBackward:
    def test_sigmoid_at_zero(self):
        p = Parameter("p", 0.0)
        with Tape() as tape:
            grads = tape.backward(ops.sigmoid(p))
        assert float(grads[p]) == pytest.approx(0.25, abs=1e-15)

    def test_sum_of_squares(self):
        p = Parameter("p", [1.0, 2.0, 3.0])
        with Tape() as tape:
            grads = tape.backward(ops.sum(p * p))
        np.testing.assert_allclose(grads[p], [2.0, 4.0, 6.0])

    def test_logsumexp_two_way(self):
        p = Parameter("p", 0.0)
        with Tape() as tape:
            root = ops.logsumexp(ops.concat([ops.reshape(p, (1,)), np.zeros(1)]), axis=0)
            grads = tape.backward(root)
        assert float(grads[p]) == pytest.approx(0.5, abs=1e-12)

    def test_constant_only_root_gives_empty_map(self):
        with Tape() as tape:
            root = ops.sum(tape.constant(np.ones(3)) * 2.0)
            assert tape.backward(root) == {}

    def test_non_scalar_root_rejected(self):
        p = Parameter("p", np.ones(2))
        with Tape() as tape:
            with pytest.raises(ShapeError):
                tape.backward(p * 2.0)

    def test_module_level_backward(self):
        p = Parameter("p", 3.0)
        with Tape():
            grads = backward(p * p)
        assert float(grads[p]) == 6.0

    def test_reused_parameter_accumulates(self):
        p = Parameter("p", 2.0)
        with Tape() as tape:
            grads = tape.backward(p * p + 3.0 * p)
        assert float(grads[p]) == 7.0

    def test_untrainable_parameter_has_no_gradient(self):
        p = Parameter("p", 2.0, trainable=False)
        q = Parameter("q", 1.0)
        with Tape() as tape:
            grads = tape.backward(p * q)
        assert p not in grads and float(grads[q]) == 2.0

    def test_watch_and_gradients(self):
        with Tape() as tape:
            x = tape.watch(np.array([1.0, -2.0]))
            (g,) = tape.gradients(ops.sum(ops.square(x)), [x])
        np.testing.assert_allclose(g, [2.0, -4.0])

    def test_stop_gradient_blocks_flow(self):
        p = Parameter("p", 2.0)
        with Tape() as tape:
            grads = tape.backward(ops.stop_gradient(p * p) * p)
        assert float(grads[p]) == 4.0

    def test_gather_index_receives_no_gradient(self):
        a = Parameter("a", np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            idx = tape.watch(np.array([0.0, 0.0, 2.0]))
            out = ops.sum(ops.gather(a, idx))
            grads = tape.backward(out)
            (gi,) = tape.gradients(out, [idx])
        np.testing.assert_array_equal(grads[a], [[2, 2], [0, 0], [1, 1]])
        np.testing.assert_array_equal(gi, np.zeros(3))


class TestTapeState:
    def test_values_from_other_tape_rejected(self):
        with Tape() as t1:
            x = t1.constant(1.0)
        with Tape():
            with pytest.raises(TapeError):
                ops.add(x, 1.0)

    def test_no_active_tape(self):
        with pytest.raises(TapeError, match="no active tape"):
            ops.exp(1.0)

    def test_nested_tapes_restore(self):
        with Tape() as outer:
            with Tape() as inner:
                assert ops.exp(0.0).tape is inner
            assert ops.exp(0.0).tape is outer

    def test_freeze_makes_parameter_constant(self):
        p, q = Parameter("p", 1.0), Parameter("q", 2.0)
        with Tape() as tape:
            tape.freeze([p])
            grads = tape.backward(p * q)
        assert p not in grads and float(grads[q]) == 1.0

    def test_freeze_after_read_rejected(self):
        p = Parameter("p", 1.0)
        with Tape() as tape:
            _ = p * 2.0
            with pytest.raises(TapeError):
                tape.freeze([p])

    def test_watching_params(self):
        p, q = Parameter("p", 1.0), Parameter("q", 2.0)
        with Tape() as tape:
            _ = p + 1.0
            with tape.watching_params() as seen:
                _ = q * p
        assert seen == {p, q}

    def test_descendants(self):
        with Tape() as tape:
            a = tape.constant(1.0)
            b = tape.constant(2.0)
            c = a * 2.0
            d = b + 1.0
            e = c + d
            mask = tape.descendants(a)
        assert mask[c.index] and mask[e.index]
        assert not mask[b.index] and not mask[d.index]

    def test_parameter_assign_shape_checked(self):
        p = Parameter("p", np.zeros(3))
        with pytest.raises(ShapeError):
            p.assign(np.zeros(4))
        p.assign([1.0, 2.0, 3.0])
        assert not p.value.flags.writeable

    def test_param_store(self):
        store = ParamStore()
        p = store.create("w", np.ones(2))
        with pytest.raises(KeyError):
            store.create("w", 0.0)
        snap = store.snapshot()
        p.assign([5.0, 5.0])
        store.restore(snap)
        np.testing.assert_array_equal(store["w"].value, [1.0, 1.0])
        assert len(store) == 1 and "w" in store

    def test_rebuilding_is_bit_identical(self):
        p = Parameter("p", np.array([0.3, -1.2]))

        def build():
            rng = np.random.default_rng(0)
            with Tape() as tape:
                root = ops.sum(ops.tanh(p * rng.normal(size=2)) ** 2)
                return tape.ops, float(root.data), tape.backward(root)[p]

        a, b = build(), build()
        assert a[0] == b[0] and a[1] == b[1]
        np.testing.assert_array_equal(a[2], b[2])


class TestGradCheck:
    def test_detects_wrong_gradient(self):
        p = Parameter("p", np.array([0.7]))

        def builder():
            # the recorded vjp is deliberately wrong by a factor 2
            v = ops.lift(p)
            return ops.sum(v.tape.record("bad", (v,), v.data ** 2, lambda g: (g * 4 * v.data,)))

        assert not grad_check(builder, [p]).passed

    def test_nondeterministic_builder_rejected(self):
        p = Parameter("p", 1.0)
        rng = np.random.default_rng(0)
        with pytest.raises(NonDeterministicError):
            grad_check(lambda: p * rng.normal(), [p])

    def test_maximum_checked_away_from_kink(self):
        p = Parameter("p", np.array([-0.5, 0.5]))
        assert grad_check(lambda: ops.sum(ops.relu(p)), [p]).passed

    def test_relative_error_floor(self):
        np.testing.assert_allclose(relative_error(np.array([1e-9]), np.array([0.0])), 1e-5)


class TestBroadcastProperties:
    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                      elements=finite))
    def test_unbroadcast_equals_sum_over_stretched_axes(self, g):
        # pick a target shape that broadcasts to g.shape by collapsing some axes
        shape = tuple(1 if i % 2 == 0 else n for i, n in enumerate(g.shape))
        expected = g.sum(axis=tuple(i for i in range(g.ndim) if shape[i] == 1 and g.shape[i] != 1),
                         keepdims=True).reshape(shape)
        np.testing.assert_allclose(unbroadcast(g, shape), expected)
        np.testing.assert_allclose(unbroadcast(g, shape[1:]), expected.sum(axis=0)
                                   if g.ndim > 0 else expected)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (3, 4), elements=finite),
           hnp.arrays(np.float64, (4,), elements=finite))
    def test_broadcast_add_mul_gradients(self, a0, b0):
        a, b = Parameter("a", a0), Parameter("b", b0)
        with Tape() as tape:
            grads = tape.backward(ops.sum(a * b + a))
        np.testing.assert_allclose(grads[a], np.broadcast_to(b0, (3, 4)) + 1.0)
        np.testing.assert_allclose(grads[b], a0.sum(axis=0))

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (2, 3), elements=finite))
    def test_log_softmax_gradient_sums_to_zero(self, x0):
        x = Parameter("x", x0)
        w = np.array([1.0, -2.0, 0.5])
        with Tape() as tape:
            grads = tape.backward(ops.sum(ops.log_softmax(x) * w))
        # each row of log_softmax is invariant to adding a constant
        np.testing.assert_allclose(grads[x].sum(axis=1), 0.0, atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.float64, (4,), elements=finite))
    def test_tanh_matches_finite_differences(self, x0):
        x = Parameter("x", x0)
        report = grad_check(lambda: ops.sum(ops.tanh(x) * np.arange(1.0, 5.0)), [x])
        assert report.max_error <= 1e-6
