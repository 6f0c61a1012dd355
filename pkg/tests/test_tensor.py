"""Unit tests for the tensor/autograd core: frozen examples, gradient checks,
tape semantics, and determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from g2sd import tensor as T
from _gradcheck import gradcheck, rand_tensor


def t64(data, requires_grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestExamples:
    def test_matmul_identity(self):
        out = T.matmul(t64([[1.0, 0.0], [0.0, 1.0]]), t64([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])

    def test_matmul_hand_expansion(self):
        # [[1,2]] . [[3],[4]] = 1*3 + 2*4 = 11
        out = T.matmul(t64([[1.0, 2.0]]), t64([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_matmul_shape_error_reports_both_shapes(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))

    def test_layer_norm_example(self):
        # (x - 2.5) / sqrt(1.25) at 64-bit
        out = T.layer_norm(t64([1.0, 2.0, 3.0, 4.0]), eps=1e-6)
        expect = [-1.34164, -0.44721, 0.44721, 1.34164]
        np.testing.assert_allclose(out.data, expect, atol=1e-4)

    def test_layer_norm_constant_vector(self):
        out = T.layer_norm(t64([5.0, 5.0, 5.0]), eps=1e-6)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-6)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(7)
        out = T.layer_norm(t64(rng.normal(size=(6, 37))), eps=1e-6).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_cross_entropy_saturated_correct_class(self):
        loss = T.softmax_cross_entropy(t64([[1000.0, 0.0]]), np.array([0]))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_cross_entropy_uniform_logits(self):
        # analytic -ln(1/4)
        loss = T.softmax_cross_entropy(t64([[0.0, 0.0, 0.0, 0.0]]), np.array([2]))
        assert loss.item() == pytest.approx(math.log(4.0), rel=1e-6)

    def test_cross_entropy_smoothing_insensitive_at_uniform_logits(self):
        # brute-force sum of smoothed target x log-softmax
        logits = np.array([[0.0, 0.0]])
        plain = T.softmax_cross_entropy(t64(logits), np.array([1]), smoothing=0.0)
        smooth = T.softmax_cross_entropy(t64(logits), np.array([1]), smoothing=0.1)
        target = np.array([0.05, 0.95])
        brute = -(target * (logits[0] - math.log(2.0))).sum()
        assert smooth.item() == pytest.approx(plain.item(), rel=1e-9)
        assert smooth.item() == pytest.approx(brute, rel=1e-9)

    def test_cross_entropy_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(t64([[0.0, 0.0]]), np.array([2]))

    def test_smooth_l1_values(self):
        xs = t64([0.0, 0.5, 2.0, -2.0])
        out = T.smooth_l1(xs, delta=1.0)
        np.testing.assert_allclose(out.data, [0.0, 0.125, 1.5, 1.5], rtol=1e-12)

    def test_smooth_l1_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            T.smooth_l1(t64([1.0]), delta=0.0)

    def test_smooth_l1_derivative_continuous_at_delta(self):
        delta = 1.0
        lo, hi = t64([delta - 1e-9], requires_grad=True), t64([delta + 1e-9], requires_grad=True)
        with T.tape() as tp:
            loss = T.add(T.smooth_l1(lo, delta).sum(), T.smooth_l1(hi, delta).sum())
            tp.backward(loss)
        assert lo.grad[0] == pytest.approx(hi.grad[0], abs=1e-8)


OPS = {
    "add": lambda rng: (T.add, [rand_tensor(rng, (3, 4)), rand_tensor(rng, (3, 4))]),
    "add_broadcast": lambda rng: (T.add, [rand_tensor(rng, (2, 3, 4)), rand_tensor(rng, (4,))]),
    "sub": lambda rng: (T.sub, [rand_tensor(rng, (5,)), rand_tensor(rng, (2, 5))]),
    "mul": lambda rng: (T.mul, [rand_tensor(rng, (2, 3)), rand_tensor(rng, (2, 3))]),
    "mul_broadcast": lambda rng: (T.mul, [rand_tensor(rng, (2, 3, 1)), rand_tensor(rng, (3, 4))]),
    "div": lambda rng: (T.div, [rand_tensor(rng, (3, 3)),
                                T.Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True, dtype=np.float64)]),
    "neg": lambda rng: (T.neg, [rand_tensor(rng, (4, 2))]),
    "matmul": lambda rng: (T.matmul, [rand_tensor(rng, (3, 4)), rand_tensor(rng, (4, 2))]),
    "matmul_batched": lambda rng: (T.matmul, [rand_tensor(rng, (2, 2, 3, 4)), rand_tensor(rng, (4, 5))]),
    "reshape": lambda rng: (lambda x: T.reshape(x, (6, 2)), [rand_tensor(rng, (3, 4))]),
    "transpose": lambda rng: (lambda x: T.transpose(x, (1, 2, 0)), [rand_tensor(rng, (2, 3, 4))]),
    "transpose_default": lambda rng: (T.transpose, [rand_tensor(rng, (2, 3, 4))]),
    "concat": lambda rng: (lambda a, b: T.concat([a, b], axis=1),
                           [rand_tensor(rng, (2, 3)), rand_tensor(rng, (2, 2))]),
    "getitem": lambda rng: (lambda x: x[:, 1:3], [rand_tensor(rng, (3, 5))]),
    "getitem_int": lambda rng: (lambda x: x[:, 0], [rand_tensor(rng, (3, 5))]),
    "gather_rows": lambda rng: (
        lambda x: T.gather_rows(x, np.array([[0, 2, 2], [1, 0, 3]])),
        [rand_tensor(rng, (2, 4, 3))]),
    "scatter_rows": lambda rng: (
        lambda v: T.scatter_rows(v, np.array([[3, 0], [1, 2]]), 5),
        [rand_tensor(rng, (2, 2, 3))]),
    "sum_all": lambda rng: (lambda x: x.sum(), [rand_tensor(rng, (3, 4))]),
    "sum_axis": lambda rng: (lambda x: x.sum(axis=1), [rand_tensor(rng, (3, 4, 2))]),
    "mean_all": lambda rng: (lambda x: x.mean(), [rand_tensor(rng, (2, 6))]),
    "mean_axis_keepdims": lambda rng: (lambda x: x.mean(axis=-1, keepdims=True),
                                       [rand_tensor(rng, (4, 3))]),
    "gelu": lambda rng: (T.gelu, [rand_tensor(rng, (3, 5))]),
    "softmax": lambda rng: (T.softmax, [rand_tensor(rng, (4, 6), scale=2.0)]),
    "log_softmax": lambda rng: (T.log_softmax, [rand_tensor(rng, (4, 6), scale=2.0)]),
    "layer_norm": lambda rng: (lambda x: T.layer_norm(x, eps=1e-6), [rand_tensor(rng, (3, 7))]),
    "layer_norm_affine": lambda rng: (
        lambda x, g, b: T.layer_norm(x, g, b, eps=1e-6),
        [rand_tensor(rng, (3, 7)), rand_tensor(rng, (7,)), rand_tensor(rng, (7,))]),
    "smooth_l1": lambda rng: (
        lambda x: T.smooth_l1(x, delta=1.0),
        # keep samples away from the |x| = delta kink where FD is invalid
        [T.Tensor(rng.uniform(0.05, 0.9, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4)) *
                  rng.choice([1.0, 2.0], (3, 4)), requires_grad=True, dtype=np.float64)]),
    "cross_entropy": lambda rng: (
        lambda x: T.softmax_cross_entropy(x, np.array([1, 0, 3]), smoothing=0.1),
        [rand_tensor(rng, (3, 4), scale=2.0)]),
    "attention": lambda rng: (
        T.scaled_dot_product_attention,
        [rand_tensor(rng, (2, 3, 4)), rand_tensor(rng, (2, 3, 4)), rand_tensor(rng, (2, 3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    fn, inputs = OPS[name](rng)
    gradcheck(fn, inputs, rng)


def test_matmul_gradient_of_sum_vs_finite_differences_3x3_is_criterion_example(self=None):
    # dedicated case from the op contract: grad of sum(a.b) at random 3x3 inputs
    rng = np.random.default_rng(33)
    a, b = rand_tensor(rng, (3, 3)), rand_tensor(rng, (3, 3))
    gradcheck(lambda x, y: T.matmul(x, y), [a, b], rng)


@pytest.mark.parametrize("name", ["matmul", "layer_norm", "gelu", "softmax"])
def test_gradients_hold_at_32_bit_with_loose_tolerance(name):
    # the training dtype: central differences at float32 with relative
    # error < 1e-3
    rng = np.random.default_rng(hash(name) % 2**31)
    fn, inputs = OPS[name](rng)
    inputs32 = [T.Tensor(x.data.astype(np.float32), requires_grad=True)
                for x in inputs]
    gradcheck(fn, inputs32, rng, rtol=1e-3, h=1e-2)


class TestTapeSemantics:
    def test_no_recording_outside_tape(self):
        x = t64([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert not y.requires_grad

    def test_no_grad_suppresses_recording(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with T.tape() as tp:
            with T.no_grad():
                T.mul(x, x)
            assert len(tp) == 0

    def test_constant_inputs_record_nothing(self):
        with T.tape() as tp:
            T.mul(t64([1.0]), t64([2.0]))
            assert len(tp) == 0

    def test_backward_visits_each_node_once_and_inputs_precede_outputs(self):
        x = t64([1.0, 3.0], requires_grad=True)
        with T.tape() as tp:
            y = T.mul(x, x)
            z = T.add(y, x).sum()
            seen = {id(x)}
            for node in tp.nodes:
                for inp in node.inputs:
                    assert inp.requires_grad is False or id(inp) in seen
                seen.add(id(node.output))
            tp.backward(z)
        np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)

    def test_grad_accumulates_across_uses(self):
        x = t64([2.0], requires_grad=True)
        with T.tape() as tp:
            tp.backward(T.add(T.mul(x, x), T.mul(x, x)).sum())
        np.testing.assert_allclose(x.grad, [8.0])

    def test_tape_linearity_split_graph_matches_composed(self):
        # backward through f(g(x)) equals backward through g then f chained by hand
        rng = np.random.default_rng(5)
        x = rand_tensor(rng, (3, 4))

        def g(v):
            return T.gelu(T.mul(v, v))

        def f(v):
            return T.layer_norm(v, eps=1e-6).sum()

        with T.tape() as tp:
            tp.backward(f(g(x)))
        composed = x.grad
        x.grad = None

        with T.tape() as tp1:
            mid = g(x)
        leaf = T.Tensor(mid.data, requires_grad=True, dtype=np.float64)
        with T.tape() as tp2:
            tp2.backward(f(leaf))
        tp1.backward(mid, grad=leaf.grad)
        np.testing.assert_array_equal(composed, x.grad)

    def test_backward_is_bit_deterministic(self):
        rng = np.random.default_rng(11)
        vals = rng.normal(size=(16, 8))

        def run():
            x = t64(vals, requires_grad=True)
            with T.tape() as tp:
                y = T.layer_norm(T.gelu(T.matmul(x, T.transpose(x))), eps=1e-6)
                tp.backward(y.mean())
            return x.grad.tobytes()

        assert run() == run()

    def test_detach_blocks_gradient(self):
        x = t64([1.0, 2.0], requires_grad=True)
        with T.tape() as tp:
            tp.backward(T.mul(x.detach(), x).sum())
        np.testing.assert_allclose(x.grad, x.data)


class TestErrors:
    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_forward_raises(self):
        big = T.Tensor(np.array([1e300]), dtype=np.float64)
        with pytest.raises(T.NonFiniteError, match="mul"):
            T.mul(big, big)

    @pytest.mark.filterwarnings("ignore:divide by zero")
    def test_division_by_zero_raises(self):
        with pytest.raises(T.NonFiniteError):
            T.div(t64([1.0]), t64([0.0]))

    def test_non_finite_constant_rejected(self):
        with pytest.raises(T.NonFiniteError):
            T.Tensor(np.array([np.nan]))

    def test_mixed_dtype_rejected(self):
        a = T.Tensor(np.zeros(3, dtype=np.float32))
        b = T.Tensor(np.zeros(3, dtype=np.float64))
        with pytest.raises(TypeError):
            T.add(a, b)

    def test_advanced_indexing_rejected(self):
        x = t64(np.zeros((3, 3)))
        with pytest.raises(TypeError):
            x[np.array([0, 1])]

    def test_gather_index_out_of_range(self):
        x = t64(np.zeros((1, 2, 3)))
        with pytest.raises(IndexError):
            T.gather_rows(x, np.array([[2]]))


class TestInvariants:
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_shape_invariant_product_equals_size(self, n, m, seed):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.normal(size=(n, m)))
        assert int(np.prod(x.shape)) == x.size

    def test_grad_shape_matches_data(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (4, 5))
        with T.tape() as tp:
            tp.backward(T.gelu(x).sum())
        assert x.grad.shape == x.shape and x.grad.dtype == x.dtype

    def test_attention_matches_manual_composition(self):
        rng = np.random.default_rng(9)
        q, k, v = (t64(rng.normal(size=(2, 4, 3))) for _ in range(3))
        out = T.scaled_dot_product_attention(q, k, v).data
        scores = q.data @ np.swapaxes(k.data, -1, -2) / math.sqrt(3)
        e = np.exp(scores - scores.max(-1, keepdims=True))
        w = e / e.sum(-1, keepdims=True)
        np.testing.assert_allclose(out, w @ v.data, rtol=1e-12)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(21)
        s = T.softmax(t64(rng.normal(size=(5, 9)))).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
        assert (s >= 0).all()
