import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lxdg import autodiff as ad
from lxdg.autodiff import Tape, backward, finite_difference_check
from lxdg.errors import ContractError, DataError, ParameterError, ShapeError


def test_affine_worked_example():
    t = Tape()
    x = t.leaf(np.array([[1.0, 0.0]]), requires_grad=False)
    w = t.leaf(np.array([[2.0, 0.0], [0.0, 3.0]]))
    b = t.leaf(np.array([1.0, 1.0]))
    out = ad.affine(x, w, b)
    np.testing.assert_array_equal(out.values, [[3.0, 1.0]])


def test_affine_zero_input_zero_bias():
    t = Tape()
    x = t.leaf(np.zeros((1, 2)), requires_grad=False)
    w = t.leaf(np.array([[5.0, -1.0], [2.0, 7.0]]))
    b = t.leaf(np.zeros(2))
    np.testing.assert_array_equal(ad.affine(x, w, b).values, [[0.0, 0.0]])


def test_affine_identity():
    t = Tape()
    x = t.leaf(np.array([[1.0, 2.0]]), requires_grad=False)
    w = t.leaf(np.eye(2))
    b = t.leaf(np.zeros(2))
    np.testing.assert_array_equal(ad.affine(x, w, b).values, [[1.0, 2.0]])


def test_affine_shape_error_names_both_shapes():
    t = Tape()
    x = t.leaf(np.zeros((1, 3)))
    w = t.leaf(np.zeros((2, 2)))
    b = t.leaf(np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(1, 3\).*\(2, 2\)"):
        ad.affine(x, w, b)


def test_relu_sign_cases():
    t = Tape()
    out = ad.relu(t.leaf(np.array([-1.0, 0.0, 2.0])))
    np.testing.assert_array_equal(out.values, [0.0, 0.0, 2.0])


def test_relu_derivative_zero_at_kink():
    t = Tape()
    x = t.leaf(np.array([-1.0, 0.0, 2.0]))
    backward(ad.mean(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0 / 3.0])


def test_sigmoid_symmetry_point():
    t = Tape()
    assert ad.sigmoid(t.leaf(np.array([0.0]))).values[0] == 0.5


def test_sigmoid_stable_branch():
    t = Tape()
    v = ad.sigmoid(t.leaf(np.array([-36.0, -800.0, 800.0]))).values
    assert 0.0 < v[0] <= 1e-15
    assert np.all(np.isfinite(v))


def test_activation_dispatch_and_unknown_kind():
    t = Tape()
    x = t.leaf(np.array([1.0]))
    assert ad.activation(x, "relu").values[0] == 1.0
    with pytest.raises(ParameterError):
        ad.activation(x, "tanh")


def test_hadamard_mask_semantics():
    t = Tape()
    a = t.leaf(np.array([1.0, 2.0, 3.0]))
    b = t.leaf(np.array([0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(ad.hadamard(a, b).values, [0.0, 2.0, 0.0])


def test_hadamard_all_ones_identity():
    t = Tape()
    a = t.leaf(np.array([[1.5, -2.0], [0.25, 4.0]]))
    out = ad.hadamard(a, t.leaf(np.ones(2)))
    np.testing.assert_array_equal(out.values, a.values)


def test_hadamard_direct_arithmetic():
    t = Tape()
    out = ad.hadamard(t.leaf(np.array([2.0, 2.0])), t.leaf(np.array([0.5, 0.25])))
    np.testing.assert_array_equal(out.values, [1.0, 0.5])


def test_hadamard_broadcast_gate_vector_gradients():
    t = Tape()
    a = t.leaf(np.arange(6, dtype=np.float64).reshape(2, 3))
    g = t.leaf(np.array([1.0, 2.0, 3.0]))
    backward(ad.mean(ad.hadamard(a, g)))
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)) / 6.0)
    np.testing.assert_allclose(g.grad, a.values.sum(axis=0) / 6.0)


def test_hadamard_rejects_undocumented_broadcast():
    t = Tape()
    with pytest.raises(ShapeError):
        ad.hadamard(t.leaf(np.zeros((2, 3))), t.leaf(np.zeros((3, 2))))


def test_dropout_eval_is_identity():
    t = Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    assert ad.dropout(x, 0.5, "eval") is x


def test_dropout_p_zero_is_identity():
    t = Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    assert ad.dropout(x, 0.0, "train", np.random.default_rng(0)) is x


def test_dropout_inverted_scaling_preserves_mean():
    t = Tape()
    x = t.leaf(np.ones(100_000))
    out = ad.dropout(x, 0.5, "train", np.random.default_rng(7))
    assert abs(out.values.mean() - 1.0) < 0.05
    survivors = out.values[out.values != 0.0]
    np.testing.assert_allclose(survivors, 2.0)


def test_dropout_parameter_validation():
    t = Tape()
    x = t.leaf(np.ones(3))
    with pytest.raises(ParameterError):
        ad.dropout(x, 1.0, "train", np.random.default_rng(0))
    with pytest.raises(ParameterError):
        ad.dropout(x, -0.1, "train", np.random.default_rng(0))


def test_dropout_mask_reused_in_backward():
    t = Tape()
    x = t.leaf(np.ones(1000))
    out = ad.dropout(x, 0.5, "train", np.random.default_rng(3))
    backward(ad.mean(out))
    # gradient is the stored mask / n: zero where dropped, 2/n where kept
    np.testing.assert_allclose(x.grad * 1000, np.where(out.values != 0.0, 2.0, 0.0))


def test_softmax_xent_uniform_logits():
    t = Tape()
    logits = t.leaf(np.zeros((4, 10)))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 3, 6, 9]))
    assert loss.item() == pytest.approx(math.log(10.0), abs=1e-12)


def test_softmax_xent_saturated_correct_prediction():
    t = Tape()
    z = np.zeros((1, 10))
    z[0, 4] = 50.0
    loss = ad.softmax_cross_entropy(t.leaf(z), np.array([4]))
    assert loss.item() < 1e-9


def test_softmax_xent_single_hot_logit():
    # frozen from the direct formula: -ln(e / (e + 9))
    expected = math.log((math.e + 9.0) / math.e)
    t = Tape()
    z = np.zeros((1, 10))
    z[0, 0] = 1.0
    loss = ad.softmax_cross_entropy(t.leaf(z), np.array([0]))
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert loss.item() == pytest.approx(1.4611501717344748, abs=1e-12)


def test_softmax_xent_gradient_is_softmax_minus_onehot_over_batch():
    t = Tape()
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 10))
    logits = t.leaf(z)
    labels = np.array([2, 0, 7])
    backward(ad.softmax_cross_entropy(logits, labels))
    soft = np.exp(z - z.max(axis=1, keepdims=True))
    soft /= soft.sum(axis=1, keepdims=True)
    onehot = np.zeros((3, 10))
    onehot[np.arange(3), labels] = 1.0
    np.testing.assert_allclose(logits.grad, (soft - onehot) / 3.0, atol=1e-12)


def test_softmax_xent_out_of_range_label():
    t = Tape()
    with pytest.raises(DataError, match="index 1"):
        ad.softmax_cross_entropy(t.leaf(np.zeros((2, 10))), np.array([3, 10]))


def test_reduce_helpers():
    t = Tape()
    assert ad.dot(t.leaf(np.array([1.0, 0.0, 1.0])), t.leaf(np.array([1.0, 1.0, 0.0]))).item() == 1.0
    assert ad.mean(t.leaf(np.array([2.0, 4.0]))).item() == 3.0
    assert ad.squared_distance_to(t.leaf(np.array(0.25)), 0.2).item() == pytest.approx(0.0025, abs=1e-15)
    with pytest.raises(ShapeError):
        ad.dot(t.leaf(np.zeros(3)), t.leaf(np.zeros(4)))


def test_row_dot_and_mean_rows():
    t = Tape()
    a = t.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = t.leaf(np.array([[1.0, 1.0], [0.5, 0.5]]))
    np.testing.assert_allclose(ad.row_dot(a, b).values, [3.0, 3.5])
    np.testing.assert_allclose(ad.mean_rows(a).values, [2.0, 3.0])


def test_weighted_sum():
    t = Tape()
    x = t.leaf(np.array([1.0, 2.0, 3.0]))
    node = ad.weighted_sum(x, np.array([0.0, 1.0, 2.0]))
    assert node.item() == 8.0
    backward(node)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 2.0])


def test_backward_mean_gradient():
    t = Tape()
    w = t.leaf(np.arange(12, dtype=np.float64).reshape(3, 4))
    backward(ad.mean(w))
    np.testing.assert_allclose(w.grad, np.full((3, 4), 1.0 / 12.0))


def test_backward_quadratic_form_gradient():
    t = Tape()
    w = t.leaf(np.array([1.0, -2.0, 0.5]))
    backward(ad.dot(w, w))
    np.testing.assert_array_equal(w.grad, 2.0 * w.values)


def test_backward_requires_scalar():
    t = Tape()
    w = t.leaf(np.zeros(3))
    with pytest.raises(ContractError):
        backward(ad.relu(w))


def test_backward_loss_grad_is_exactly_one():
    t = Tape()
    w = t.leaf(np.array([3.0]))
    loss = ad.mean(w)
    backward(loss)
    assert loss.grad.item() == 1.0


def test_unreachable_leaf_has_zero_grad():
    t = Tape()
    w = t.leaf(np.array([1.0, 2.0]))
    unused = t.leaf(np.array([5.0]))
    backward(ad.mean(w))
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_repeated_backward_accumulates():
    t = Tape()
    w = t.leaf(np.array([1.0, 2.0]))
    loss = ad.dot(w, w)
    backward(loss)
    backward(loss)
    np.testing.assert_array_equal(w.grad, 4.0 * w.values)


def test_separate_backward_calls_on_shared_subgraph_sum_correctly():
    # d(a + b)/dw must equal dL1/dw + dL2/dw even though both losses share w
    t = Tape()
    w = t.leaf(np.array([1.0, 2.0]))
    shared = ad.scale(w, 3.0)
    l1 = ad.mean(shared)
    l2 = ad.weighted_sum(shared, np.array([1.0, 1.0]))
    backward(l1)
    backward(l2)
    t2 = Tape()
    w2 = t2.leaf(np.array([1.0, 2.0]))
    shared2 = ad.scale(w2, 3.0)
    backward(ad.add(ad.mean(shared2), ad.weighted_sum(shared2, np.array([1.0, 1.0]))))
    np.testing.assert_allclose(w.grad, w2.grad, rtol=0, atol=0)


def test_backward_linearity():
    rng = np.random.default_rng(11)
    v = rng.normal(size=5)

    def grads(a, b):
        t = Tape()
        w = t.leaf(v.copy())
        l1 = ad.dot(w, w)
        l2 = ad.mean(ad.relu(w))
        backward(ad.add(ad.scale(l1, a), ad.scale(l2, b)))
        return w.grad.copy()

    g10 = grads(1.0, 0.0)
    g01 = grads(0.0, 1.0)
    np.testing.assert_allclose(grads(2.5, -1.5), 2.5 * g10 + (-1.5) * g01, rtol=1e-12)


def test_tape_reset_rejects_stale_nodes():
    t = Tape()
    x = t.leaf(np.ones(2))
    y = ad.relu(x)
    t.reset()
    with pytest.raises(ContractError, match="stale"):
        ad.mean(y)


def test_tape_reset_leaves_no_gradients():
    t = Tape()
    x = t.leaf(np.ones(3))
    backward(ad.mean(x))
    assert x.grad.sum() > 0
    t.reset()
    fresh = t.leaf(np.ones(3))
    np.testing.assert_array_equal(fresh.grad, np.zeros(3))
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_cross_tape_inputs_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ContractError, match="different tape"):
        ad.add(t1.leaf(np.array(1.0)), t2.leaf(np.array(1.0)))


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_forward_determinism_same_seed_same_values(seed):
    def build():
        rng = np.random.default_rng(seed)
        t = Tape()
        x = t.leaf(rng.normal(size=(4, 6)), requires_grad=False)
        w = t.leaf(rng.normal(size=(6, 3)))
        b = t.leaf(np.zeros(3))
        h = ad.relu(ad.affine(x, w, b))
        d = ad.dropout(h, 0.5, "train", np.random.default_rng(seed + 1))
        return ad.mean(d).item()

    assert build() == build()


def test_finite_difference_quadratic_is_nearly_exact():
    params = {"w": np.array([0.3, -0.7, 1.1])}

    def build(tape, leaves):
        return ad.dot(leaves["w"], leaves["w"])

    assert finite_difference_check(build, params, eps=1e-5) < 1e-8


def test_finite_difference_relu_net():
    rng = np.random.default_rng(42)
    params = {
        "w1": rng.normal(size=(5, 4)) * 0.5,
        "b1": rng.normal(size=4) * 0.1,
        "w2": rng.normal(size=(4, 3)) * 0.5,
        "b2": rng.normal(size=3) * 0.1,
    }
    x = rng.normal(size=(6, 5))
    y = np.array([0, 1, 2, 0, 1, 2])

    def build(tape, leaves):
        h = ad.relu(ad.affine(tape.leaf(x, requires_grad=False), leaves["w1"], leaves["b1"]))
        return ad.softmax_cross_entropy(ad.affine(h, leaves["w2"], leaves["b2"]), y)

    assert finite_difference_check(build, params, eps=1e-5) < 1e-4


def test_finite_difference_sigmoid_gated_product_network():
    rng = np.random.default_rng(9)
    params = {
        "w": rng.normal(size=(4, 3)),
        "g": rng.normal(size=(4, 3)),
        "b": rng.normal(size=3),
    }
    x = rng.uniform(size=(5, 4))

    def build(tape, leaves):
        xn = tape.leaf(x, requires_grad=False)
        h = ad.relu(ad.affine(xn, leaves["w"], leaves["b"]))
        u = ad.sigmoid(ad.affine(xn, leaves["g"], tape.const(np.zeros(3))))
        return ad.mean(ad.hadamard(h, u))

    assert finite_difference_check(build, params, eps=1e-5) < 1e-4


def test_finite_difference_detects_nondeterminism():
    state = {"calls": 0}

    def build(tape, leaves):
        state["calls"] += 1
        return ad.scale(ad.mean(leaves["w"]), float(state["calls"]))

    with pytest.raises(ContractError, match="deterministic"):
        finite_difference_check(build, {"w": np.ones(2)}, eps=1e-5)
