import math

import numpy as np
import pytest

from ewmadapt.autograd import (
    ContractError,
    DimensionError,
    Tensor,
    ValidationError,
    absolute,
    binary_cross_entropy,
    ewmul,
    grad_check,
    l1,
    log,
    matmul,
    no_grad,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    softmax_probs,
    transpose,
)


def test_matmul_hand_expansion():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    out = matmul(a, b)
    np.testing.assert_array_equal(out.data, [[13.0, 16.0]])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(4, 5)))
    out = matmul(a, Tensor(np.eye(5)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    b = Tensor(rng.normal(size=(3, 4)))
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    err = grad_check(lambda x: reduce_sum(matmul(x, b)), a, eps=1e-5)
    assert err < 1e-6


def test_ewmul_direct_and_identity():
    out = ewmul(Tensor([1.0, 2.0]), Tensor([3.0, 5.0]))
    np.testing.assert_array_equal(out.data, [3.0, 10.0])
    x = Tensor([0.3, -2.0, 7.0])
    np.testing.assert_array_equal(ewmul(x, Tensor(np.ones(3))).data, x.data)


def test_ewmul_broadcast_row_vector_gradients():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    row = Tensor(rng.normal(size=(3,)), requires_grad=True)
    out = reduce_sum(ewmul(a, row))
    out.backward()
    # broadcast operand's gradient sums over the broadcast axis
    np.testing.assert_allclose(row.grad, a.data.sum(axis=0), rtol=0, atol=1e-15)
    np.testing.assert_allclose(a.grad, np.broadcast_to(row.data, (4, 3)), atol=1e-15)


def test_ewmul_incompatible_shapes():
    with pytest.raises(DimensionError):
        ewmul(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_reduce_sum_matches_matmul_composition():
    out = reduce_sum(Tensor([3.0, 10.0]), axis=0)
    assert out.item() == 13.0


def test_reduce_sum_zeros_and_gradient():
    assert reduce_sum(Tensor(np.zeros((3, 2)))).item() == 0.0
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_reduce_sum_bad_axis():
    with pytest.raises(DimensionError):
        reduce_sum(Tensor(np.zeros((2, 2))), axis=2)


def test_l1_of_identical_inputs_is_zero():
    x = Tensor([1.0, -2.0, 3.0])
    assert l1(x, x.data).item() == 0.0


def test_bce_half_is_ln2():
    loss = binary_cross_entropy(Tensor([0.5]), np.array([1.0]))
    assert math.isclose(loss.item(), math.log(2.0), rel_tol=1e-12)


def test_bce_label_validation():
    with pytest.raises(ValidationError):
        binary_cross_entropy(Tensor([0.5]), np.array([2.0]))


def test_softmax_ce_class_validation():
    with pytest.raises(ValidationError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_softmax_ce_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert math.isclose(loss.item(), math.log(3.0), rel_tol=1e-12)


def test_softmax_probs_rows_sum_to_one():
    p = softmax_probs(np.random.default_rng(3).normal(size=(5, 4)))
    np.testing.assert_allclose(p.sum(axis=1), np.ones(5), atol=1e-12)


def test_backward_of_sum_gives_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(4))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ewmul(x, x).backward()


def test_backward_accumulates_without_zeroing():
    x = Tensor(np.arange(3.0) + 1.0, requires_grad=True)
    loss = reduce_sum(ewmul(x, x))
    loss.backward()
    once = x.grad.copy()
    loss.backward()
    np.testing.assert_allclose(x.grad, 2.0 * once, atol=0)


def test_decomposed_backward_equals_matmul_backward():
    # ewmul-then-sum decomposition of an fc layer must match matmul
    # in both forward value and gradients, elementwise within 1e-12
    rng = np.random.default_rng(4)
    f_data = rng.normal(size=(3, 6))
    c_data = rng.normal(size=(6, 2))
    g_data = rng.normal(size=(3, 2))  # random upstream weighting

    f1 = Tensor(f_data, requires_grad=True)
    c1 = Tensor(c_data, requires_grad=True)
    m = ewmul(reshape(f1, (3, 1, 6)), reshape(transpose(c1), (1, 2, 6)))
    p1 = reduce_sum(m, axis=2)
    reduce_sum(ewmul(p1, Tensor(g_data))).backward()

    f2 = Tensor(f_data, requires_grad=True)
    c2 = Tensor(c_data, requires_grad=True)
    p2 = matmul(f2, c2)
    reduce_sum(ewmul(p2, Tensor(g_data))).backward()

    assert np.max(np.abs(p1.data - p2.data)) <= 1e-12
    assert np.max(np.abs(f1.grad - f2.grad)) <= 1e-12
    assert np.max(np.abs(c1.grad - c2.grad)) <= 1e-12


def test_grad_check_quadratic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=7), requires_grad=True)
    err = grad_check(lambda t: reduce_sum(ewmul(t, t)), x, eps=1e-5)
    assert err < 1e-8


def test_grad_check_constant_function():
    x = Tensor(np.ones(3), requires_grad=True)
    err = grad_check(lambda t: Tensor(2.0) + reduce_sum(ewmul(t, Tensor(np.zeros(3)))), x)
    assert err == 0.0


def _away_from_kinks(rng, shape, margin=1e-4):
    x = rng.normal(size=shape)
    x[np.abs(x) < margin] += 2 * margin
    return x


@pytest.mark.parametrize(
    "name,builder",
    [
        ("relu", lambda t: reduce_sum(relu(t))),
        ("sigmoid", lambda t: reduce_sum(sigmoid(t))),
        ("log", lambda t: reduce_sum(log(absolute(t) + 0.5))),
        ("abs", lambda t: reduce_sum(absolute(t))),
        ("mean", lambda t: reduce_mean(ewmul(t, t))),
        ("reshape_t", lambda t: reduce_sum(ewmul(transpose(reshape(t, (2, 3))), Tensor(np.arange(6.0).reshape(3, 2))))),
        ("neg_sub", lambda t: reduce_sum(-(t - 0.3) * 2.0)),
    ],
)
def test_grad_check_each_op_50_points(name, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for _ in range(50):
        x = Tensor(_away_from_kinks(rng, 6), requires_grad=True)
        worst = max(worst, grad_check(builder, x, eps=1e-5))
    assert worst < 1e-4, f"{name}: {worst}"


def test_grad_check_losses_50_points():
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(50):
        # probabilities away from 0/1, targets fixed
        p = Tensor(rng.uniform(0.05, 0.95, size=5), requires_grad=True)
        lab = (rng.uniform(size=5) < 0.5).astype(float)
        worst = max(worst, grad_check(lambda t: binary_cross_entropy(t, lab), p))

        x = Tensor(_away_from_kinks(rng, (3, 4)), requires_grad=True)
        tgt = rng.normal(size=(3, 4))
        tgt += np.sign(tgt - x.data) * 1e-3  # keep |pred-target| off the kink
        worst = max(worst, grad_check(lambda t: l1(t, tgt), x))

        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        cls = rng.integers(0, 3, size=4)
        worst = max(worst, grad_check(lambda t: softmax_cross_entropy(t, cls), z))
    assert worst < 1e-4


def test_forward_decomposition_equals_matmul_many():
    rng = np.random.default_rng(6)
    for _ in range(20):
        b, nd, no = rng.integers(1, 8), rng.integers(1, 16), rng.integers(1, 8)
        f = rng.normal(size=(b, nd))
        c = rng.normal(size=(nd, no))
        m = f[:, None, :] * c.T[None, :, :]
        assert np.max(np.abs(m.sum(axis=2) - f @ c)) <= 1e-12


def test_backward_deterministic_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        loss = reduce_mean(sigmoid(matmul(relu(x), w)))
        loss.backward()
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_no_grad_suppresses_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = reduce_sum(ewmul(x, x))
    assert not y.requires_grad and y._parents == ()


def test_finite_forward_on_finite_inputs():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(5, 4)) * 50)
    w = Tensor(rng.normal(size=(4, 2)))
    out = sigmoid(matmul(relu(x), w))
    assert np.all(np.isfinite(out.data))
    assert np.all(np.isfinite(binary_cross_entropy(sigmoid(Tensor([800.0, -800.0])), np.array([0.0, 1.0])).data))
