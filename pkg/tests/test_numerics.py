"""Primitive-op tests: shapes, hand values, and finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcarmor.numerics import (
    AdamState,
    adam_update,
    cross_entropy_with_grad,
    log_softmax_rows,
    matmul,
    max_pool_cols,
    relu_backward,
    relu_forward,
    softmax_rows,
)


def test_matmul_matches_numpy(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    assert np.array_equal(matmul(a, b), a @ b)


def test_matmul_rejects_bad_shapes(rng):
    with pytest.raises(ValueError):
        matmul(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))
    with pytest.raises(ValueError):
        matmul(rng.standard_normal(3), rng.standard_normal((3, 2)))


def test_relu_forward_clamps_negatives():
    x = np.array([[-1.0, 0.0, 2.5], [3.0, -0.1, 0.0]])
    assert np.array_equal(relu_forward(x), [[0.0, 0.0, 2.5], [3.0, 0.0, 0.0]])


def test_relu_backward_masks_by_preactivation():
    pre = np.array([[-1.0, 0.0, 2.0]])
    up = np.array([[5.0, 5.0, 5.0]])
    # The derivative at exactly 0 is taken as 0 (subgradient choice).
    assert np.array_equal(relu_backward(pre, up), [[0.0, 0.0, 5.0]])


def test_softmax_rows_known_values():
    s = softmax_rows(np.array([[0.0, 0.0], [np.log(3.0), 0.0]]))
    np.testing.assert_allclose(s, [[0.5, 0.5], [0.75, 0.25]], atol=1e-15)


def test_softmax_shift_invariance(rng):
    z = rng.standard_normal((4, 6))
    shifted = z + 123.456
    np.testing.assert_allclose(softmax_rows(z), softmax_rows(shifted), atol=1e-12)


def test_softmax_survives_large_logits():
    s = softmax_rows(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s[0, 0], 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=9))
def test_log_softmax_consistent_with_softmax(logits):
    z = np.array([logits])
    np.testing.assert_allclose(np.exp(log_softmax_rows(z)), softmax_rows(z), atol=1e-12)
    np.testing.assert_allclose(softmax_rows(z).sum(), 1.0, atol=1e-12)


def test_max_pool_cols_values_and_ties():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]])
    vals, arg = max_pool_cols(x)
    assert np.array_equal(vals, [3.0, 5.0])
    # ties resolve to the smallest row index
    assert np.array_equal(arg, [1, 0])


def test_cross_entropy_hand_value():
    logits = np.array([[0.0, 0.0], [0.0, 0.0]])
    labels = np.array([0, 1])
    loss, grad = cross_entropy_with_grad(logits, labels)
    np.testing.assert_allclose(loss, np.log(2.0), atol=1e-15)
    np.testing.assert_allclose(grad, [[-0.25, 0.25], [0.25, -0.25]], atol=1e-15)


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((3, 5))
    labels = np.array([1, 4, 0])
    _, grad = cross_entropy_with_grad(logits, labels)
    eps = 1e-6
    for i in range(3):
        for j in range(5):
            zp, zm = logits.copy(), logits.copy()
            zp[i, j] += eps
            zm[i, j] -= eps
            fd = (cross_entropy_with_grad(zp, labels)[0] - cross_entropy_with_grad(zm, labels)[0]) / (2 * eps)
            assert abs(fd - grad[i, j]) < 1e-8


def test_adam_first_step_closed_form():
    # With zeroed state, one Adam step moves by -lr * g/(|g| + eps*corr) for a
    # scalar: m_hat = g, v_hat = g^2 after bias correction.
    p = np.array([1.0])
    g = np.array([0.5])
    state = AdamState.zeros_like(p)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    new_p, new_state = adam_update(p, g, state, lr, beta1=b1, beta2=b2, eps=eps)
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    np.testing.assert_allclose(new_p, p - lr * m_hat / (np.sqrt(v_hat) + eps), atol=1e-15)
    assert new_state.step == 1
    assert state.step == 0, "input state must not be mutated"


def test_adam_converges_on_quadratic():
    p = np.array([5.0, -3.0])
    state = AdamState.zeros_like(p)
    for _ in range(4000):
        p, state = adam_update(p, 2.0 * p, state, 1e-2)
    np.testing.assert_allclose(p, [0.0, 0.0], atol=1e-4)
