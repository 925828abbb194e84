import math

import numpy as np
import pytest

from zsalign.numeric import (AdamState, EmptySupportError, adam_step, grad_check, l2_normalize,
                             logsumexp, sigmoid, softmax, softplus)


def test_softplus_values():
    assert softplus(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert softplus(700.0) == pytest.approx(700.0)
    low = softplus(-700.0)
    assert 0.0 <= low < 1e-300
    assert np.all(np.isfinite(softplus(np.array([-1e4, 1e4]))))


def test_sigmoid_is_stable_at_extremes():
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0
    assert sigmoid(0.0) == 0.5


def test_softmax_examples():
    np.testing.assert_allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_array_equal(softmax([-np.inf, 5]), [0.0, 1.0])
    np.testing.assert_allclose(softmax([1, 2]), [0.26894, 0.73106], atol=5e-6)


def test_softmax_empty_support():
    with pytest.raises(EmptySupportError, match="empty support"):
        softmax([-np.inf, -np.inf])


def test_softmax_rows():
    out = softmax(np.array([[1.0, 2.0], [0.0, -np.inf]]), axis=1)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-15)
    assert out[1, 1] == 0.0


def test_logsumexp_large_values():
    assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2))


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)
    np.testing.assert_array_equal(l2_normalize(np.zeros(3)), np.zeros(3))
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(l2_normalize(u), u)


def test_grad_check_quadratic():
    p = {"p": np.array([0.3, -1.2, 2.0])}
    err = grad_check(lambda q: 0.5 * float(np.sum(q["p"] ** 2)), lambda q: {"p": q["p"].copy()}, p)
    assert err < 1e-8
    np.testing.assert_array_equal(p["p"], [0.3, -1.2, 2.0])


def test_grad_check_dead_relu_is_zero_error():
    p = {"w": np.array([-1.0])}
    err = grad_check(lambda q: float(np.maximum(q["w"][0], 0.0)), lambda q: {"w": np.zeros(1)}, p)
    assert err == 0.0


def test_grad_check_rejects_bad_step_and_nonfinite_loss():
    p = {"p": np.ones(2)}
    with pytest.raises(ValueError):
        grad_check(lambda q: 0.0, lambda q: {}, p, h=1e-1)
    with pytest.raises(FloatingPointError):
        grad_check(lambda q: float("nan"), lambda q: {}, p)


def test_grad_check_detects_wrong_gradient():
    p = {"p": np.array([1.0, 2.0])}
    err = grad_check(lambda q: float(np.sum(q["p"] ** 2)), lambda q: {"p": q["p"].copy()}, p)
    assert err == pytest.approx(0.5, rel=1e-6)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    st = AdamState()
    adam_step(params, {"w": np.array([0.5, 0.5])}, st, lr=0.1)
    before = params["w"].copy()
    m_before = st.first_moment["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, st, lr=0.1)
    np.testing.assert_allclose(params["w"], before - 0.1 * (0.9 * m_before / (1 - 0.9 ** 2))
                               / (np.sqrt(st.second_moment["w"] / (1 - 0.999 ** 2)) + 1e-8))
    np.testing.assert_allclose(st.first_moment["w"], 0.9 * m_before)

    fresh = {"w": np.array([1.0, -2.0])}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(fresh["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    params = {"w": np.zeros(3)}
    adam_step(params, {"w": np.array([3.0, -0.2, 1e-2])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(params["w"], [-0.01, 0.01, -0.01], rtol=1e-5)


def test_adam_constant_gradient_converges_to_lr():
    params = {"w": np.zeros(1)}
    st = AdamState()
    for _ in range(2000):
        prev = params["w"].copy()
        adam_step(params, {"w": np.array([0.7])}, st, lr=1e-3)
    assert abs(abs(params["w"][0] - prev[0]) - 1e-3) < 1e-3 * 1e-3


def test_adam_nonfinite_gradient_names_block():
    with pytest.raises(FloatingPointError, match="head.W1"):
        adam_step({"head.W1": np.zeros(2)}, {"head.W1": np.array([np.nan, 0.0])}, AdamState(), 0.1)
