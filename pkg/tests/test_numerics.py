import numpy as np
import pytest

from fedgcf.numerics import (
    grad_check,
    leaky_relu,
    leaky_relu_grad,
    log_sigmoid,
    matmul,
    relu,
    relu_grad,
    sigmoid,
)
from fedgcf.rng import Rng


def test_matmul_identity():
    m = Rng(0).normal(size=(4, 4))
    assert np.allclose(matmul(np.eye(4), m), m)


def test_matmul_hand_example():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    assert np.array_equal(matmul(a, b), np.array([[17.0], [39.0]]))


def test_matmul_transpose_recompute():
    # A @ B recomputed as (B^T A^T)^T
    rng = Rng(1)
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(5, 3))
    direct = matmul(a, b)
    via_t = matmul(b.T, a.T).T
    assert np.allclose(direct, via_t, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((4, 2)))


def test_sigmoid_basics():
    assert sigmoid(0.0) == pytest.approx(0.5)
    xs = Rng(2).normal(scale=3.0, size=200)
    assert np.allclose(sigmoid(xs) + sigmoid(-xs), 1.0)


def test_sigmoid_extreme_inputs_stable():
    assert sigmoid(800.0) == pytest.approx(1.0)
    assert sigmoid(-800.0) == pytest.approx(0.0)
    assert np.isfinite(log_sigmoid(-800.0))
    # log sigma(x) = -log(1 + e^{-x})
    assert log_sigmoid(0.0) == pytest.approx(-np.log(2.0))


def test_leaky_relu_values():
    assert leaky_relu(-2.0, 0.2) == pytest.approx(-0.4)
    assert leaky_relu(3.0, 0.2) == pytest.approx(3.0)
    assert leaky_relu_grad(-1.0, 0.2) == pytest.approx(0.2)
    assert leaky_relu_grad(1.0, 0.2) == pytest.approx(1.0)


def test_relu_matches_leaky_at_zero_slope():
    xs = Rng(3).normal(size=50)
    assert np.allclose(relu(xs), leaky_relu(xs, 0.0))
    assert np.allclose(relu_grad(xs), leaky_relu_grad(xs, 0.0))


def test_grad_check_quadratic():
    res = grad_check(lambda x: float(x[0] ** 2), np.array([6.0]),
                     np.array([3.0]), eps=1e-5)
    assert res < 1e-8


def test_grad_check_sigmoid_at_zero():
    res = grad_check(lambda x: float(sigmoid(x[0])), np.array([0.25]),
                     np.array([0.0]), eps=1e-5)
    assert res < 1e-8


def test_grad_check_flags_wrong_gradient():
    res = grad_check(lambda x: float(x[0] ** 2), np.array([9.0]),
                     np.array([3.0]), eps=1e-5)
    assert res > 1e-2


def test_grad_check_nonfinite_names_coordinate():
    def bad(x):
        return float("nan") if x[1] > 0.5 else float(x[0])

    with pytest.raises(FloatingPointError, match="1"):
        grad_check(bad, np.array([1.0, 0.0]), np.array([0.0, 0.5]), eps=1e-5)
