import numpy as np
import pytest
from scipy.linalg import expm

from attennkf.lie import (
    NonAntisymmetric,
    adjoint_sek3,
    exp_sek3,
    exp_so3,
    hat3,
    hat_sek3,
    inverse_sek3,
    is_group_element,
    is_rotation,
    left_jacobian_so3,
    log_so3,
    make_sek3,
    num_columns,
    vee3,
)


def random_rotvec(rng, max_angle=np.pi - 1e-3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def test_hat_vee_roundtrip():
    v = np.array([0.3, -1.2, 2.0])
    M = hat3(v)
    np.testing.assert_array_equal(M, -M.T)
    np.testing.assert_array_equal(vee3(M), v)
    np.testing.assert_allclose(M @ np.array([1.0, 2.0, 3.0]), np.cross(v, [1.0, 2.0, 3.0]))


def test_vee_rejects_symmetric():
    with pytest.raises(NonAntisymmetric):
        vee3(np.eye(3))


@pytest.mark.parametrize("theta", [np.zeros(3), [1e-9, 0, 0], [1e-5, -2e-5, 3e-6], [0.3, 0.2, -0.1], [0, 0, np.pi / 2]])
def test_exp_so3_matches_expm(theta):
    theta = np.asarray(theta, dtype=float)
    np.testing.assert_allclose(exp_so3(theta), expm(hat3(theta)), atol=1e-12)


def test_exp_zero_is_identity():
    np.testing.assert_array_equal(exp_so3(np.zeros(3)), np.eye(3))


def test_exp_pi_about_z():
    np.testing.assert_allclose(exp_so3([0, 0, np.pi]), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_log_exp_roundtrip_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        th = random_rotvec(rng)
        assert np.linalg.norm(log_so3(exp_so3(th)) - th) < 1e-9


@pytest.mark.parametrize("angle", [np.pi - 1e-2, np.pi - 1e-6, np.pi - 1e-9])
def test_log_near_pi(angle):
    rng = np.random.default_rng(1)
    for _ in range(20):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        R = exp_so3(axis * angle)
        w = log_so3(R)
        assert np.linalg.norm(w) <= np.pi + 1e-12
        np.testing.assert_allclose(exp_so3(w), R, atol=1e-9)


def test_log_at_pi_sign_convention():
    w = log_so3(np.diag([-1.0, -1.0, 1.0]))
    np.testing.assert_allclose(w, [0, 0, np.pi], atol=1e-12)


def test_log_small_angle():
    th = np.array([1e-7, -3e-7, 2e-7])
    np.testing.assert_allclose(log_so3(exp_so3(th)), th, rtol=1e-9, atol=1e-20)


@pytest.mark.parametrize("theta", [[1e-6, 0, 0], [0.2, -0.4, 0.1], [1.0, 2.0, -0.5]])
def test_left_jacobian_series_oracle(theta):
    # J_l = sum_k K^k / (k+1)!
    K = hat3(np.asarray(theta, dtype=float))
    J = np.zeros((3, 3))
    term = np.eye(3)
    fact = 1.0
    for k in range(40):
        fact *= k + 1
        J += term / fact
        term = term @ K
    np.testing.assert_allclose(left_jacobian_so3(theta), J, atol=1e-12)


@pytest.mark.parametrize("n_contacts", [0, 1, 4])
def test_exp_sek3_matches_expm(n_contacts):
    rng = np.random.default_rng(n_contacts)
    for _ in range(50):
        xi = rng.standard_normal(9 + 3 * n_contacts)
        xi[:3] = random_rotvec(rng, 3.0)
        np.testing.assert_allclose(exp_sek3(xi), expm(hat_sek3(xi)), atol=1e-9)


def test_exp_sek3_small_rotation_matches_expm():
    xi = np.concatenate([[1e-8, 0, -1e-8], np.arange(18.0)])
    np.testing.assert_allclose(exp_sek3(xi), expm(hat_sek3(xi)), atol=1e-12)


def test_inverse_sek3():
    rng = np.random.default_rng(3)
    X = exp_sek3(rng.standard_normal(21))
    np.testing.assert_allclose(X @ inverse_sek3(X), np.eye(9), atol=1e-12)
    np.testing.assert_allclose(inverse_sek3(X), np.linalg.inv(X), atol=1e-12)


def test_adjoint_identity():
    rng = np.random.default_rng(4)
    for _ in range(200):
        X = exp_sek3(rng.standard_normal(21))
        xi = 0.5 * rng.standard_normal(21)
        lhs = X @ exp_sek3(xi) @ inverse_sek3(X)
        rhs = exp_sek3(adjoint_sek3(X) @ xi)
        assert np.max(np.abs(lhs - rhs)) < 1e-8


def test_adjoint_of_identity_is_identity():
    np.testing.assert_array_equal(adjoint_sek3(np.eye(9)), np.eye(21))


def test_adjoint_is_homomorphism():
    rng = np.random.default_rng(5)
    X, Y = exp_sek3(rng.standard_normal(15)), exp_sek3(rng.standard_normal(15))
    np.testing.assert_allclose(adjoint_sek3(X @ Y), adjoint_sek3(X) @ adjoint_sek3(Y), atol=1e-10)


@pytest.mark.parametrize("dim,expected", [(9, 2), (12, 3), (21, 6)])
def test_num_columns(dim, expected):
    assert num_columns(dim) == expected


@pytest.mark.parametrize("dim", [6, 10, 20])
def test_num_columns_rejects(dim):
    with pytest.raises(ValueError):
        num_columns(dim)


def test_group_membership():
    rng = np.random.default_rng(6)
    R = exp_so3(random_rotvec(rng))
    assert is_rotation(R)
    assert not is_rotation(2.0 * R)
    X = make_sek3(R, rng.standard_normal((6, 3)))
    assert is_group_element(X)
    X[5, 0] = 1e-3
    assert not is_group_element(X)
