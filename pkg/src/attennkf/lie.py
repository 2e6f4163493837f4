"""Matrix Lie-group primitives for SO(3) and SE_{N+2}(3).

Tangent vectors of SE_{N+2}(3) are ordered ``[theta, v, p, d_1, ..., d_N]``,
each block a 3-vector, so a group with ``N`` contact columns has tangent
dimension ``3 * (N + 3)`` and matrix size ``(5 + N) x (5 + N)``.
"""

from __future__ import annotations

import numpy as np

SMALL_ANGLE = 1e-4
# Switch log_so3 to the diagonal axis extraction once cos(angle) drops below this.
NEAR_PI_COS = -0.99


class NonAntisymmetric(ValueError):
    pass


def hat3(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee3(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if np.linalg.norm(m + m.T) >= tol:
        raise NonAntisymmetric(f"matrix is not antisymmetric: |M + M^T| = {np.linalg.norm(m + m.T):.3g}")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def exp_so3(theta: np.ndarray) -> np.ndarray:
    """Rodrigues formula, with a second-order series below ``SMALL_ANGLE``."""
    theta = np.asarray(theta, dtype=float)
    angle = float(np.sqrt(theta @ theta))
    K = hat3(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Principal-branch logarithm, returning a rotation vector with norm <= pi.

    Near pi the axis is read off the symmetric part of ``R`` using the
    largest diagonal entry; the sign comes from the antisymmetric part, and
    an exact tie at pi picks the sign making the first nonzero entry positive.
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = float(np.sqrt(w @ w))
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    c = min(1.0, max(-1.0, c))
    angle = float(np.arctan2(s, c))
    if angle < SMALL_ANGLE:
        return w * (1.0 + angle * angle / 6.0)
    if c > NEAR_PI_COS:
        return w * (angle / s)

    S = 0.5 * (R + R.T)
    i = int(np.argmax(np.diag(S)))
    axis = np.empty(3)
    axis[i] = np.sqrt(max(S[i, i] - c, 0.0) / (1.0 - c))
    for j in range(3):
        if j != i:
            axis[j] = S[i, j] / ((1.0 - c) * axis[i])
    axis /= np.linalg.norm(axis)
    d = float(axis @ w)
    if d < 0.0:
        axis = -axis
    elif d == 0.0:
        first = axis[np.flatnonzero(np.abs(axis) > 1e-12)[0]]
        if first < 0.0:
            axis = -axis
    return angle * axis


def left_jacobian_so3(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    angle = float(np.sqrt(theta @ theta))
    K = hat3(theta)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 6.0
    a2 = angle * angle
    return np.eye(3) + ((1.0 - np.cos(angle)) / a2) * K + ((angle - np.sin(angle)) / (a2 * angle)) * (K @ K)


def num_columns(dim: int) -> int:
    """Number of translational columns (v, p, contacts) for a tangent dimension."""
    if dim % 3 or dim < 9:
        raise ValueError(f"tangent dimension {dim} is not 3 * (N + 3)")
    return dim // 3 - 1


def hat_sek3(xi: np.ndarray) -> np.ndarray:
    """Lie-algebra matrix of a tangent vector ``[theta, v, p, d_1..d_N]``."""
    xi = np.asarray(xi, dtype=float)
    k = num_columns(xi.size)
    m = np.zeros((3 + k, 3 + k))
    m[:3, :3] = hat3(xi[:3])
    m[:3, 3:] = xi[3:].reshape(k, 3).T
    return m


def exp_sek3(xi: np.ndarray) -> np.ndarray:
    """Closed-form exponential: rotation block ``exp_so3(theta)``, columns ``J_l(theta) x_j``."""
    xi = np.asarray(xi, dtype=float)
    k = num_columns(xi.size)
    X = np.eye(3 + k)
    theta = xi[:3]
    X[:3, :3] = exp_so3(theta)
    X[:3, 3:] = left_jacobian_so3(theta) @ xi[3:].reshape(k, 3).T
    return X


def inverse_sek3(X: np.ndarray) -> np.ndarray:
    R = X[:3, :3]
    Xi = np.eye(X.shape[0])
    Xi[:3, :3] = R.T
    Xi[:3, 3:] = -R.T @ X[:3, 3:]
    return Xi


def adjoint_sek3(X: np.ndarray) -> np.ndarray:
    """Adjoint so that ``X exp(xi) X^-1 = exp(Ad_X xi)``."""
    X = np.asarray(X, dtype=float)
    k = X.shape[0] - 3
    R = X[:3, :3]
    Ad = np.zeros((3 * (k + 1), 3 * (k + 1)))
    Ad[:3, :3] = R
    for j in range(k):
        rows = slice(3 + 3 * j, 6 + 3 * j)
        Ad[rows, rows] = R
        Ad[rows, :3] = hat3(X[:3, 3 + j]) @ R
    return Ad


def make_sek3(R: np.ndarray, columns) -> np.ndarray:
    """Assemble a group element from a rotation and a list of 3-vector columns."""
    cols = np.asarray(columns, dtype=float).reshape(-1, 3)
    X = np.eye(3 + cols.shape[0])
    X[:3, :3] = R
    X[:3, 3:] = cols.T
    return X


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R)
    return (
        R.shape == (3, 3)
        and np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def is_group_element(X: np.ndarray, tol: float = 1e-9) -> bool:
    X = np.asarray(X)
    n = X.shape[0]
    if X.shape != (n, n) or n < 5 or not is_rotation(X[:3, :3], tol):
        return False
    return bool(np.array_equal(X[3:, :3], np.zeros((n - 3, 3))) and np.array_equal(X[3:, 3:], np.eye(n - 3)))
