"""Small SO(3), quaternion and unit-bearing helpers.

Quaternions are Hamilton, stored as ``(w, x, y, z)``. A quaternion ``q``
represents the rotation matrix ``R(q)`` that maps vectors from the frame
it is attached to into the reference frame.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + s * K + c * K @ K


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix."""
    return quat_to_rotvec(quat_from_matrix(R))


def right_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): ``Exp(phi + d) ~ Exp(phi) Exp(Jr d)``."""
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(angle)) / angle**2
    b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) - a * K + b * K @ K


def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps logs and comparisons stable
    return -q if q[0] < 0.0 else q


def quat_from_rotvec(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    if angle < _SMALL_ANGLE:
        q = np.array([1.0, 0.5 * phi[0], 0.5 * phi[1], 0.5 * phi[2]])
        return q / np.linalg.norm(q)
    axis = phi / angle
    return np.concatenate([[np.cos(0.5 * angle)], np.sin(0.5 * angle) * axis])


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < _SMALL_ANGLE:
        return 2.0 * vec / q[0]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle * vec / s


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.asarray(q))


def bearing_basis(mu: np.ndarray) -> np.ndarray:
    """3x2 orthonormal basis of the tangent plane of the unit sphere at ``mu``.

    The basis is the image of the x/y axes under the minimal rotation taking
    ``e_z`` to ``mu``; it is smooth everywhere except at ``mu = -e_z``.
    """
    x, y, z = mu
    a = 1.0 / (1.0 + z)
    return np.array(
        [
            [1.0 - a * x * x, -a * x * y],
            [-a * x * y, 1.0 - a * y * y],
            [-x, -y],
        ]
    )


def bearing_boxplus(mu: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Move a unit bearing along the sphere; first order ``mu + N(mu) delta``."""
    step = bearing_basis(mu) @ delta
    out = exp_so3(np.cross(mu, step)) @ mu
    return out / np.linalg.norm(out)


def bearing_boxminus(mu1: np.ndarray, mu2: np.ndarray) -> np.ndarray:
    """Tangent coordinates at ``mu2`` of ``mu1``; inverse of :func:`bearing_boxplus`."""
    axis = np.cross(mu2, mu1)
    s = np.linalg.norm(axis)
    c = float(np.dot(mu2, mu1))
    if s < 1e-15:
        return np.zeros(2)
    omega = np.arctan2(s, c) * axis / s
    return bearing_basis(mu2).T @ np.cross(omega, mu2)


def rotation_about(axis: str, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"unknown axis {axis!r}")
