"""Rotation algebra on scalar-first unit quaternions.

All rotation matrices are passive: ``quat_to_matrix(q_AB)`` maps coordinates
expressed in frame B into frame A.  The three-parameter chart maps ``p`` to

    q = 2 / (|p|^2 + 1) * (p1, p2, p3, (1 - |p|^2) / 2)

with the first three entries going to ``(qw, qx, qy)`` and the last to ``qz``.
Under this mapping ``p = (1, 0, 0)`` is the identity and rotations about the
third axis only ever change ``p1``.
"""

from __future__ import annotations

import numpy as np

SINGULAR_TOL = 1e-9


class SingularParametrizationError(ValueError):
    """Raised when a quaternion sits on the chart singularity (qz = -1)."""


def skew(u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return np.array(
        [
            [0.0, -u[2], u[1]],
            [u[2], 0.0, -u[0]],
            [-u[1], u[0], 0.0],
        ]
    )


def normalize_quat(q) -> np.ndarray:
    """Unit-normalize ``q`` and flip it into the ``qw >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


def params_to_quat(p) -> np.ndarray:
    """Unit quaternion of ``p``; a stack (n, 3) gives (n, 4)."""
    p = np.asarray(p, dtype=float)
    a2 = np.sum(p * p, axis=-1)
    s = 2.0 / (a2 + 1.0)
    return np.concatenate([s[..., None] * p, ((1.0 - a2) / (a2 + 1.0))[..., None]], axis=-1)


def quat_to_params(q, canonical: bool = False) -> np.ndarray:
    """Inverse of :func:`params_to_quat`.

    With ``canonical=True`` the sign of ``q`` is first chosen so that
    ``qz >= 0``, which keeps the result inside ``|p| <= 1`` and as far from the
    singularity as possible.  Solvers are seeded this way.
    """
    q = np.asarray(q, dtype=float)
    if canonical and q[3] < 0.0:
        q = -q
    den = 1.0 + q[3]
    if den < SINGULAR_TOL:
        raise SingularParametrizationError(
            f"quaternion {q} is at the parametrization singularity (qz = -1)"
        )
    return q[:3] / den


def quat_to_matrix(q) -> np.ndarray:
    """Passive rotation matrix of ``q``.

    Written as the homogeneous quadratic form so that derivatives with respect
    to raw (unnormalized) components agree with :func:`d_rotated_vec_d_quat`.
    """
    q = np.asarray(q, dtype=float)
    qw, qv = q[0], q[1:]
    return (qw * qw - qv @ qv) * np.eye(3) + 2.0 * np.outer(qv, qv) - 2.0 * qw * skew(qv)


def matrix_to_quat(R) -> np.ndarray:
    """Quaternion (qw >= 0) whose passive matrix is ``R`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # passive form: R[1,2]-R[2,1] = 4 qw qx, R[2,0]-R[0,2] = 4 qw qy, R[0,1]-R[1,0] = 4 qw qz
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(cands))
    if k == 0:
        qw = 0.5 * np.sqrt(1.0 + tr)
        q = np.array(
            [qw, (R[1, 2] - R[2, 1]) / (4 * qw), (R[2, 0] - R[0, 2]) / (4 * qw), (R[0, 1] - R[1, 0]) / (4 * qw)]
        )
    elif k == 1:
        qx = 0.5 * np.sqrt(1.0 + 2 * R[0, 0] - tr)
        q = np.array(
            [(R[1, 2] - R[2, 1]) / (4 * qx), qx, (R[0, 1] + R[1, 0]) / (4 * qx), (R[0, 2] + R[2, 0]) / (4 * qx)]
        )
    elif k == 2:
        qy = 0.5 * np.sqrt(1.0 + 2 * R[1, 1] - tr)
        q = np.array(
            [(R[2, 0] - R[0, 2]) / (4 * qy), (R[0, 1] + R[1, 0]) / (4 * qy), qy, (R[1, 2] + R[2, 1]) / (4 * qy)]
        )
    else:
        qz = 0.5 * np.sqrt(1.0 + 2 * R[2, 2] - tr)
        q = np.array(
            [(R[0, 1] - R[1, 0]) / (4 * qz), (R[0, 2] + R[2, 0]) / (4 * qz), (R[1, 2] + R[2, 1]) / (4 * qz), qz]
        )
    return normalize_quat(q)


def params_to_matrix(p) -> np.ndarray:
    return quat_to_matrix(params_to_quat(p))


def quats_to_matrices(Q) -> np.ndarray:
    """Passive matrices for a stack of quaternions (n, 4) -> (n, 3, 3)."""
    Q = np.asarray(Q, dtype=float)
    qw, x, y, z = Q[:, 0], Q[:, 1], Q[:, 2], Q[:, 3]
    d = qw * qw - (x * x + y * y + z * z)
    R = np.empty((len(Q), 3, 3))
    R[:, 0, 0] = d + 2 * x * x
    R[:, 1, 1] = d + 2 * y * y
    R[:, 2, 2] = d + 2 * z * z
    R[:, 0, 1] = 2 * (x * y + qw * z)
    R[:, 1, 0] = 2 * (x * y - qw * z)
    R[:, 0, 2] = 2 * (x * z - qw * y)
    R[:, 2, 0] = 2 * (x * z + qw * y)
    R[:, 1, 2] = 2 * (y * z + qw * x)
    R[:, 2, 1] = 2 * (y * z - qw * x)
    return R


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, av = a[0], np.asarray(a[1:], dtype=float)
    bw, bv = b[0], np.asarray(b[1:], dtype=float)
    return np.concatenate(([aw * bw - av @ bv], aw * bv + bw * av + np.cross(av, bv)))


def rotate_sandwich(q, u) -> np.ndarray:
    """Passive rotation by explicit quaternion products, ``q* (0,u) q``."""
    g = quat_mul(quat_mul(quat_conj(q), np.concatenate(([0.0], u))), q)
    return g[1:]


def d_rotated_vec_d_quat(q, u) -> np.ndarray:
    """3x4 derivative of ``quat_to_matrix(q) @ u`` w.r.t. ``(qw, qx, qy, qz)``."""
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    qw, qv = q[0], q[1:]
    out = np.empty((3, 4))
    out[:, 0] = qw * u + np.cross(u, qv)
    out[:, 1:] = (qv @ u) * np.eye(3) - np.outer(u, qv) + np.outer(qv, u) + qw * skew(u)
    return 2.0 * out


def d_rotated_vecs_d_quat(q, U) -> np.ndarray:
    """Batched :func:`d_rotated_vec_d_quat`.

    ``q`` is (4,) or (n, 4), ``U`` is (n, 3); returns (n, 3, 4).
    """
    q = np.asarray(q, dtype=float)
    U = np.asarray(U, dtype=float)
    n = U.shape[0]
    q = np.broadcast_to(q, (n, 4))
    qw, qv = q[:, 0], q[:, 1:]
    out = np.empty((n, 3, 4))
    out[:, :, 0] = qw[:, None] * U + np.cross(U, qv)
    qu = np.einsum("ij,ij->i", U, qv)
    blk = qu[:, None, None] * np.eye(3) - U[:, :, None] * qv[:, None, :] + qv[:, :, None] * U[:, None, :]
    # + qw [u^]
    blk[:, 0, 1] -= qw * U[:, 2]
    blk[:, 0, 2] += qw * U[:, 1]
    blk[:, 1, 0] += qw * U[:, 2]
    blk[:, 1, 2] -= qw * U[:, 0]
    blk[:, 2, 0] -= qw * U[:, 1]
    blk[:, 2, 1] += qw * U[:, 0]
    out[:, :, 1:] = blk
    return 2.0 * out


def d_quat_d_params(p) -> np.ndarray:
    """4x3 derivative of :func:`params_to_quat`, rows ordered (qw, qx, qy, qz).

    Also accepts a stack of parameter vectors (n, 3), returning (n, 4, 3).
    """
    p = np.asarray(p, dtype=float)
    if p.ndim == 2:
        return np.stack([d_quat_d_params(pi) for pi in p])
    a2 = p @ p
    h = 0.5 * (a2 + 1.0)
    M = np.empty((4, 3))
    M[:3, :] = np.outer(p, p) - h * np.eye(3)
    M[3, :] = p
    return -4.0 / (a2 + 1.0) ** 2 * M


def rotation_angle(q_true, q_est) -> float:
    """Angle of the error rotation ``q_true^-1 * q_est`` in radians."""
    e = quat_mul(quat_conj(q_true), q_est)
    return 2.0 * np.arcsin(min(1.0, float(np.linalg.norm(e[1:]))))


def euler321_from_matrix(C) -> np.ndarray:
    """(roll, pitch, yaw) of a passive matrix ``C = R1(roll) R2(pitch) R3(yaw)``."""
    C = np.asarray(C, dtype=float)
    yaw = np.arctan2(C[0, 1], C[0, 0])
    pitch = -np.arcsin(np.clip(C[0, 2], -1.0, 1.0))
    roll = np.arctan2(C[1, 2], C[2, 2])
    return np.array([roll, pitch, yaw])


def _r1(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def _r2(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _r3(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def matrix_from_euler321(roll, pitch, yaw) -> np.ndarray:
    """Passive matrix ``R1(roll) R2(pitch) R3(yaw)``."""
    return _r1(roll) @ _r2(pitch) @ _r3(yaw)


def attitude_error_euler(q_true, q_est) -> np.ndarray:
    """Per-axis (roll, pitch, yaw) error angles in radians.

    The error rotation is ``[NB]_true^T [NB]_est`` read as a body-frame
    3-2-1 sequence; yaw is about the third (boresight-aligned) body axis.
    """
    E = quat_to_matrix(q_true).T @ quat_to_matrix(q_est)
    return euler321_from_matrix(E.T)
