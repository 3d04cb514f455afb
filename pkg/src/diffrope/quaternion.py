"""Quaternion and 3-vector primitives.

Quaternions are stored scalar-first, ``(w, x, y, z)``, and multiply with the
Hamilton convention (``ij = k``).  Every function broadcasts over leading
axes, so a ``(n, 4)`` array is a batch of ``n`` quaternions.

Nothing here re-normalizes silently; callers decide when to normalize.
"""
from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-9

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
E1 = np.array([1.0, 0.0, 0.0])
E2 = np.array([0.0, 1.0, 0.0])
E3 = np.array([0.0, 0.0, 1.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def check_unit(q, tol: float = UNIT_TOL) -> None:
    norms = np.linalg.norm(np.asarray(q, dtype=float), axis=-1)
    bad = np.abs(norms - 1.0) > tol
    if np.any(bad):
        raise ValueError(f"quaternion is not unit norm (|q| = {np.ravel(norms)[np.ravel(bad)][0]!r})")


def pure(v) -> np.ndarray:
    """Embed a 3-vector as the pure quaternion ``(0, v)``."""
    v = np.asarray(v, dtype=float)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def rotate(q, v) -> np.ndarray:
    """Rotate ``v`` by ``q`` using the quadratic form of ``q v q*``.

    For non-unit ``q`` this equals ``|q|^2`` times the rotation, which is the
    form whose derivative appears in the shear/stretch constraint.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.sum(u * v, axis=-1, keepdims=True)
    uu = np.sum(u * u, axis=-1, keepdims=True)
    return (w * w - uu) * v + 2.0 * uv * u + 2.0 * w * np.cross(u, v)


def rotate_basis3(q, tol: float = UNIT_TOL) -> np.ndarray:
    """Third column of the rotation matrix of ``q``, i.e. ``R(q) e3``."""
    check_unit(q, tol)
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [2.0 * (x * z + w * y), 2.0 * (y * z - w * x), w * w - x * x - y * y + z * z],
        axis=-1,
    )


def rotation_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def skew(v) -> np.ndarray:
    """Matrix ``S`` with ``S @ u == cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1] = -v[..., 2]
    s[..., 0, 2] = v[..., 1]
    s[..., 1, 0] = v[..., 2]
    s[..., 1, 2] = -v[..., 0]
    s[..., 2, 0] = -v[..., 1]
    s[..., 2, 1] = v[..., 0]
    return s


def axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def from_two_vectors(a, b) -> np.ndarray:
    """Shortest-arc unit quaternion rotating direction ``a`` onto ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    a, b = np.broadcast_arrays(a, b)
    d = np.sum(a * b, axis=-1)
    q = np.concatenate([(1.0 + d)[..., None], np.cross(a, b)], axis=-1)
    # antiparallel: rotate by pi about any axis perpendicular to a
    anti = d < -1.0 + 1e-12
    if np.any(anti):
        aa = a[anti]
        helper = np.where(np.abs(aa[:, :1]) < 0.9, E1, E2)
        perp = np.cross(aa, helper)
        perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
        q[anti] = np.concatenate([np.zeros((len(aa), 1)), perp], axis=-1)
    return quat_normalize(q)
