"""Discretized rope state and the shear/stretch, bend/twist and distance constraints.

Particles ``x[0..K-1]`` carry positions; segments ``q[0..K-2]`` carry unit
quaternions describing the material frame between neighbouring particles.

Two layers live here:

* per-instance functions (``shear_stretch_residual(state, i)`` ...) returning
  plain numpy values and explicit Jacobians, used for checking and reporting;
* batched ``project_*`` functions used by the solver, written with the ops in
  :mod:`diffrope.autodiff` so the same code runs with or without a tape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import quaternion as quat

CURRENT = "current"
REST = "rest"


class DegenerateConstraintError(ValueError):
    pass


class SingularProjectionError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None) -> None:
        super().__init__(message)
        self.index = index


@dataclass
class RopeState:
    positions: np.ndarray  # (K, 3), may be a Var
    quaternions: np.ndarray  # (K-1, 4), may be a Var
    rest_positions: np.ndarray
    rest_quaternions: np.ndarray
    inv_mass: np.ndarray  # (K,), 0 marks fixed/controlled particles
    inv_inertia: np.ndarray  # (K-1,)
    rest_lengths: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.rest_positions = np.asarray(self.rest_positions, dtype=float)
        self.rest_quaternions = np.asarray(self.rest_quaternions, dtype=float)
        self.inv_mass = np.asarray(self.inv_mass, dtype=float)
        self.inv_inertia = np.asarray(self.inv_inertia, dtype=float)
        if not ad.is_var(self.positions):
            self.positions = np.asarray(self.positions, dtype=float)
        if not ad.is_var(self.quaternions):
            self.quaternions = np.asarray(self.quaternions, dtype=float)
        k = len(self.rest_positions)
        if k < 2:
            raise ValueError("a rope needs at least two particles")
        if np.shape(self.positions) != (k, 3) or self.rest_positions.shape != (k, 3):
            raise ValueError("positions must have shape (K, 3)")
        if np.shape(self.quaternions) != (k - 1, 4) or self.rest_quaternions.shape != (k - 1, 4):
            raise ValueError("quaternions must have shape (K-1, 4)")
        if self.inv_mass.shape != (k,) or self.inv_inertia.shape != (k - 1,):
            raise ValueError("inv_mass must be (K,) and inv_inertia (K-1,)")
        if np.any(self.inv_mass < 0) or np.any(self.inv_inertia < 0):
            raise ValueError("inverse masses and inertias must be non-negative")
        quat.check_unit(ad.value(self.quaternions))
        quat.check_unit(self.rest_quaternions)
        self.rest_lengths = np.linalg.norm(np.diff(self.rest_positions, axis=0), axis=1)
        if np.any(self.rest_lengths <= 0):
            raise DegenerateConstraintError("rest segment length must be positive")

    @property
    def K(self) -> int:
        return len(self.rest_positions)

    @property
    def fixed(self) -> np.ndarray:
        return np.flatnonzero(self.inv_mass == 0)

    @property
    def rest_length(self) -> float:
        return float(self.rest_lengths.sum())

    @property
    def rest_darboux(self) -> np.ndarray:
        rq = self.rest_quaternions
        return quat.quat_multiply(quat.quat_conjugate(rq[:-1]), rq[1:])

    def with_pose(self, positions, quaternions) -> "RopeState":
        return replace(self, positions=positions, quaternions=quaternions)

    def detached(self) -> "RopeState":
        return self.with_pose(
            np.array(ad.value(self.positions), dtype=float), np.array(ad.value(self.quaternions), dtype=float)
        )

    def length(self) -> float:
        x = ad.value(self.positions)
        return float(np.linalg.norm(np.diff(x, axis=0), axis=1).sum())

    # constructors ---------------------------------------------------------

    @classmethod
    def straight(
        cls,
        K: int,
        length: float,
        start: Sequence[float] = (0.0, 0.0, 0.0),
        direction: Sequence[float] = (1.0, 0.0, 0.0),
        fixed: Sequence[int] = (),
        inv_mass: float = 1.0,
        inv_inertia: float | None = None,
    ) -> "RopeState":
        """Rope at rest along a straight line, current pose equal to rest pose.

        ``inv_inertia=None`` picks ``inv_mass / (2 l^2)`` so that orientation and
        position corrections of the shear/stretch constraint are of equal size.
        """
        if K < 2:
            raise ValueError("a rope needs at least two particles")
        d = np.asarray(direction, dtype=float)
        d = d / np.linalg.norm(d)
        s = np.linspace(0.0, length, K)
        x = np.asarray(start, dtype=float) + s[:, None] * d
        q = np.tile(quat.from_two_vectors(quat.E3, d), (K - 1, 1))
        w = np.full(K, float(inv_mass))
        w[list(fixed)] = 0.0
        if inv_inertia is None:
            inv_inertia = inv_mass / (2.0 * (length / (K - 1)) ** 2)
        return cls(x, q.copy(), x.copy(), q.copy(), w, np.full(K - 1, float(inv_inertia)))

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "positions": np.asarray(ad.value(self.positions)).tolist(),
            "quaternions": np.asarray(ad.value(self.quaternions)).tolist(),
            "rest_positions": self.rest_positions.tolist(),
            "rest_quaternions": self.rest_quaternions.tolist(),
            "inv_mass": self.inv_mass.tolist(),
            "inv_inertia": self.inv_inertia.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RopeState":
        try:
            x = np.asarray(d["positions"], dtype=float)
            q = np.asarray(d["quaternions"], dtype=float)
            return cls(
                x,
                q,
                np.asarray(d.get("rest_positions", x), dtype=float),
                np.asarray(d.get("rest_quaternions", q), dtype=float),
                np.asarray(d["inv_mass"], dtype=float),
                np.asarray(d["inv_inertia"], dtype=float),
            )
        except KeyError as e:
            raise ValueError(f"rope state is missing field {e.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RopeState":
        return cls.from_dict(json.loads(Path(path).read_text()))


def align_e3(d):
    """Differentiable shortest-arc quaternion taking ``e3`` onto direction ``d`` (batched)."""
    b = d / ad.norm(d)[..., None]
    bv = ad.value(b)
    anti = bv[..., 2] < -1.0 + 1e-12
    q = ad.stack([1.0 + b[..., 2], -b[..., 1], b[..., 0], np.zeros(np.shape(bv)[:-1])], axis=-1)
    if np.any(anti):
        q = ad.where(anti[..., None], np.array([0.0, 1.0, 0.0, 0.0]), q)
    q = q / ad.norm(q)[..., None]
    if np.any(anti):
        q = ad.where(anti[..., None], np.array([0.0, 1.0, 0.0, 0.0]), q)
    return q


def anchored(template: RopeState, anchors: Mapping[int, object]) -> RopeState:
    """Initial pose with the given particles placed at ``anchors``.

    Particles between two anchors are interpolated linearly in index; those
    outside the anchored range keep their offset to the nearest anchor.
    Segment orientations are aligned with the resulting segment directions.
    Anchor positions may be Vars, in which case the whole pose is differentiable.
    """
    K = template.K
    idx = sorted(int(i) for i in anchors)
    if not idx:
        return template
    if idx[0] < 0 or idx[-1] >= K:
        raise IndexError("anchor index out of range")
    base = np.asarray(ad.value(template.positions), dtype=float)
    B = np.zeros((K, len(idx)))
    off = np.zeros((K, 3))
    for p in range(K):
        if p <= idx[0]:
            B[p, 0] = 1.0
            off[p] = base[p] - base[idx[0]]
        elif p >= idx[-1]:
            B[p, -1] = 1.0
            off[p] = base[p] - base[idx[-1]]
        else:
            j = int(np.searchsorted(idx, p, side="right")) - 1
            lo, hi = idx[j], idx[j + 1]
            t = (p - lo) / (hi - lo)
            B[p, j] = 1.0 - t
            B[p, j + 1] = t
    pts = [anchors[i] for i in idx]
    if any(ad.is_var(a) for a in pts):
        A = ad.stack([a if ad.is_var(a) else np.asarray(a, dtype=float) for a in pts], axis=0)
        x = ad.matmul(B, A) + off
    else:
        x = B @ np.asarray(pts, dtype=float) + off
    seg = x[1:] - x[:-1]
    if np.any(np.linalg.norm(ad.value(seg), axis=-1) == 0):
        raise DegenerateConstraintError("anchors produce coincident particles")
    return template.with_pose(x, align_e3(seg))


# per-instance constraint evaluation ---------------------------------------------


def _pv(state: RopeState):
    return np.asarray(ad.value(state.positions)), np.asarray(ad.value(state.quaternions))


def _check_segment(state: RopeState, i: int) -> None:
    if not 0 <= i <= state.K - 2:
        raise IndexError(f"segment index {i} out of range for K={state.K}")


def shear_stretch_residual(state: RopeState, i: int) -> np.ndarray:
    _check_segment(state, i)
    x, q = _pv(state)
    return (x[i + 1] - x[i]) / state.rest_lengths[i] - quat.rotate_basis3(q[i])


def shear_stretch_gradients(state: RopeState, i: int):
    """Jacobians of the shear/stretch residual w.r.t. ``x_i``, ``x_{i+1}`` and ``q_i``."""
    _check_segment(state, i)
    _, q = _pv(state)
    l = state.rest_lengths[i]
    eye = np.eye(3)
    w, v = q[i, 0], q[i, 1:]
    e3 = quat.E3
    d_re3 = 2.0 * np.column_stack(
        [
            w * e3 - np.cross(e3, v),
            (v @ e3) * eye + np.outer(v, e3) - np.outer(e3, v) - w * quat.skew(e3),
        ]
    )
    return -eye / l, eye / l, -d_re3


def darboux_sign(omega: np.ndarray, rest_omega: np.ndarray) -> np.ndarray:
    """+1 where the rest Darboux quaternion is closer to the current one than its negation."""
    omega = np.asarray(omega)
    rest_omega = np.asarray(rest_omega)
    dm = np.sum((omega - rest_omega) ** 2, axis=-1)
    dp = np.sum((omega + rest_omega) ** 2, axis=-1)
    return np.where(dm <= dp, 1.0, -1.0)


def bend_twist_residual(state: RopeState, i: int) -> np.ndarray:
    if not 0 <= i <= state.K - 3:
        raise IndexError(f"bend/twist index {i} out of range for K={state.K}")
    _, q = _pv(state)
    omega = quat.quat_multiply(quat.quat_conjugate(q[i]), q[i + 1])
    rest = state.rest_darboux[i]
    return (omega - darboux_sign(omega, rest) * rest)[1:]


def bend_twist_gradients(state: RopeState, i: int):
    """Jacobians of the bend/twist residual w.r.t. ``q_i`` and ``q_{i+1}``."""
    if not 0 <= i <= state.K - 3:
        raise IndexError(f"bend/twist index {i} out of range for K={state.K}")
    _, q = _pv(state)

    def block(p):
        return np.column_stack([-p[1:], p[0] * np.eye(3) - quat.skew(p[1:])])

    return -block(q[i + 1]), block(q[i])


def distance_residual(state: RopeState, i: int) -> float:
    _check_segment(state, i)
    x, _ = _pv(state)
    return float(np.linalg.norm(x[i + 1] - x[i]) - state.rest_lengths[i])


def distance_gradients(state: RopeState, i: int, denominator: str = CURRENT):
    """Gradients of the distance residual w.r.t. ``x_i`` and ``x_{i+1}``.

    ``denominator="current"`` gives the true derivative; ``"rest"`` divides the
    segment vector by the rest length instead.
    """
    _check_segment(state, i)
    x, _ = _pv(state)
    d = x[i + 1] - x[i]
    n = np.linalg.norm(d)
    if n == 0.0:
        raise DegenerateConstraintError(f"particles {i} and {i + 1} coincide")
    if denominator == CURRENT:
        g = d / n
    elif denominator == REST:
        g = d / state.rest_lengths[i]
    else:
        raise ValueError(f"unknown denominator variant {denominator!r}")
    return -g, g


def xpbd_delta_lambda(C, grads: Sequence, weights: Sequence[float], alpha: float = 0.0, lam=0.0, index=None):
    """Compliant multiplier update for one constraint instance.

    ``grads[p]`` is the Jacobian of ``C`` w.r.t. body ``p`` (shape ``(m, n_p)``)
    and ``weights[p]`` its scalar inverse mass or inertia.  Returns
    ``(dlam, deltas)`` with ``deltas[p] = weights[p] * grads[p].T @ dlam``.
    """
    C = np.atleast_1d(np.asarray(C, dtype=float))
    m = C.size
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (m,))
    grads = [np.asarray(g, dtype=float).reshape(m, -1) for g in grads]
    A = alpha * np.eye(m)
    for g, w in zip(grads, weights):
        A = A + w * g @ g.T
    if all(w == 0 for w in weights):
        return np.zeros(m), [np.zeros(g.shape[1]) for g in grads]
    try:
        if abs(np.linalg.det(A)) < 1e-300:
            raise np.linalg.LinAlgError
        dlam = -np.linalg.solve(A, C + alpha * lam)
    except np.linalg.LinAlgError:
        raise SingularProjectionError(f"singular projection system for constraint {index}", index) from None
    return dlam, [w * g.T @ dlam for g, w in zip(grads, weights)]


# batched residuals ----------------------------------------------------------------


def shear_stretch_residuals(x, q, rest_lengths):
    return (x[1:] - x[:-1]) / rest_lengths[:, None] - ad.qrotate(q, quat.E3)


def bend_twist_residuals(q, rest_darboux):
    omega = ad.qmul(ad.qconj(q[:-1]), q[1:])
    xi = darboux_sign(ad.value(omega), rest_darboux)
    return (omega - xi[:, None] * rest_darboux)[:, 1:]


def distance_residuals(x, rest_lengths):
    return ad.norm(x[1:] - x[:-1]) - rest_lengths


def max_residuals(state: RopeState) -> tuple[float, float, float]:
    """Largest residual norm of each family (shear, bend, distance)."""
    x, q = _pv(state)
    cs = np.linalg.norm(shear_stretch_residuals(x, q, state.rest_lengths), axis=1)
    cb = np.linalg.norm(bend_twist_residuals(q, state.rest_darboux), axis=1) if state.K > 2 else np.zeros(1)
    cd = np.abs(distance_residuals(x, state.rest_lengths))
    return float(cs.max()), float(cb.max()), float(cd.max())


# batched projections -----------------------------------------------------------------


def _safe_inverse(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    live = a > 0
    return np.where(live, a, 1.0), live


def project_shear_stretch(x, q, state: RopeState, alpha: float = 0.0, lam=None):
    """Per-constraint shear/stretch projections, summed onto their bodies.

    Returns ``(dx (K,3), dq (K-1,4), dlam (K-1,3))``.  For unit ``q`` the
    system matrix is ``((w_i + w_{i+1}) / l^2 + 4 w_q |q|^2) I``.
    """
    l = state.rest_lengths
    wx = state.inv_mass
    wq = state.inv_inertia
    C = shear_stretch_residuals(x, q, l)
    q2 = np.sum(np.asarray(ad.value(q)) ** 2, axis=1)
    a = (wx[:-1] + wx[1:]) / l**2 + 4.0 * wq * q2
    den, live = _safe_inverse(a + alpha)
    rhs = C if lam is None or alpha == 0.0 else C + alpha * lam
    dlam = -rhs * (live / den)[:, None]
    dxi = dlam * (-wx[:-1] / l)[:, None]
    dxj = dlam * (wx[1:] / l)[:, None]
    dx = ad.pad_rows(dxi, 0, 1) + ad.pad_rows(dxj, 1, 0)
    # w_q * (-dRe3/dq)^T dlam = 2 w_q (dlam ⊗ q ⊗ e3)
    pq = ad.qmul(ad.qmul(_pure(dlam), q), _PURE_E3)
    dq = pq * (2.0 * wq)[:, None]
    return dx, dq, dlam


_PURE_E3 = np.array([0.0, 0.0, 0.0, 1.0])


def _pure(v):
    n = np.shape(ad.value(v))[0]
    return ad.concatenate([np.zeros((n, 1)), v], axis=1)


def project_bend_twist(q, state: RopeState, alpha: float = 0.0, lam=None):
    """Bend/twist projections; returns ``(dq (K-1,4), dlam (K-2,3))``."""
    wq = state.inv_inertia
    C = bend_twist_residuals(q, state.rest_darboux)
    q2 = np.sum(np.asarray(ad.value(q)) ** 2, axis=1)
    a = wq[:-1] * q2[1:] + wq[1:] * q2[:-1]
    den, live = _safe_inverse(a + alpha)
    rhs = C if lam is None or alpha == 0.0 else C + alpha * lam
    dlam = -rhs * (live / den)[:, None]
    pl = _pure(dlam)
    dqi = -ad.qmul(q[1:], pl) * wq[:-1, None]
    dqj = ad.qmul(q[:-1], pl) * wq[1:, None]
    return ad.pad_rows(dqi, 0, 1) + ad.pad_rows(dqj, 1, 0), dlam


def project_distance(x, state: RopeState, alpha: float = 0.0, lam=None, denominator: str = CURRENT):
    """Independent distance projections; returns ``(dx (K,3), dlam (K-1,))``.

    ``denominator`` selects the constraint gradient as in ``distance_gradients``.
    """
    if denominator not in (CURRENT, REST):
        raise ValueError(f"unknown denominator variant {denominator!r}")
    l = state.rest_lengths
    wx = state.inv_mass
    d = x[1:] - x[:-1]
    n = ad.norm(d)
    nv = np.asarray(ad.value(n))
    live_w = (wx[:-1] + wx[1:]) > 0
    bad = np.flatnonzero(live_w & (nv == 0.0))
    if bad.size:
        raise SingularProjectionError(f"particles {bad[0]} and {bad[0] + 1} coincide", int(bad[0]))
    if denominator == CURRENT:
        u = d / ad.where(nv > 0, n, 1.0)[:, None]
        gg = 1.0
    else:
        u = d / l[:, None]
        gg = ad.dot(u, u)
    a = (wx[:-1] + wx[1:]) * gg
    av = np.asarray(ad.value(a)) + alpha
    live = av > 0
    C = n - l
    rhs = C if lam is None or alpha == 0.0 else C + alpha * lam
    dlam = -rhs * live / ad.where(live, a + alpha, 1.0)
    step = u * dlam[:, None]
    dx = ad.pad_rows(step * (-wx[:-1])[:, None], 0, 1) + ad.pad_rows(step * wx[1:, None], 1, 0)
    return dx, dlam


def constraint_counts(K: int) -> dict[str, np.ndarray]:
    """How many constraints of each family touch each body (for Jacobi averaging)."""
    edge = np.zeros(K)
    edge[:-1] += 1
    edge[1:] += 1
    bend = np.zeros(K - 1)
    if K > 2:
        bend[:-1] += 1
        bend[1:] += 1
    return {
        "x_edge": np.maximum(edge, 1.0),
        "q_shear": np.ones(K - 1),
        "q_bend": np.maximum(bend, 1.0),
    }
