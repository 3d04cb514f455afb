"""Quasi-static constraint solving: one gravity prediction, then projection passes.

Each pass computes shear/stretch, bend/twist and distance corrections from the
same state and applies the weighted average

    x += (dx_S * eta_x_S + dx_D * eta_x_D) / 2 * eta_SOR
    q += (dq_S * eta_q_S + dq_B * eta_q_B) / 2 * eta_SOR

followed by quaternion re-normalization.  In ``thomas`` mode the distance
correction ``dx_D`` comes from the tridiagonal solve of the linearized chain,
and after the averaged update the chain is projected exactly onto its rest
lengths by repeated tridiagonal solves.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rope as rp
from .rope import RopeState

JACOBI = "jacobi"
THOMAS = "thomas"

ETA_NAMES = ("eta_x_S", "eta_q_S", "eta_q_B", "eta_x_D", "eta_x_G", "eta_SOR")


class SolverError(RuntimeError):
    pass


class InfeasibleChainError(SolverError):
    pass


@dataclass
class SolverParams:
    """Stiffness weights, gravity and iteration settings of the quasi-static solve.

    The ``eta_*`` fields may hold tape Vars when differentiating.  Defaults for
    the weights are the usual starting point (all 1, gravity weight 0.04).
    """

    eta_x_S: float = 1.0
    eta_q_S: float = 1.0
    eta_q_B: float = 1.0
    eta_x_D: float = 1.0
    eta_x_G: float = 0.04
    eta_SOR: float = 1.0
    gravity: tuple[float, float, float] = (0.0, 0.0, -9.81)
    dt: float = 1.0
    iterations: int = 50
    distance_mode: str = THOMAS
    thomas_outer_iterations: int = 4
    thomas_tolerance: float = 1e-9
    alpha_S: float = 0.0
    alpha_B: float = 0.0
    alpha_D: float = 0.0
    accumulate_lambda: bool = False
    # "current" (true derivative) or "rest" (segment vector over rest length), Jacobi mode only
    distance_gradient: str = "current"
    # gravity weight used for frames tagged "tensioned"; None means eta_x_G
    eta_x_G_tensioned: float | None = None

    def __post_init__(self) -> None:
        self.gravity = tuple(float(g) for g in self.gravity)
        if len(self.gravity) != 3:
            raise ValueError("gravity must be a 3-vector")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        self.iterations = int(self.iterations)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.distance_mode not in (JACOBI, THOMAS):
            raise ValueError(f"distance_mode must be 'jacobi' or 'thomas', got {self.distance_mode!r}")
        if self.distance_gradient not in (rp.CURRENT, rp.REST):
            raise ValueError("distance_gradient must be 'current' or 'rest'")
        if int(self.thomas_outer_iterations) < 1:
            raise ValueError("thomas_outer_iterations must be >= 1")
        for name in ("alpha_S", "alpha_B", "alpha_D"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ETA_NAMES:
            v = ad.value(getattr(self, name))
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")

    def etas(self) -> dict[str, float]:
        return {n: float(ad.value(getattr(self, n))) for n in ETA_NAMES}

    def with_values(self, **kw) -> "SolverParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            v = ad.value(v)
            d[f.name] = list(v) if isinstance(v, tuple) else (float(v) if isinstance(v, np.ndarray) else v)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SolverParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver parameters: {sorted(unknown)}")
        return cls(**d)

    def gravity_weight(self, regime: str | None = None):
        if regime == "tensioned" and self.eta_x_G_tensioned is not None:
            return self.eta_x_G_tensioned
        return self.eta_x_G


@dataclass
class StepReport:
    """Per-iteration maximum residual of each family and the rope length."""

    max_CS: list[float] = field(default_factory=list)
    max_CB: list[float] = field(default_factory=list)
    max_CD: list[float] = field(default_factory=list)
    length: list[float] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.max_CD)

    @property
    def final_length(self) -> float:
        return self.length[-1] if self.length else float("nan")

    def append(self, state: RopeState) -> None:
        cs, cb, cd = rp.max_residuals(state)
        self.max_CS.append(cs)
        self.max_CB.append(cb)
        self.max_CD.append(cd)
        self.length.append(state.length())

    def rows(self):
        for i in range(self.iterations):
            yield (i + 1, self.max_CS[i], self.max_CB[i], self.max_CD[i], self.length[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "max_CS", "max_CB", "max_CD", "length"])
            for r in self.rows():
                w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


# building blocks -------------------------------------------------------------------


def gravity_predict(state: RopeState, params: SolverParams, regime: str | None = None) -> RopeState:
    """``x += g dt^2 eta_x_G / 2`` for particles with non-zero inverse mass."""
    free = (state.inv_mass > 0).astype(float)[:, None]
    shift = 0.5 * np.asarray(params.gravity) * params.dt**2 * free
    return state.with_pose(state.positions + shift * params.gravity_weight(regime), state.quaternions)


def _thomas_pass(x, state: RopeState, tolerance: float):
    """One linearized tridiagonal solve of all distance constraints; returns ``dx``."""
    wx = state.inv_mass
    l = state.rest_lengths
    d = x[1:] - x[:-1]
    n = ad.norm(d)
    nv = np.asarray(ad.value(n))
    if np.any(nv == 0.0):
        i = int(np.flatnonzero(nv == 0.0)[0])
        raise rp.SingularProjectionError(f"particles {i} and {i + 1} coincide", i)
    C = n - l
    if np.max(np.abs(np.asarray(ad.value(C)))) <= tolerance:
        # already satisfied; also avoids the singular system of a taut straight chain
        return np.zeros(np.shape(ad.value(x)))
    u = d / n[:, None]
    diag = wx[:-1] + wx[1:]
    dead = diag == 0.0
    if np.any(dead):
        cv = np.abs(np.asarray(ad.value(C)))[dead]
        if np.any(cv > tolerance):
            raise InfeasibleChainError(
                "distance constraint between two fixed particles is violated "
                f"(|C| = {cv.max():.3e}); the chain cannot be satisfied"
            )
    m = len(l)
    if m > 1:
        off = -ad.dot(u[:-1], u[1:]) * wx[1:-1]
        lower = ad.pad_rows(off, 1, 0)
        upper = ad.pad_rows(off, 0, 1)
    else:
        lower = upper = np.zeros(1)
    rhs = ad.where(dead, 0.0, -C)
    try:
        lam = ad.tridiag_solve(lower, np.where(dead, 1.0, diag), upper, rhs)
    except ZeroDivisionError as e:
        raise SolverError(f"tridiagonal distance solve failed: {e}") from None
    step = u * lam[:, None]
    return ad.pad_rows(step * (-wx[:-1])[:, None], 0, 1) + ad.pad_rows(step * wx[1:, None], 1, 0)


def _thomas_project(x, state: RopeState, tolerance: float, max_outer: int):
    for _ in range(max_outer):
        cd = np.abs(np.linalg.norm(np.diff(ad.value(x), axis=0), axis=1) - state.rest_lengths)
        if cd.max() <= tolerance:
            break
        x = x + _thomas_pass(x, state, tolerance)
    return x


def thomas_distance_solve(state: RopeState, tolerance: float = 1e-9, max_outer: int = 4) -> RopeState:
    """Project positions onto the rest segment lengths with tridiagonal solves.

    The linearized system ``(J W J^T) dlam = -C`` of a chain is tridiagonal with
    diagonal ``w_i + w_{i+1}`` and off-diagonal ``-w_{i+1} (u_i . u_{i+1})``.
    Passes repeat until ``max|C| <= tolerance`` or ``max_outer`` is reached.
    """
    wx = state.inv_mass
    if np.all(wx == 0):
        cd = np.abs(np.linalg.norm(np.diff(ad.value(state.positions), axis=0), axis=1) - state.rest_lengths)
        if cd.max() > tolerance:
            raise InfeasibleChainError("all particles are fixed but the chain violates its rest lengths")
        return state
    x = _thomas_project(state.positions, state, tolerance, max_outer)
    return state.with_pose(x, state.quaternions)


class _Iterator:
    """One projection pass, with per-state constants precomputed."""

    def __init__(self, state: RopeState, params: SolverParams) -> None:
        self.state = state
        self.p = params
        c = rp.constraint_counts(state.K)
        self.cnt_x = c["x_edge"][:, None]
        self.cnt_qb = c["q_bend"][:, None]
        self.has_bend = state.K > 2

    def __call__(self, x, q, lam):
        s, p = self.state, self.p
        acc = p.accumulate_lambda
        lam_s, lam_b, lam_d = lam if acc else (None, None, None)
        dxs, dqs, dls = rp.project_shear_stretch(x, q, s, p.alpha_S, lam_s)
        if self.has_bend:
            dqb, dlb = rp.project_bend_twist(q, s, p.alpha_B, lam_b)
            dqb = dqb / self.cnt_qb
        else:
            dqb, dlb = np.zeros((s.K - 1, 4)), np.zeros((0, 3))
        if p.distance_mode == JACOBI:
            dxd, dld = rp.project_distance(x, s, p.alpha_D, lam_d, p.distance_gradient)
            dxd = dxd / self.cnt_x
        else:
            dxd, dld = _thomas_pass(x, s, p.thomas_tolerance), None
        half = p.eta_SOR * 0.5
        x = x + (dxs / self.cnt_x * p.eta_x_S + dxd * p.eta_x_D) * half
        q = q + (dqs * p.eta_q_S + dqb * p.eta_q_B) * half
        q = q / ad.norm(q)[:, None]
        if p.distance_mode == THOMAS:
            x = _thomas_project(x, s, p.thomas_tolerance, p.thomas_outer_iterations)
        if acc:
            lam = (
                lam_s + dls,
                lam_b + dlb,
                lam_d + (dld if dld is not None else 0.0),
            )
        return x, q, lam

    def initial_lambda(self):
        K = self.state.K
        return (np.zeros((K - 1, 3)), np.zeros((max(K - 2, 0), 3)), np.zeros(K - 1))


def jacobi_iteration(state: RopeState, params: SolverParams):
    """A single projection pass (no gravity); returns ``(state, (max_CS, max_CB, max_CD))``."""
    it = _Iterator(state, params)
    x, q, _ = it(state.positions, state.quaternions, it.initial_lambda())
    out = state.with_pose(x, q)
    return out, rp.max_residuals(out)


def simulate_quasi_static(
    state: RopeState,
    params: SolverParams,
    regime: str | None = None,
    report: bool = True,
    callback: Callable[[int, object, object, object], None] | None = None,
):
    """Gravity prediction followed by ``params.iterations`` projection passes.

    Works on plain arrays or on tape Vars (positions, quaternions or any
    ``eta`` field); in the latter case the whole solve is recorded.
    ``callback(i, x, q, lam)`` sees the pose after every iteration ``i``.
    Returns ``(final_state, StepReport)``.
    """
    state = gravity_predict(state, params, regime)
    it = _Iterator(state, params)
    x, q = state.positions, state.quaternions
    lam = it.initial_lambda()
    rep = StepReport()
    for i in range(params.iterations):
        x, q, lam = it(x, q, lam)
        if not np.all(np.isfinite(ad.value(x))):
            raise SolverError(f"solver diverged at iteration {i + 1}")
        if report:
            rep.append(state.with_pose(ad.value(x), ad.value(q)))
        if callback is not None:
            callback(i, x, q, lam)
    return state.with_pose(x, q), rep


# gradients ---------------------------------------------------------------------------

Builder = Callable[[Mapping[str, object]], tuple[RopeState, SolverParams]]


def value_and_grad(
    build: Builder,
    variables: Mapping[str, object],
    loss_fn: Callable[[RopeState], object],
    policy: ad.CheckpointPolicy | None = None,
    regime: str | None = None,
):
    """Loss of a full solve and its gradient w.r.t. named variables.

    ``build(values)`` maps variable values (Vars during differentiation) to the
    initial state and solver parameters.  With a checkpointing ``policy`` the
    forward pass keeps only periodic states and the backward pass re-records
    one segment at a time; the gradients are the same as full unrolling.
    Returns ``(loss, {name: gradient}, final_state, report)``.
    """
    policy = policy or ad.CheckpointPolicy()
    names = list(variables)
    if policy.unrolled:
        tape = ad.Tape()
        leaves = {n: tape.leaf(variables[n]) for n in names}
        state, params = build(leaves)
        final, rep = simulate_quasi_static(state, params, regime)
        loss = loss_fn(final)
        if not ad.is_var(loss):
            return float(loss), {n: np.zeros(np.shape(variables[n])) for n in names}, final.detached(), rep
        g = ad.backward(loss)
        return float(loss.value), {n: g[leaves[n]] for n in names}, final.detached(), rep
    return _checkpointed(build, variables, loss_fn, policy, regime)


def _checkpointed(build, variables, loss_fn, policy, regime):
    names = list(variables)
    state0, params0 = build({n: np.asarray(variables[n], dtype=float) for n in names})
    n_iter = params0.iterations

    # measure the size of one recorded iteration from the start state
    probe = ad.Tape()
    pl = {n: probe.leaf(variables[n]) for n in names}
    _, pp = build(pl)
    xs = probe.leaf(ad.value(state0.positions))
    qs = probe.leaf(ad.value(state0.quaternions))
    before = len(probe)
    it = _Iterator(state0, pp)
    it(xs, qs, it.initial_lambda())
    seg = min(policy.segment_length(len(probe) - before), n_iter)

    stored: dict[int, tuple] = {}

    def keep(i, x, q, lam):
        if (i + 1) % seg == 0 and i + 1 < n_iter:
            stored[i + 1] = (np.array(x), np.array(q), tuple(np.array(v) for v in lam))

    final, rep = simulate_quasi_static(state0, params0, regime, callback=keep)
    starts = [0] + sorted(stored)
    grads = {n: np.zeros(np.shape(variables[n])) for n in names}
    seeds = None
    loss_value = None
    for k in range(len(starts) - 1, -1, -1):
        a = starts[k]
        b = starts[k + 1] if k + 1 < len(starts) else n_iter
        tape = ad.Tape()
        lv = {n: tape.leaf(variables[n]) for n in names}
        state, params = build(lv)
        if a == 0:
            state = gravity_predict(state, params, regime)
            x, q = state.positions, state.quaternions
            it = _Iterator(state, params)
            lam = it.initial_lambda()
            start_leaves = None
        else:
            sx, sq, slam = stored[a]
            state = state.with_pose(sx, sq)
            it = _Iterator(state, params)
            x, q = tape.leaf(sx), tape.leaf(sq)
            lam = tuple(tape.leaf(v) for v in slam) if params.accumulate_lambda else slam
            start_leaves = (x, q, lam)
        for _ in range(a, b):
            x, q, lam = it(x, q, lam)
        if seeds is None:
            loss = loss_fn(state.with_pose(x, q))
            loss_value = float(ad.value(loss))
            if not ad.is_var(loss):
                break
            outs, sds = [loss], [1.0]
        else:
            outs, sds = [], []
            for o, sd in zip(_flat(x, q, lam, params.accumulate_lambda), seeds):
                if ad.is_var(o):
                    outs.append(o)
                    sds.append(sd)
        tape.finalize()
        adj = tape.vjp(outs, sds)
        for n in names:
            grads[n] = grads[n] + adj[lv[n].index]
        if start_leaves is not None:
            seeds = [adj[v.index] if ad.is_var(v) else None for v in _flat(*start_leaves, params.accumulate_lambda)]
    return loss_value, grads, final.detached(), rep


def _flat(x, q, lam, with_lambda: bool):
    return [x, q, *lam] if with_lambda else [x, q]
