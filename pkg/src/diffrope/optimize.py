"""Gradient-based parameter identification, control-point estimation and shape control.

All drivers share one optimizer: projected gradient descent with per-variable
step sizes and a backtracking line search.  Each trial step is ``x - s * t * d``
where ``s`` is the per-variable base step, ``t`` a global scale that is
halved until the loss decreases (at most 20 times) and doubled after every
accepted step, and ``d`` the gradient.  With ``scaling="rms"`` (the default)
each variable's gradient is divided by a running RMS of its own past
gradients, so every variable moves about ``s * t`` per iteration regardless of
how sensitive the loss is to it.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import rope as rp
from .losses import ObservationFrame, Objective
from .solvers import ETA_NAMES, THOMAS, SolverError, SolverParams, simulate_quasi_static, value_and_grad

CONTROL = "control"
SCALINGS = ("adaptive", "rms", "none")
PARAM_NAMES = ETA_NAMES + ("eta_x_G_tensioned",)

DEFAULT_STEPS = {n: 1e-2 for n in PARAM_NAMES} | {CONTROL: 1e-3}
DEFAULT_BOUNDS = {n: (1e-3, 2.0) for n in PARAM_NAMES} | {
    "eta_x_G": (0.0, 1.0),
    "eta_x_G_tensioned": (0.0, 1.0),
    CONTROL: (-np.inf, np.inf),
}


class OptimizationError(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float] = ()) -> None:
        super().__init__(message)
        self.trace = list(trace)


class ConfigError(ValueError):
    pass


@dataclass
class RopeSetup:
    """Which particles are pinned and which one is the controlled gripper.

    Pinned particles are those with zero inverse mass in ``template``.  For a
    frame, particle 0 and particle K-1 (when pinned) follow the frame's
    endpoints, the control particle follows ``frame.control`` when given, and
    any other pinned particle keeps its template position.
    """

    template: rp.RopeState
    control_index: int = 0
    extensible: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.control_index < self.template.K:
            raise ConfigError("control index out of range")
        if self.template.inv_mass[self.control_index] != 0:
            raise ConfigError("the control particle must have zero inverse mass")

    @property
    def rest_length(self) -> float:
        return float(self.template.rest_lengths.sum())

    def check_params(self, params: SolverParams) -> None:
        if self.extensible and params.distance_mode == THOMAS:
            raise ConfigError(
                "thomas distance mode assumes an inextensible rope and does not converge "
                "for extensible configurations; use distance_mode='jacobi'"
            )

    def anchors(self, frame: ObservationFrame | None = None, control=None) -> dict:
        K = self.template.K
        out = {}
        for i in np.flatnonzero(self.template.inv_mass == 0):
            i = int(i)
            p = self.template.positions[i]
            if frame is not None and frame.endpoints is not None and i in (0, K - 1):
                p = frame.endpoints[0 if i == 0 else 1]
            if i == self.control_index and frame is not None and frame.control is not None:
                p = frame.control
            out[i] = p
        if control is not None:
            out[self.control_index] = control
        return out


@dataclass
class OptimizationProblem:
    params: SolverParams
    setup: RopeSetup
    variables: Sequence[str] = ETA_NAMES
    objective: str | Objective = "OBJ1"
    bounds: Mapping[str, tuple] = field(default_factory=dict)
    steps: Mapping[str, float] = field(default_factory=dict)
    max_iterations: int = 500
    rtol: float = 1e-6
    window: int = 5
    gtol: float = 1e-6
    momentum: float = 0.0
    scaling: str = "adaptive"
    checkpoint: ad.CheckpointPolicy | None = None

    def __post_init__(self) -> None:
        if not self.variables:
            raise ConfigError("select at least one variable")
        unknown = set(self.variables) - set(PARAM_NAMES) - {CONTROL}
        if unknown:
            raise ConfigError(f"unknown variables: {sorted(unknown)}")
        for n in self.variables:
            lo, hi = self.bound(n)
            if not lo <= hi:
                raise ConfigError(f"infeasible bounds for {n}: {lo} > {hi}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"scaling must be one of {SCALINGS}")
        self.objective = Objective.of(self.objective)
        self.setup.check_params(self.params)

    def bound(self, name: str) -> tuple[float, float]:
        lo, hi = self.bounds.get(name, DEFAULT_BOUNDS[name])
        return float(lo), float(hi)

    def step(self, name: str) -> float:
        return float(self.steps.get(name, DEFAULT_STEPS[name]))


@dataclass
class OptimizationResult:
    values: dict
    initial_values: dict
    loss_trace: list[float]
    grad_norms: list[float]
    converged: bool
    message: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def loss(self) -> float:
        return self.loss_trace[-1]

    def to_dict(self, wall_time: bool = True) -> dict:
        def plain(v):
            return np.asarray(v).tolist()

        d = {
            "values": {k: plain(v) for k, v in self.values.items()},
            "initial_values": {k: plain(v) for k, v in self.initial_values.items()},
            "loss": self.loss,
            "loss_trace": list(self.loss_trace),
            "grad_norms": list(self.grad_norms),
            "converged": self.converged,
            "message": self.message,
            "extra": {k: plain(v) for k, v in self.extra.items()},
        }
        if wall_time:
            d["wall_time"] = self.wall_time
        return d

    def save_json(self, path, wall_time: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(wall_time), fh, indent=2)
            fh.write("\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "grad_norm"])
            for i, loss in enumerate(self.loss_trace):
                g = self.grad_norms[i] if i < len(self.grad_norms) else ""
                w.writerow([i, repr(float(loss)), "" if g == "" else repr(float(g))])


# the optimizer ----------------------------------------------------------------------------


def _finite(v: float) -> bool:
    return v is not None and math.isfinite(v)


def projected_descent(
    value_grad: Callable[[dict], tuple[float, dict]],
    value: Callable[[dict], float],
    x0: Mapping[str, np.ndarray],
    problem: OptimizationProblem,
):
    """Minimize with projected gradient descent; returns ``(x, trace, gnorms, converged, message)``.

    A trial step whose loss is not finite, or whose solve raises a
    ``SolverError``, counts as a failed trial and is halved like any other.
    """
    names = list(x0)
    lo = {n: problem.bound(n)[0] for n in names}
    hi = {n: problem.bound(n)[1] for n in names}
    x = {n: np.clip(np.asarray(x0[n], dtype=float), lo[n], hi[n]) for n in names}
    trace: list[float] = []
    gnorms: list[float] = []
    vel = {n: np.zeros_like(x[n]) for n in names}
    msq = {n: 0.0 for n in names}
    # per-component steps and last gradient signs for the adaptive scaling
    rate = {n: np.full(np.shape(x[n]), problem.step(n)) for n in names}
    last = {n: np.zeros(np.shape(x[n])) for n in names}
    adaptive = problem.scaling == "adaptive"
    scale = 1.0
    loss, g = value_grad(x)
    while True:
        if not _finite(loss):
            raise OptimizationError("loss diverged", trace + [loss])
        trace.append(loss)
        gn = math.sqrt(sum(float(np.sum(g[n] ** 2)) for n in names))
        gnorms.append(gn)
        if gn <= problem.gtol:
            return x, trace, gnorms, True, "gradient norm below tolerance"
        w = problem.window
        if len(trace) > w and abs(trace[-1 - w] - trace[-1]) <= problem.rtol * abs(trace[-1 - w]):
            return x, trace, gnorms, True, "relative loss change below tolerance"
        if len(trace) > problem.max_iterations:
            return x, trace, gnorms, False, "iteration limit reached"
        k = len(trace)
        d = {}
        for n in names:
            if adaptive:
                sg = np.sign(g[n])
                flip = sg * last[n]
                rate[n] = np.clip(rate[n] * np.where(flip > 0, 1.5, np.where(flip < 0, 0.5, 1.0)), 1e-9, 50 * problem.step(n))
                last[n] = sg
                d[n] = rate[n] * sg
                continue
            msq[n] = 0.9 * msq[n] + 0.1 * float(np.mean(g[n] ** 2))
            dn = g[n]
            if problem.scaling == "rms":
                rms = math.sqrt(msq[n] / (1.0 - 0.9**k))
                dn = dn / rms if rms > 0 else dn
            d[n] = problem.step(n) * dn
        for n in names:
            vel[n] = problem.momentum * vel[n] + d[n]
        accepted = None
        for direction in ([vel, d] if problem.momentum > 0 else [d]):
            t = 1.0 if adaptive else scale
            for _ in range(21):
                trial = {n: np.clip(x[n] - t * direction[n], lo[n], hi[n]) for n in names}
                if all(np.array_equal(trial[n], x[n]) for n in names):
                    break
                try:
                    new = value(trial)
                except SolverError:
                    new = math.nan
                if _finite(new) and new < loss:
                    accepted = trial
                    break
                t *= 0.5
            if accepted is not None:
                break
            vel = {n: d[n].copy() for n in names}
        if accepted is None:
            return x, trace, gnorms, True, "no descent step within the line-search budget"
        x = accepted
        if adaptive and t < 1.0:
            for n in names:
                rate[n] = rate[n] * t
        scale = 2.0 * t
        loss, g = value_grad(x)


# loss assembly ------------------------------------------------------------------------------


def _eta_values(params: SolverParams, names) -> dict:
    out = {}
    for n in names:
        v = getattr(params, n)
        if v is None:  # tensioned gravity weight starts from the common one
            v = params.eta_x_G
        out[n] = np.asarray(ad.value(v), dtype=float)
    return out


def _builder(problem: OptimizationProblem, frame: ObservationFrame | None, anchors: Mapping | None = None):
    setup = problem.setup
    eta = [n for n in problem.variables if n != CONTROL]

    def build(v):
        params = problem.params.with_values(**{n: v[n] for n in eta}) if eta else problem.params
        if anchors is not None:
            a = dict(anchors)
            if CONTROL in v:
                a[setup.control_index] = v[CONTROL]
        else:
            a = setup.anchors(frame, v.get(CONTROL))
        return rp.anchored(setup.template, a), params

    return build


def _mean_loss_fns(problem: OptimizationProblem, frames, loss_of, anchors=None):
    """``value_grad`` and ``value`` of the mean per-frame loss."""
    builds = [(_builder(problem, f, anchors), f) for f in frames]
    n = len(builds)

    def value_grad(x):
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in x.items()}
        for build, f in builds:
            loss, g, _, _ = value_and_grad(build, x, lambda s, f=f: loss_of(f, s.positions), problem.checkpoint, _regime(f))
            total += loss
            for k in grads:
                grads[k] += g[k]
        return total / n, {k: v / n for k, v in grads.items()}

    def value(x):
        return sum(float(loss_of(f, final_positions(build, x, _regime(f)))) for build, f in builds) / n

    return value_grad, value


def _regime(frame):
    return None if frame is None else frame.regime


def final_positions(build, values, regime=None) -> np.ndarray:
    state, params = build(values)
    out, _ = simulate_quasi_static(state, params, regime, report=False)
    return np.asarray(out.positions)


def _result(x0, run, t0, **extra) -> OptimizationResult:
    x, trace, gnorms, converged, msg = run
    return OptimizationResult(
        values={k: (float(v) if np.ndim(v) == 0 else np.array(v)) for k, v in x.items()},
        initial_values={k: (float(v) if np.ndim(v) == 0 else np.array(v)) for k, v in x0.items()},
        loss_trace=trace,
        grad_norms=gnorms,
        converged=converged,
        message=msg,
        wall_time=time.perf_counter() - t0,
        extra=extra,
    )


def _check_frames(frames) -> list:
    frames = list(frames)
    if not frames:
        raise ConfigError("no frames given")
    return frames


# drivers ----------------------------------------------------------------------------------


def identify_parameters(frames: Sequence[ObservationFrame], problem: OptimizationProblem, initial: Mapping | None = None) -> OptimizationResult:
    """Fit the selected stiffness weights jointly to all frames (mean objective)."""
    t0 = time.perf_counter()
    frames = _check_frames(frames)
    if CONTROL in problem.variables:
        raise ConfigError("identification fits solver parameters only")
    x0 = _eta_values(problem.params, problem.variables)
    if initial:
        x0.update({k: np.asarray(v, dtype=float) for k, v in initial.items() if k in x0})
    vg, v = _mean_loss_fns(problem, frames, problem.objective)
    return _result(x0, projected_descent(vg, v, x0, problem), t0)


def estimate_control_point(frame: ObservationFrame, problem: OptimizationProblem, initial) -> OptimizationResult:
    """Optimize the control particle's position so the solve matches ``frame``."""
    t0 = time.perf_counter()
    if list(problem.variables) != [CONTROL]:
        problem = _with_vars(problem, [CONTROL])
    x0 = {CONTROL: np.asarray(initial, dtype=float).reshape(3)}
    vg, v = _mean_loss_fns(problem, [frame], problem.objective)
    res = _result(x0, projected_descent(vg, v, x0, problem), t0)
    build = _builder(problem, frame)
    res.extra["positions"] = final_positions(build, {CONTROL: res.values[CONTROL]}, frame.regime)
    return res


def shape_control(
    targets: Sequence[tuple[int, Sequence[float]]],
    problem: OptimizationProblem,
    initial_control,
    anchors: Mapping | None = None,
    tolerance: float | None = None,
) -> OptimizationResult:
    """Move the control particle so that particles ``index`` reach ``target``.

    The loss is the sum of squared target distances.  The result is flagged
    converged only if the optimizer stopped on its own and the RMS target
    error is within ``tolerance`` (default 1e-3 of the rope length), so an
    unreachable target ends with ``converged=False``.
    """
    t0 = time.perf_counter()
    K = problem.setup.template.K
    idx = np.array([int(i) for i, _ in targets])
    if len(idx) == 0:
        raise ConfigError("no shape targets")
    if idx.min() < 0 or idx.max() >= K:
        raise ConfigError("target index out of range")
    tgt = np.array([np.asarray(p, dtype=float) for _, p in targets]).reshape(-1, 3)
    if list(problem.variables) != [CONTROL]:
        problem = _with_vars(problem, [CONTROL])
    anchors = dict(anchors) if anchors is not None else problem.setup.anchors()

    def loss_of(_frame, x):
        d = x[idx] - tgt
        return ad.sum(d * d)

    x0 = {CONTROL: np.asarray(initial_control, dtype=float).reshape(3)}
    vg, v = _mean_loss_fns(problem, [None], loss_of, anchors)
    res = _result(x0, projected_descent(vg, v, x0, problem), t0)
    build = _builder(problem, None, anchors)
    x = final_positions(build, {CONTROL: res.values[CONTROL]})
    rms = float(np.sqrt(np.mean(np.sum((x[idx] - tgt) ** 2, axis=1))))
    tol = 1e-3 * problem.setup.rest_length if tolerance is None else tolerance
    res.extra.update(positions=x, target_rms=rms)
    if res.converged and rms > tol:
        res.converged = False
        res.message = f"target not reached (RMS error {rms:.3g} > {tol:.3g})"
    return res


def grid_search(frames: Sequence[ObservationFrame], problem: OptimizationProblem, grid: Mapping[str, Sequence[float]]) -> OptimizationResult:
    """Exhaustive search over the Cartesian grid (first key varies slowest).

    Ties keep the first grid point in that order.
    """
    t0 = time.perf_counter()
    frames = _check_frames(frames)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid is empty")
    problem = _with_vars(problem, list(grid))
    _, value = _mean_loss_fns(problem, frames, problem.objective)
    best, best_loss, losses = None, math.inf, []
    for point in itertools.product(*(list(map(float, v)) for v in grid.values())):
        x = {n: np.asarray(p) for n, p in zip(grid, point)}
        try:
            loss = value(x)
        except SolverError:
            loss = math.nan
        losses.append(loss)
        if loss < best_loss:
            best, best_loss = x, loss
    if best is None:
        raise OptimizationError("every grid point failed", losses)
    x0 = {n: np.asarray(float(v[0])) for n, v in grid.items()}
    res = _result(x0, (best, [best_loss], [], True, "grid exhausted"), t0, grid_losses=np.array(losses))
    return res


def _with_vars(problem: OptimizationProblem, names) -> OptimizationProblem:
    return replace(problem, variables=tuple(names))


def shape_error(x, truth) -> float:
    """RMS particle distance between two poses."""
    return float(np.sqrt(np.mean(np.sum((np.asarray(x) - np.asarray(truth)) ** 2, axis=1))))
