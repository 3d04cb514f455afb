"""Command-line entry point: ``diffrope <command> --config run.json [--out DIR]``.

Exit codes: 0 success, 1 solver or optimizer failure, 2 configuration error.
Every command loads and validates its whole configuration (including frames)
before anything is written.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from . import optimize as O
from .losses import OBJECTIVES, ObjectiveError
from .rope import DegenerateConstraintError, RopeState, anchored
from .solvers import ETA_NAMES, JACOBI, THOMAS, SolverError, SolverParams, simulate_quasi_static
from .autodiff import MemoryBudgetError, checkpoint_policy

COMMANDS = ("simulate", "identify", "estimate", "control", "gridsearch", "compare-solvers", "config-schema")

SCHEMA = {
    "rope": {
        "K": "number of particles (int, >= 2)",
        "length": "rest length in m",
        "start": "first particle of the straight rest pose, default [0, 0, 0]",
        "direction": "rest pose direction, default [1, 0, 0]",
        "fixed": "indices of pinned particles, default [0, K-1]",
        "inv_mass": "inverse mass of free particles, default 1",
        "inv_inertia": "orientation weight, default inv_mass / (2 l^2)",
        "state": "optional path of a saved RopeState JSON (overrides the fields above)",
    },
    "solver": {f.name: f.default for f in fields(SolverParams)},
    "anchors": "{index: [x, y, z]} initial positions of pinned particles",
    "control_index": "particle moved by the gripper, default 0",
    "extensible": "true for stretchable ropes; requires distance_mode 'jacobi'",
    "objective": "OBJ1..OBJ9, default OBJ1",
    "regime": "optional regime label used by 'simulate' ('tensioned' selects eta_x_G_tensioned)",
    "frames": "list of RawFrame JSON paths (relative to the config file)",
    "synthetic": {
        "true_solver": "SolverParams overrides used to generate frames",
        "trajectory": "list of control positions, one frame each",
        "noise": "Gaussian noise sigma in m, default 0",
        "samples": "points per frame, default 100",
        "regime": "label attached to every frame",
    },
    "preprocess": {"outlier_filter": "statistical outlier removal, default false"},
    "checkpoint": {"every": "iterations per stored state", "max_tape_nodes": "tape budget"},
    "identify": {"variables": list(ETA_NAMES), "initial": "{name: value}", "bounds": "{name: [lo, hi]}", "steps": "{name: step}", "max_iterations": 500, "momentum": 0.0},
    "estimate": {"initial_offset": "[dx, dy, dz] added to each frame's control point", "max_iterations": 500},
    "control": {"targets": "[[index, [x, y, z]], ...]", "initial_control": "[x, y, z]", "max_iterations": 500},
    "gridsearch": {"grid": "{name: [values...]} first key varies slowest"},
    "compare": {"initial_offset": "[dx, dy, dz]", "max_iterations": 30},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    root: Path
    raw: dict
    template: RopeState
    params: SolverParams
    setup: O.RopeSetup
    objective: str = "OBJ1"
    frames: list = field(default_factory=list)


def _vec(v, name: str, n: int = 3) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be a finite {n}-vector")
    return a


def _rope(cfg: dict, root: Path) -> RopeState:
    r = dict(cfg.get("rope") or {})
    if "state" in r:
        path = root / r["state"]
        if not path.is_file():
            raise ConfigError(f"rope state file not found: {path}")
        return RopeState.load(path)
    if "K" not in r or "length" not in r:
        raise ConfigError("rope needs 'K' and 'length' (or 'state')")
    K = int(r["K"])
    if K < 2 or not float(r["length"]) > 0:
        raise ConfigError("rope needs K >= 2 and a positive length")
    unknown = set(r) - set(SCHEMA["rope"])
    if unknown:
        raise ConfigError(f"unknown rope fields: {sorted(unknown)}")
    fixed = [int(i) for i in r.get("fixed", [0, K - 1])]
    if any(not 0 <= i < K for i in fixed):
        raise ConfigError("fixed index out of range")
    return RopeState.straight(
        K,
        float(r["length"]),
        start=_vec(r.get("start", [0, 0, 0]), "rope.start"),
        direction=_vec(r.get("direction", [1, 0, 0]), "rope.direction"),
        fixed=fixed,
        inv_mass=float(r.get("inv_mass", 1.0)),
        inv_inertia=None if r.get("inv_inertia") is None else float(r["inv_inertia"]),
    )


def _frames(cfg: dict, root: Path, template: RopeState, seed: int, control_index: int, base: SolverParams):
    frames = []
    for p in cfg.get("frames", []):
        path = root / p
        if not path.is_file():
            raise ConfigError(f"frame file not found: {path}")
        frames.append(D.RawFrame.load(path))
    syn = cfg.get("synthetic")
    if syn:
        true = SolverParams.from_dict(base.to_dict() | dict(syn.get("true_solver", {})))
        traj = [_vec(c, "synthetic.trajectory") for c in syn.get("trajectory", [])]
        anchors = {int(k): _vec(v, "anchors") for k, v in cfg.get("anchors", {}).items()}
        rope = anchored(template, anchors).detached() if anchors else template
        frames += D.generate_synthetic_frames(
            true, rope, traj, float(syn.get("noise", 0.0)), int(syn.get("samples", 100)), seed, control_index, syn.get("regime")
        )
    return frames


def load_config(path, args) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    root = path.parent
    template = _rope(cfg, root)
    solver = dict(cfg.get("solver", {}))
    if args.distance_mode:
        solver["distance_mode"] = args.distance_mode
    if args.iterations is not None:
        solver["iterations"] = args.iterations
    params = SolverParams.from_dict(solver)
    setup = O.RopeSetup(template, int(cfg.get("control_index", 0)), bool(cfg.get("extensible", False)))
    setup.check_params(params)
    objective = (args.objective or cfg.get("objective", "OBJ1")).upper()
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    rc = RunConfig(root, cfg, template, params, setup, objective)
    if args.command not in ("simulate", "config-schema"):
        raws = _frames(cfg, root, template, args.seed, setup.control_index, params)
        pre = cfg.get("preprocess", {})
        rc.frames = [(r, D.preprocess_frame(r, template.K, bool(pre.get("outlier_filter", False)))) for r in raws]
    return rc


# writing ---------------------------------------------------------------------------------


class Outputs:
    """Collects output files in memory and writes them only once the command succeeded."""

    def __init__(self) -> None:
        self.files: dict[str, str] = {}

    def json(self, name: str, obj) -> None:
        self.files[name] = json.dumps(obj, indent=2) + "\n"

    def csv(self, name: str, header, rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        self.files[name] = buf.getvalue()

    def result(self, stem: str, res: O.OptimizationResult) -> None:
        self.json(stem + ".json", res.to_dict(wall_time=False))
        self.csv(
            stem + ".csv",
            ["iteration", "loss", "grad_norm"],
            [[i, repr(float(l)), repr(float(res.grad_norms[i])) if i < len(res.grad_norms) else ""] for i, l in enumerate(res.loss_trace)],
        )

    def flush(self, out: Path) -> None:
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (out / name).write_text(text)


def _problem(rc: RunConfig, section: str, variables, objective=None) -> O.OptimizationProblem:
    s = rc.raw.get(section, {})
    ck = rc.raw.get("checkpoint")
    return O.OptimizationProblem(
        rc.params,
        rc.setup,
        variables=tuple(variables),
        objective=objective or rc.objective,
        bounds={k: tuple(v) for k, v in s.get("bounds", {}).items()},
        steps=s.get("steps", {}),
        max_iterations=int(s.get("max_iterations", 500)),
        momentum=float(s.get("momentum", 0.0)),
        checkpoint=checkpoint_policy(ck) if ck else None,
    )


def _require_frames(rc: RunConfig) -> None:
    if not rc.frames:
        raise ConfigError("no frames: give 'frames' or 'synthetic'")


def _f(v) -> str:
    return repr(float(v))


# commands ---------------------------------------------------------------------------------


def cmd_simulate(rc: RunConfig, out: Outputs) -> str:
    anchors = {int(k): _vec(v, "anchors") for k, v in rc.raw.get("anchors", {}).items()}
    state = anchored(rc.template, anchors) if anchors else rc.template
    final, rep = simulate_quasi_static(state, rc.params, rc.raw.get("regime"))
    out.json("state.json", final.to_dict())
    out.csv("report.csv", ["iteration", "max_CS", "max_CB", "max_CD", "length"], [[r[0]] + [_f(v) for v in r[1:]] for r in rep.rows()])
    return f"final max|C_D| {rep.max_CD[-1]:.3e}, length {rep.final_length:.6f}"


def cmd_identify(rc: RunConfig, out: Outputs) -> str:
    _require_frames(rc)
    s = rc.raw.get("identify", {})
    prob = _problem(rc, "identify", s.get("variables", ETA_NAMES))
    res = O.identify_parameters([f for _, f in rc.frames], prob, s.get("initial"))
    out.result("identify", res)
    return f"loss {res.loss:.6g}, grad norm {res.grad_norms[-1]:.3g}, values {res.to_dict()['values']}"


def _estimate_all(rc: RunConfig, objective: str, section: str, params=None):
    s = rc.raw.get(section, {})
    offset = _vec(s.get("initial_offset", [0, 0, 0]), f"{section}.initial_offset")
    if params is not None:
        rc = RunConfig(rc.root, rc.raw, rc.template, params, rc.setup, rc.objective, rc.frames)
    prob = _problem(rc, section, [O.CONTROL], objective)
    if "max_iterations" not in s and section == "compare":
        prob.max_iterations = 30
    results = []
    for raw, frame in rc.frames:
        c0 = frame.control if frame.control is not None else frame.endpoints[0 if rc.setup.control_index == 0 else 1]
        results.append((raw, O.estimate_control_point(frame, prob, c0 + offset)))
    return results


def cmd_estimate(rc: RunConfig, out: Outputs, sweep: bool = False) -> str:
    _require_frames(rc)
    kinds = list(OBJECTIVES) if sweep or rc.raw.get("estimate", {}).get("sweep") else [rc.objective]
    lines = []
    for kind in kinds:
        res = _estimate_all(rc, kind, "estimate")
        doc = []
        for raw, r in res:
            d = r.to_dict(wall_time=False)
            d["frame_id"] = raw.frame_id
            if raw.control is not None:
                d["control_error"] = float(np.linalg.norm(r.values[O.CONTROL] - raw.control))
            if raw.truth is not None:
                d["shape_error"] = O.shape_error(r.extra["positions"], raw.truth)
            doc.append(d)
        out.json(f"estimate_{kind}.json", {"objective": kind, "frames": doc})
        lines.append(f"{kind}: mean loss {np.mean([r.loss for _, r in res]):.6g}")
    return "; ".join(lines)


def cmd_control(rc: RunConfig, out: Outputs) -> str:
    s = rc.raw.get("control", {})
    if "targets" not in s or "initial_control" not in s:
        raise ConfigError("control needs 'targets' and 'initial_control'")
    targets = [(int(i), _vec(p, "control.targets")) for i, p in s["targets"]]
    anchors = {int(k): _vec(v, "anchors") for k, v in rc.raw.get("anchors", {}).items()}
    base = rc.setup.anchors()
    base.update(anchors)
    prob = _problem(rc, "control", [O.CONTROL])
    res = O.shape_control(targets, prob, _vec(s["initial_control"], "control.initial_control"), base)
    out.result("control", res)
    return f"control {res.values[O.CONTROL].tolist()}, target RMS {res.extra['target_rms']:.3g}, converged {res.converged}"


def cmd_gridsearch(rc: RunConfig, out: Outputs) -> str:
    _require_frames(rc)
    grid = rc.raw.get("gridsearch", {}).get("grid")
    if not grid:
        raise ConfigError("gridsearch needs a non-empty 'grid'")
    res = O.grid_search([f for _, f in rc.frames], _problem(rc, "gridsearch", list(grid)), grid)
    out.result("gridsearch", res)
    return f"best {res.to_dict()['values']}, loss {res.loss:.6g}"


def cmd_compare_solvers(rc: RunConfig, out: Outputs) -> str:
    _require_frames(rc)
    if rc.setup.extensible:
        raise ConfigError("solver comparison needs an inextensible rope (thomas mode)")
    L = rc.setup.rest_length
    cols = {}
    for mode in (JACOBI, THOMAS):
        params = rc.params.with_values(distance_mode=mode)
        est = _estimate_all(rc, rc.objective, "compare", params)
        rows = []
        for raw, r in est:
            x = r.extra["positions"]
            length = float(np.linalg.norm(np.diff(x, axis=0), axis=1).sum())
            ctrl = 0.0 if raw.control is None else float(np.linalg.norm(r.values[O.CONTROL] - raw.control))
            rows.append((abs(length - L) / L, ctrl))
        cols[mode] = rows
    out.csv(
        "compare_solvers.csv",
        ["frame_id", "length_dev_jacobi", "length_dev_thomas", "control_dev_jacobi", "control_dev_thomas"],
        [[raw.frame_id, _f(j[0]), _f(t[0]), _f(j[1]), _f(t[1])] for (raw, _), j, t in zip(rc.frames, cols[JACOBI], cols[THOMAS])],
    )
    mj = np.mean([r[0] for r in cols[JACOBI]])
    mt = np.mean([r[0] for r in cols[THOMAS]])
    return f"mean length deviation: jacobi {mj:.3%}, thomas {mt:.3%}"


HANDLERS = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "control": cmd_control,
    "gridsearch": cmd_gridsearch,
    "compare-solvers": cmd_compare_solvers,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diffrope", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="run configuration (JSON); required except for config-schema")
    ap.add_argument("--out", default="results", help="output directory (default: results)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--objective", choices=list(OBJECTIVES) + [k.lower() for k in OBJECTIVES])
    ap.add_argument("--distance-mode", choices=[JACOBI, THOMAS])
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--sweep", action="store_true", help="estimate: run all nine objectives")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "config-schema":
        print(json.dumps(SCHEMA, indent=2))
        return 0
    if not args.config:
        ap.print_usage(sys.stderr)
        print("diffrope: error: --config is required", file=sys.stderr)
        return 2
    try:
        rc = load_config(args.config, args)
    except (ConfigError, O.ConfigError, D.DataError, ObjectiveError, MemoryBudgetError, DegenerateConstraintError, ValueError, KeyError, TypeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except SolverError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 1
    out = Outputs()
    try:
        if args.command == "estimate":
            msg = cmd_estimate(rc, out, args.sweep)
        else:
            msg = HANDLERS[args.command](rc, out)
    except (ConfigError, O.ConfigError, ObjectiveError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except (SolverError, O.OptimizationError, ArithmeticError) as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return 1
    out.flush(Path(args.out))
    print(msg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
