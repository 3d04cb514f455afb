import csv

import numpy as np
import pytest

from diffrope import autodiff as ad
from diffrope import rope as rp
from diffrope import solvers as S
from conftest import hanging_template

# frozen from a reference run of the standard hanging rope (K=20, span 0.7, eta_x_G=0.024)
HANGING_MIN_Z = -0.131397
HANGING_LENGTH = 1.0


def test_gravity_prediction_examples():
    s = rp.RopeState.straight(3, 1.0, fixed=[0])
    p = S.SolverParams(gravity=(0, 0, -9.8), eta_x_G=0.024)
    out = S.gravity_predict(s, p)
    assert out.positions[0, 2] == 0.0
    assert np.allclose(out.positions[1:, 2], -0.1176)
    assert np.array_equal(S.gravity_predict(s, p.with_values(eta_x_G=0.0)).positions, s.positions)


def test_rest_state_is_a_fixed_point_of_one_pass():
    s = rp.RopeState.straight(6, 1.0, fixed=[0])
    for mode in (S.JACOBI, S.THOMAS):
        out, res = S.jacobi_iteration(s, S.SolverParams(distance_mode=mode))
        assert np.array_equal(out.positions, s.positions)
        assert max(res) <= 1e-12


def test_zero_weights_leave_state_unchanged(rng):
    s = rp.RopeState.straight(6, 1.0)
    s = s.with_pose(s.positions + 0.05 * rng.normal(size=s.positions.shape), s.quaternions)
    p = S.SolverParams(eta_x_S=0, eta_q_S=0, eta_q_B=0, eta_x_D=0, eta_SOR=1, distance_mode=S.JACOBI)
    out, _ = S.jacobi_iteration(s, p)
    assert np.array_equal(out.positions, s.positions)
    assert np.allclose(out.quaternions, s.quaternions, atol=1e-15)


def test_single_distance_projection_closed_form():
    s = rp.RopeState.straight(2, 1.0, fixed=[0])
    s = s.with_pose(np.array([[0, 0, 0], [1.5, 0, 0.0]]), s.quaternions)
    p = S.SolverParams(eta_x_S=0, eta_q_S=0, eta_q_B=0, eta_x_D=1, eta_SOR=1, distance_mode=S.JACOBI)
    out, _ = S.jacobi_iteration(s, p)
    # projection moves the free end by -C = -0.5, the averaged update halves it
    assert np.allclose(out.positions[1], [1.25, 0, 0])


def test_thomas_satisfied_chain_does_not_move():
    s = rp.RopeState.straight(5, 1.0)
    assert np.array_equal(S.thomas_distance_solve(s).positions, s.positions)


def test_thomas_collinear_stretched_three_particles():
    s = rp.RopeState.straight(3, 2.0)
    s = s.with_pose(s.positions * 1.1, s.quaternions)
    out = S.thomas_distance_solve(s, max_outer=1)
    res = np.abs(np.linalg.norm(np.diff(out.positions, axis=0), axis=1) - 1.0)
    assert res.max() <= 1e-8
    assert np.isclose(out.length(), 2.0, atol=1e-12)
    # equal masses, free ends: the middle particle stays put
    assert np.allclose(out.positions[1], s.positions[1])


def test_thomas_single_pass_for_fixed_vertical_pair():
    s = rp.RopeState.straight(2, 1.0, direction=(0, 0, -1), fixed=[0])
    s = s.with_pose(np.array([[0, 0, 0], [0, 0, -1.3]]), s.quaternions)
    out = S.thomas_distance_solve(s, max_outer=1)
    assert np.array_equal(out.positions[0], [0, 0, 0])
    assert np.allclose(out.positions[1], [0, 0, -1], atol=1e-15)


def test_thomas_infeasible_chain():
    s = rp.RopeState.straight(3, 1.0, fixed=[0, 1, 2])
    s = s.with_pose(s.positions * 1.2, s.quaternions)
    with pytest.raises(S.InfeasibleChainError):
        S.thomas_distance_solve(s)
    s = rp.RopeState.straight(4, 1.0, fixed=[0, 1])
    s = s.with_pose(s.positions * 1.2, s.quaternions)
    with pytest.raises(S.InfeasibleChainError):
        S.thomas_distance_solve(s)


def test_coincident_particles_are_reported():
    s = rp.RopeState.straight(3, 1.0)
    x = s.positions.copy()
    x[1] = x[0]
    with pytest.raises(rp.SingularProjectionError):
        S.thomas_distance_solve(s.with_pose(x, s.quaternions))


def test_zero_gravity_rest_state_is_unchanged():
    s = rp.RopeState.straight(10, 1.0, fixed=[0, 9])
    for mode in (S.JACOBI, S.THOMAS):
        out, rep = S.simulate_quasi_static(s, S.SolverParams(gravity=(0, 0, 0), iterations=30, distance_mode=mode))
        assert np.abs(out.positions - s.positions).max() <= 1e-12
        assert rep.iterations == 30


def test_two_particle_rope_hangs_below_pin():
    s = rp.RopeState.straight(2, 0.5, direction=(0, 0, -1), fixed=[0])
    out, _ = S.simulate_quasi_static(s, S.SolverParams(gravity=(0, 0, -9.8)))
    assert np.allclose(out.positions[1], [0, 0, -0.5], atol=1e-6)


def test_hanging_rope_thomas(hanging, hanging_params):
    out, rep = S.simulate_quasi_static(hanging, hanging_params)
    x = out.positions
    assert rep.max_CD[-1] <= 1e-8
    assert abs(out.length() - HANGING_LENGTH) <= 1e-3
    assert np.isclose(x[:, 2].min(), HANGING_MIN_Z, atol=1e-4)
    mirror = x[::-1] * [-1, 1, 1] + [0.7, 0, 0]
    assert np.abs(mirror - x).max() <= 1e-6


def test_jacobi_residual_trend_and_mode_ordering(hanging, hanging_params):
    jac = hanging_params.with_values(distance_mode=S.JACOBI, iterations=100)
    _, rep = S.simulate_quasi_static(hanging, jac)
    assert rep.max_CD[99] <= rep.max_CD[9]
    _, thomas = S.simulate_quasi_static(hanging, hanging_params)
    assert rep.max_CD[49] > thomas.max_CD[49]


def test_rest_length_gradient_variant_runs(hanging, hanging_params):
    p = hanging_params.with_values(distance_mode=S.JACOBI, distance_gradient="rest")
    out, _ = S.simulate_quasi_static(hanging, p)
    assert np.all(np.isfinite(out.positions))


def test_determinism(hanging, hanging_params):
    a, _ = S.simulate_quasi_static(hanging, hanging_params)
    b, _ = S.simulate_quasi_static(hanging, hanging_params)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.quaternions, b.quaternions)


def test_step_report_csv(tmp_path, hanging, hanging_params):
    _, rep = S.simulate_quasi_static(hanging, hanging_params.with_values(iterations=3))
    rep.to_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["iteration", "max_CS", "max_CB", "max_CD", "length"]
    assert len(rows) == 4 and float(rows[-1][4]) == rep.final_length


def test_params_validation_and_round_trip():
    with pytest.raises(ValueError):
        S.SolverParams(iterations=0)
    with pytest.raises(ValueError):
        S.SolverParams(distance_mode="gauss")
    with pytest.raises(ValueError):
        S.SolverParams(dt=0)
    with pytest.raises(ValueError):
        S.SolverParams.from_dict({"eta_x_Q": 1.0})
    p = S.SolverParams(eta_x_G=0.03, distance_mode=S.JACOBI)
    assert S.SolverParams.from_dict(p.to_dict()) == p


def test_tensioned_regime_gravity_weight():
    p = S.SolverParams(eta_x_G=0.26, eta_x_G_tensioned=0.001)
    assert p.gravity_weight("tensioned") == 0.001
    assert p.gravity_weight("bending") == 0.26


# gradients --------------------------------------------------------------------------------


def _small_problem(mode, iterations=10):
    K = 8
    tmpl = rp.RopeState.straight(K, 1.0, fixed=[0, K - 1])
    base = S.SolverParams(distance_mode=mode, iterations=iterations, thomas_tolerance=0.0, eta_x_G=0.03)
    W = np.random.default_rng(7).normal(size=(K, 3))

    def build(v):
        st = rp.anchored(tmpl, {0: v["control"], K - 1: np.array([0.7, 0.0, 0.0])})
        return st, base.with_values(**{n: v[n] for n in S.ETA_NAMES})

    vals = {n: np.asarray(float(getattr(base, n))) for n in S.ETA_NAMES}
    vals["control"] = np.array([0.0, 0.05, 0.1])
    return build, vals, lambda s: ad.sum(s.positions * W)


@pytest.mark.parametrize("mode", [S.JACOBI, S.THOMAS])
def test_solver_gradient_matches_fd(mode):
    build, vals, loss = _small_problem(mode)
    _, g, _, _ = S.value_and_grad(build, vals, loss)
    for name in ("eta_x_D", "eta_SOR", "control"):

        def f(z):
            v = dict(vals)
            v[name] = z
            st, p = build(v)
            out, _ = S.simulate_quasi_static(st, p, report=False)
            return float(ad.value(loss(out)))

        fd = ad.finite_difference(f, vals[name])
        assert np.allclose(g[name], fd, rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("iterations,every,tol", [(10, 3, 1e-12), (200, 16, 1e-10)])
def test_checkpointed_gradients_equal_unrolled(iterations, every, tol):
    build, vals, loss = _small_problem(S.THOMAS, iterations)
    l1, g1, _, _ = S.value_and_grad(build, vals, loss)
    l2, g2, _, _ = S.value_and_grad(build, vals, loss, policy=ad.checkpoint_policy({"every": every}))
    assert l1 == l2
    for n in vals:
        assert np.abs(g1[n] - g2[n]).max() <= tol * max(1.0, np.abs(g1[n]).max())


def test_memory_budget_below_one_iteration():
    build, vals, loss = _small_problem(S.JACOBI)
    with pytest.raises(ad.MemoryBudgetError):
        S.value_and_grad(build, vals, loss, policy=ad.checkpoint_policy({"max_tape_nodes": 5}))


def test_near_taut_gradient_converges_with_step():
    # chord 0.9988 of the rest length: a 1e-6 step is swamped by curvature,
    # but central differences converge to the autodiff value as the step shrinks
    from test_acceptance import _gradient_case

    build, vals, loss = _gradient_case(93, S.THOMAS, far_x=(0.6, 0.9))
    _, g, _, _ = S.value_and_grad(build, vals, loss)

    def f(z):
        v = dict(vals)
        v["eta_x_G"] = z
        st, p = build(v)
        out, _ = S.simulate_quasi_static(st, p, report=False)
        return float(ad.value(loss(out)))

    errs = [abs(ad.finite_difference(f, vals["eta_x_G"], h) - g["eta_x_G"]) for h in (1e-5, 1e-6, 1e-7, 1e-8)]
    assert errs[0] > errs[1] > errs[2] > errs[3]
    assert errs[3] <= 1e-6 * abs(g["eta_x_G"])
