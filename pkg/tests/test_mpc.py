import math

import numpy as np
import pytest

from ftcsim.dynamics import ControlInput, OMEGA_MAX, RobotParams, RobotState, step_truth
from ftcsim.mpc import (
    AffineModel,
    ControlBounds,
    KinematicModel,
    LmpcController,
    NmpcController,
    OcpWeights,
    build_reference_circle,
    interpolate_nodes,
    reference_controls,
    solve_nlp,
    transcribe,
)
from ftcsim.pseudospectral import lgl_basis


class LineReference:
    """Drive along y = 0 at 10 m/s."""

    speed = 10.0

    def sample(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.stack([self.speed * t, np.zeros_like(t)], axis=-1)
        return pos, np.full(t.shape, self.speed), np.zeros(t.shape)

    def position(self, t):
        t = np.asarray(t, dtype=float)
        return np.stack([self.speed * t, np.zeros_like(t)], axis=-1)

    def heading(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))


def test_reference_circle_geometry():
    ref = build_reference_circle(50.0, 10.0)
    assert ref.turn_rate == pytest.approx(0.2)
    period = 2 * math.pi * 50.0 / 10.0
    assert np.allclose(ref.position(0.0), ref.position(period), atol=1e-9)
    for t in np.linspace(0, 40, 17):
        assert np.hypot(*ref.position(t)) == pytest.approx(50.0, abs=1e-12)


def _line_problem(n=8, rate_enabled=False, params=RobotParams(2, 2, 1)):
    basis = lgl_basis(n)
    return transcribe(
        LineReference(),
        RobotState(0, 0, 0),
        params,
        OcpWeights(),
        basis,
        t0=0.0,
        horizon=5.0,
        bounds=ControlBounds(rate_enabled=rate_enabled),
    )


def _reference_guess(problem, psi=0.0, omega=5.0):
    n = problem.n_nodes
    states = np.column_stack([problem.ref_pos, np.full(n, psi)])
    controls = np.full((n, 2), omega)
    return problem.join(states, controls)


def test_transcription_constraint_count():
    problem = _line_problem(n=8)
    z = _reference_guess(problem)
    assert problem.constraints(z).shape == (3 * 9 + 3,)
    assert problem.jac_constraints(z).shape == (30, 45)


def test_transcription_reference_feasible():
    problem = _line_problem(n=8)
    z = _reference_guess(problem)
    assert problem.objective(z) == pytest.approx(0.0, abs=1e-18)
    assert np.max(np.abs(problem.constraints(z))) < 1e-6


def test_transcription_radius_scaling_identity():
    # same predicted speed for (radii, omega) and (radii/2, 2*omega)
    m_full = KinematicModel(RobotParams(2, 2, 1))
    m_half = KinematicModel(RobotParams(1, 1, 1))
    states = np.zeros((4, 3))
    controls = np.random.default_rng(0).uniform(-5, 5, size=(4, 2))
    f_full = m_full.f(states, controls)
    f_half = m_half.f(states, 2.0 * controls)
    assert np.allclose(f_full, f_half, atol=1e-12)


def test_objective_and_constraint_jacobians_match_fd():
    problem = _line_problem(n=4)
    rng = np.random.default_rng(1)
    z = _reference_guess(problem) + rng.normal(0, 0.3, size=problem.n_vars)
    eps = 1e-6

    jac = problem.jac_residuals(z)
    fd = np.zeros_like(jac)
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = eps
        fd[:, i] = (problem.residuals(z + dz) - problem.residuals(z - dz)) / (2 * eps)
    assert np.allclose(jac, fd, rtol=1e-5, atol=1e-7)

    a = problem.jac_constraints(z)
    fd_a = np.zeros_like(a)
    for i in range(z.size):
        dz = np.zeros_like(z)
        dz[i] = eps
        fd_a[:, i] = (problem.constraints(z + dz) - problem.constraints(z - dz)) / (2 * eps)
    assert np.allclose(a, fd_a, rtol=1e-5, atol=1e-6)


def test_straight_line_ocp_recovers_steady_controls():
    problem = _line_problem(n=8)
    z0 = _reference_guess(problem, omega=4.0)
    sol = solve_nlp(problem, z0)
    assert sol.status == "converged"
    assert np.max(np.abs(sol.controls - 5.0)) < 1e-4


def test_warm_start_resolves_in_two_iterations():
    problem = _line_problem(n=8)
    sol = solve_nlp(problem, _reference_guess(problem, omega=4.0))
    re = solve_nlp(problem, sol.z, warm=sol.working_set)
    assert re.status == "converged"
    assert re.iterations <= 2
    assert re.objective <= sol.objective + 1e-12


def test_solution_objective_not_above_guess():
    problem = _line_problem(n=8)
    z0 = _reference_guess(problem, omega=4.6)
    sol = solve_nlp(problem, z0)
    assert sol.objective <= problem.objective(z0) + 1e-12


def test_controls_respect_box():
    # ask for an unreachable speed: controls must saturate at the box
    class FastLine(LineReference):
        speed = 80.0

    basis = lgl_basis(6)
    problem = transcribe(
        FastLine(),
        RobotState(0, 0, 0),
        RobotParams(2, 2, 1),
        OcpWeights(),
        basis,
        t0=0.0,
        horizon=5.0,
        bounds=ControlBounds(rate_enabled=False),
    )
    n = basis.n_nodes
    states = np.column_stack([problem.ref_pos, np.zeros(n)])
    z0 = problem.join(states, np.full((n, 2), 10.0))
    sol = solve_nlp(problem, z0)
    assert np.all(np.abs(sol.controls) <= OMEGA_MAX + 1e-9)
    assert np.max(np.abs(sol.controls)) == pytest.approx(OMEGA_MAX, abs=1e-6)


def test_rate_rows_respected():
    problem = _line_problem(n=8, rate_enabled=True)
    z0 = _reference_guess(problem, omega=4.0)
    sol = solve_nlp(problem, z0)
    gaps = np.diff(problem.times)
    allowed = math.radians(500.0) * gaps / 0.1
    du = np.abs(np.diff(sol.controls, axis=0))
    assert np.all(du <= allowed[:, None] + 1e-6)


def test_affine_model_linearization_matches_fd():
    inner = KinematicModel(RobotParams(2, 1.3, 1))
    x_lin = np.array([0.3, -0.2, 0.7])
    u_lin = np.array([4.0, 6.0])
    model = AffineModel(inner, x_lin, u_lin)
    eps = 1e-6
    for j in range(3):
        dx = np.zeros(3)
        dx[j] = eps
        fd = (
            inner.f((x_lin + dx)[None, :], u_lin[None, :])[0]
            - inner.f((x_lin - dx)[None, :], u_lin[None, :])[0]
        ) / (2 * eps)
        assert np.allclose(model.a[:, j], fd, rtol=1e-6, atol=1e-8)
    for j in range(2):
        du = np.zeros(2)
        du[j] = eps
        fd = (
            inner.f(x_lin[None, :], (u_lin + du)[None, :])[0]
            - inner.f(x_lin[None, :], (u_lin - du)[None, :])[0]
        ) / (2 * eps)
        assert np.allclose(model.b[:, j], fd, rtol=1e-6, atol=1e-8)
    # affine model agrees with the kinematics at the linearization point
    assert np.allclose(
        model.f(x_lin[None, :], u_lin[None, :])[0],
        inner.f(x_lin[None, :], u_lin[None, :])[0],
    )


def test_interpolate_nodes_reproduces_polynomials():
    basis = lgl_basis(7)
    coeffs = np.array([0.3, -1.2, 0.5, 2.0])
    poly = np.polynomial.Polynomial(coeffs)
    vals = poly(basis.nodes)[:, None]
    tau_eval = np.linspace(-1, 1, 33)
    out = interpolate_nodes(basis, vals, tau_eval)
    assert np.allclose(out[:, 0], poly(tau_eval), atol=1e-12)


def _track_circle(controller_cls, duration, fault_time=None, fault_params=None, **kwargs):
    ref = build_reference_circle(50.0, 10.0)
    ctrl = controller_cls(ref, basis=lgl_basis(16), **kwargs)
    nominal = RobotParams(2, 2, 1)
    pos0 = ref.position(0.0)
    truth = RobotState(float(pos0[0]), float(pos0[1]), float(ref.heading(0.0)))
    dt = 0.01
    errs = []
    u = ControlInput(0, 0)
    for k in range(round(duration / dt)):
        t = k * dt
        params = nominal
        if fault_time is not None and t >= fault_time:
            params = fault_params
        if k % 10 == 0:
            u, status = ctrl.step(truth, params, t)
            assert abs(u.omega_right) <= OMEGA_MAX + 1e-9
            assert abs(u.omega_left) <= OMEGA_MAX + 1e-9
        truth = step_truth(truth, u, params, dt)
        rp = ref.position(t + dt)
        errs.append(math.hypot(truth.x - rp[0], truth.y - rp[1]))
    return np.array(errs)


def test_nmpc_tracks_circle():
    errs = _track_circle(NmpcController, duration=6.0)
    assert math.sqrt(float(np.mean(errs**2))) < 0.3


def test_nmpc_recovers_after_fault_with_feedback():
    errs = _track_circle(
        NmpcController,
        duration=10.0,
        fault_time=4.0,
        fault_params=RobotParams(2, 1, 1),
    )
    assert math.sqrt(float(np.mean(errs[-200:] ** 2))) < 0.3


def test_nmpc_degrades_without_feedback():
    # controller believes nominal radii while the plant is faulted
    ref = build_reference_circle(50.0, 10.0)
    ctrl = NmpcController(ref, basis=lgl_basis(16))
    nominal = RobotParams(2, 2, 1)
    faulted = RobotParams(2, 1, 1)
    pos0 = ref.position(0.0)
    truth = RobotState(float(pos0[0]), float(pos0[1]), float(ref.heading(0.0)))
    dt = 0.01
    errs = []
    for k in range(800):
        t = k * dt
        if k % 10 == 0:
            u, _ = ctrl.step(truth, nominal, t)
        truth = step_truth(truth, u, faulted, dt)
        rp = ref.position(t + dt)
        errs.append(math.hypot(truth.x - rp[0], truth.y - rp[1]))
    assert np.max(errs) > 2.0
    assert errs[-1] > np.mean(errs[:100])


def test_nmpc_prediction_matches_truth_over_one_period():
    # steady tracking with perfect radii: the collocation prediction 0.1 s
    # ahead should match RK4 truth propagation to collocation accuracy
    ref = build_reference_circle(50.0, 10.0)
    ctrl = NmpcController(ref, basis=lgl_basis(16))
    params = RobotParams(2, 2, 1)
    pos0 = ref.position(0.0)
    truth = RobotState(float(pos0[0]), float(pos0[1]), float(ref.heading(0.0)))
    dt = 0.01
    u = ControlInput(0, 0)
    for k in range(200):
        t = k * dt
        if k % 10 == 0:
            u, _ = ctrl.step(truth, params, t)
            if k >= 100:
                n = ctrl.basis.n_nodes
                states = ctrl.prev_z[: 3 * n].reshape(n, 3)
                tau_next = 2.0 * 0.1 / ctrl.horizon - 1.0
                predicted = interpolate_nodes(ctrl.basis, states, np.array([tau_next]))[0]
                probe = truth
                for _ in range(10):
                    probe = step_truth(probe, u, params, dt)
                assert math.hypot(predicted[0] - probe.x, predicted[1] - probe.y) < 1e-3
        truth = step_truth(truth, u, params, dt)


def test_lmpc_tracks_circle_no_fault():
    errs = _track_circle(LmpcController, duration=8.0)
    assert math.sqrt(float(np.mean(errs**2))) < 1.0


def test_lmpc_worse_than_nmpc_after_fault():
    faulted = RobotParams(2, 1, 1)
    errs_n = _track_circle(
        NmpcController, duration=10.0, fault_time=4.0, fault_params=faulted
    )
    errs_l = _track_circle(
        LmpcController, duration=10.0, fault_time=4.0, fault_params=faulted
    )
    post_n = math.sqrt(float(np.mean(errs_n[500:] ** 2)))
    post_l = math.sqrt(float(np.mean(errs_l[500:] ** 2)))
    assert post_l >= 2.0 * max(post_n, 1e-6)


def test_reference_controls_realize_reference():
    ref = build_reference_circle(50.0, 10.0)
    params = RobotParams(2, 1.2, 1)
    u = reference_controls(ref, params)
    v = 0.5 * (params.r_right * u.omega_right + params.r_left * u.omega_left)
    om = (params.r_right * u.omega_right - params.r_left * u.omega_left) / 2.0
    assert v == pytest.approx(10.0)
    assert om == pytest.approx(0.2)


def test_controller_failure_reapplies_last_control():
    ref = build_reference_circle(50.0, 10.0)
    ctrl = NmpcController(ref, basis=lgl_basis(8), max_iter=200)
    params = RobotParams(2, 2, 1)
    pos0 = ref.position(0.0)
    truth = RobotState(float(pos0[0]), float(pos0[1]), float(ref.heading(0.0)))
    u0, status0 = ctrl.step(truth, params, 0.0)
    assert status0 == "ok"

    # sabotage the next solve by exhausting iterations
    ctrl.max_iter = 0
    u1, status1 = ctrl.step(truth, params, 0.1)
    assert status1.startswith("failed-reapplied")
    assert (u1.omega_right, u1.omega_left) == (u0.omega_right, u0.omega_left)
