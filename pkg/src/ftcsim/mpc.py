"""Receding-horizon controllers on the collocation grid.

The nonlinear controller transcribes a tracking optimal-control problem onto
Legendre-Gauss-Lobatto nodes: the cost is the scaled LGL quadrature of
weighted position / speed / turn-rate tracking errors, the dynamics are
enforced through the differentiation matrix at every node, the initial state
is pinned, and wheel-rate box and rate-of-change bounds apply.  The wheel
radii of the process model are parameters supplied at every step, which is
the reconfiguration channel: feeding in live radius estimates retunes the
controller to a punctured wheel.

The linear baseline controller solves the same problem with the dynamics
replaced by a first-order expansion of the nominal-radii kinematics about
the current state and the reference controls, turning every step into a
single QP; see :class:`LmpcController` for why its effectiveness matrix
deliberately stays at the design-time radii.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dynamics import ControlInput, OMEGA_MAX, RobotParams, RobotState, step_truth
from .pseudospectral import CollocationBasis, lgl_basis, time_map
from .sqp import CONVERGED, NlpFunctions, QpWorkingSet, solve_sqp

DEFAULT_RATE_BOUND = math.radians(500.0)  # per controller period
DEFAULT_PERIOD = 0.1


@dataclass(frozen=True)
class OcpWeights:
    """Diagonal tracking weights: position (per axis), speed, turn rate."""

    q_pos: float = 10.0
    q_speed: float = 1.0
    q_turn: float = 1.0

    def __post_init__(self) -> None:
        if min(self.q_pos, self.q_speed, self.q_turn) <= 0:
            raise ValueError("tracking weights must be positive")


@dataclass(frozen=True)
class CircleReference:
    """Constant-speed circular path, time-parameterized."""

    radius: float
    speed: float
    center: tuple[float, float] = (0.0, 0.0)
    phase0: float = 0.0

    def __post_init__(self) -> None:
        if self.radius <= 0 or self.speed <= 0:
            raise ValueError("radius and speed must be positive")

    @property
    def turn_rate(self) -> float:
        return self.speed / self.radius

    def position(self, t: float | np.ndarray) -> np.ndarray:
        ang = self.phase0 + self.turn_rate * np.asarray(t, dtype=float)
        return np.stack(
            [
                self.center[0] + self.radius * np.cos(ang),
                self.center[1] + self.radius * np.sin(ang),
            ],
            axis=-1,
        )

    def heading(self, t: float | np.ndarray) -> np.ndarray:
        """Tangent heading, unwrapped (grows linearly with t)."""
        return self.phase0 + self.turn_rate * np.asarray(t, dtype=float) + 0.5 * np.pi

    def sample(self, t: float | np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(positions, v_ref, psidot_ref) at the requested times."""
        t = np.asarray(t, dtype=float)
        pos = self.position(t)
        return pos, np.full(t.shape, self.speed), np.full(t.shape, self.turn_rate)


def build_reference_circle(
    radius: float, speed: float, center: tuple[float, float] = (0.0, 0.0)
) -> CircleReference:
    return CircleReference(radius=radius, speed=speed, center=center)


def reference_controls(ref: CircleReference, params: RobotParams) -> ControlInput:
    """Wheel rates that realize (v_ref, psidot_ref) for the given radii."""
    v, om = ref.speed, ref.turn_rate
    return ControlInput(
        omega_right=(v + params.b * om) / params.r_right,
        omega_left=(v - params.b * om) / params.r_left,
    )


@dataclass(frozen=True)
class ControlBounds:
    """Actuator box and rate-of-change limits for the transcription."""

    omega_max: float = OMEGA_MAX
    rate_per_period: float = DEFAULT_RATE_BOUND
    period: float = DEFAULT_PERIOD
    rate_enabled: bool = True
    state_lb: tuple[float, float, float] = (-np.inf, -np.inf, -np.inf)
    state_ub: tuple[float, float, float] = (np.inf, np.inf, np.inf)


class KinematicModel:
    """Generalized differential-drive kinematics with fixed radii."""

    def __init__(self, params: RobotParams) -> None:
        if params.r_right <= 0 or params.r_left <= 0:
            raise ValueError("model radii must be positive")
        self.params = params

    def rates(self, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        v = 0.5 * (p.r_right * controls[:, 0] + p.r_left * controls[:, 1])
        om = (p.r_right * controls[:, 0] - p.r_left * controls[:, 1]) / (2.0 * p.b)
        return v, om

    def f(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        v, om = self.rates(controls)
        psi = states[:, 2]
        return np.stack([v * np.cos(psi), v * np.sin(psi), om], axis=1)

    def jac(self, states: np.ndarray, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        n = states.shape[0]
        v, _ = self.rates(controls)
        psi = states[:, 2]
        c, s = np.cos(psi), np.sin(psi)
        dfdx = np.zeros((n, 3, 3))
        dfdx[:, 0, 2] = -v * s
        dfdx[:, 1, 2] = v * c
        dfdu = np.zeros((n, 3, 2))
        dfdu[:, 0, 0] = 0.5 * p.r_right * c
        dfdu[:, 0, 1] = 0.5 * p.r_left * c
        dfdu[:, 1, 0] = 0.5 * p.r_right * s
        dfdu[:, 1, 1] = 0.5 * p.r_left * s
        dfdu[:, 2, 0] = p.r_right / (2.0 * p.b)
        dfdu[:, 2, 1] = -p.r_left / (2.0 * p.b)
        return dfdx, dfdu


class AffineModel:
    """First-order expansion of the kinematics, frozen at one operating point."""

    def __init__(self, inner: KinematicModel, x_lin: np.ndarray, u_lin: np.ndarray) -> None:
        self.params = inner.params
        self.x_lin = np.asarray(x_lin, dtype=float)
        self.u_lin = np.asarray(u_lin, dtype=float)
        self.f0 = inner.f(self.x_lin[None, :], self.u_lin[None, :])[0]
        a, b = inner.jac(self.x_lin[None, :], self.u_lin[None, :])
        self.a = a[0]
        self.b = b[0]

    def f(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return (
            self.f0
            + (states - self.x_lin) @ self.a.T
            + (controls - self.u_lin) @ self.b.T
        )

    def jac(self, states: np.ndarray, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = states.shape[0]
        return np.broadcast_to(self.a, (n, 3, 3)).copy(), np.broadcast_to(
            self.b, (n, 3, 2)
        ).copy()


@dataclass
class NlpProblem:
    """One transcribed tracking problem over the node grid.

    Decision vector layout: the 3 states at each node, then the 2 controls at
    each node (states block first).
    """

    basis: CollocationBasis
    times: np.ndarray
    scale: float
    x_now: np.ndarray
    model: KinematicModel | AffineModel
    weights: OcpWeights
    ref_pos: np.ndarray
    ref_speed: np.ndarray
    ref_turn: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    c_rows: np.ndarray | None
    d_rows: np.ndarray | None

    @property
    def n_nodes(self) -> int:
        return self.basis.n_nodes

    @property
    def n_vars(self) -> int:
        return 5 * self.n_nodes

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n_nodes
        return z[: 3 * n].reshape(n, 3), z[3 * n :].reshape(n, 2)

    def join(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        return np.concatenate([states.ravel(), controls.ravel()])

    def _residual_scales(self) -> np.ndarray:
        return np.sqrt(self.basis.weights * self.scale)

    def residuals(self, z: np.ndarray) -> np.ndarray:
        states, controls = self.split(z)
        v, om = _speed_turn(self.model, controls)
        sq = self._residual_scales()
        w = self.weights
        res = np.empty((self.n_nodes, 4))
        res[:, 0] = math.sqrt(w.q_pos) * sq * (states[:, 0] - self.ref_pos[:, 0])
        res[:, 1] = math.sqrt(w.q_pos) * sq * (states[:, 1] - self.ref_pos[:, 1])
        res[:, 2] = math.sqrt(w.q_speed) * sq * (v - self.ref_speed)
        res[:, 3] = math.sqrt(w.q_turn) * sq * (om - self.ref_turn)
        return res.ravel()

    def jac_residuals(self, z: np.ndarray) -> np.ndarray:
        n = self.n_nodes
        states, controls = self.split(z)
        sq = self._residual_scales()
        w = self.weights
        dv, dom = _speed_turn_grads(self.model, controls)
        jac = np.zeros((4 * n, 5 * n))
        for j in range(n):
            jac[4 * j + 0, 3 * j + 0] = math.sqrt(w.q_pos) * sq[j]
            jac[4 * j + 1, 3 * j + 1] = math.sqrt(w.q_pos) * sq[j]
            cu = 3 * n + 2 * j
            jac[4 * j + 2, cu : cu + 2] = math.sqrt(w.q_speed) * sq[j] * dv[j]
            jac[4 * j + 3, cu : cu + 2] = math.sqrt(w.q_turn) * sq[j] * dom[j]
        return jac

    def objective(self, z: np.ndarray) -> float:
        r = self.residuals(z)
        return 0.5 * float(r @ r)

    def constraints(self, z: np.ndarray) -> np.ndarray:
        states, controls = self.split(z)
        coll = self.basis.d @ states - self.scale * self.model.f(states, controls)
        return np.concatenate([coll.ravel(), states[0] - self.x_now])

    def jac_constraints(self, z: np.ndarray) -> np.ndarray:
        n = self.n_nodes
        states, controls = self.split(z)
        dfdx, dfdu = self.model.jac(states, controls)
        a = np.zeros((3 * n + 3, 5 * n))
        d = self.basis.d
        for j in range(n):
            rows = slice(3 * j, 3 * j + 3)
            for k in range(n):
                a[rows, 3 * k : 3 * k + 3] += d[j, k] * np.eye(3)
            a[rows, 3 * j : 3 * j + 3] -= self.scale * dfdx[j]
            cu = 3 * n + 2 * j
            a[rows, cu : cu + 2] -= self.scale * dfdu[j]
        a[3 * n : 3 * n + 3, 0:3] = np.eye(3)
        return a

    def functions(self) -> NlpFunctions:
        return NlpFunctions(
            residuals=self.residuals,
            jac_residuals=self.jac_residuals,
            constraints=self.constraints,
            jac_constraints=self.jac_constraints,
            lb=self.lb,
            ub=self.ub,
            c_rows=self.c_rows,
            d_rows=self.d_rows,
        )


def _speed_turn(model, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Speed and turn rate are exact (linear) functions of the controls for
    # both models, so the cost terms never need linearizing.
    p = model.params
    v = 0.5 * (p.r_right * controls[:, 0] + p.r_left * controls[:, 1])
    om = (p.r_right * controls[:, 0] - p.r_left * controls[:, 1]) / (2.0 * p.b)
    return v, om


def _speed_turn_grads(model, controls: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = model.params
    n = controls.shape[0]
    dv = np.tile([0.5 * p.r_right, 0.5 * p.r_left], (n, 1))
    dom = np.tile([p.r_right / (2.0 * p.b), -p.r_left / (2.0 * p.b)], (n, 1))
    return dv, dom


@dataclass
class MpcSolution:
    states: np.ndarray
    controls: np.ndarray
    u0: ControlInput
    objective: float
    status: str
    iterations: int
    constraint_violation: float
    z: np.ndarray
    working_set: QpWorkingSet | None = None


def transcribe(
    ref: CircleReference,
    x_now: RobotState,
    params_est: RobotParams,
    weights: OcpWeights,
    basis: CollocationBasis,
    t0: float,
    horizon: float,
    bounds: ControlBounds = ControlBounds(),
    prev_u: ControlInput | None = None,
    model: KinematicModel | AffineModel | None = None,
) -> NlpProblem:
    """Build the tracking NLP over [t0, t0 + horizon]."""
    if params_est.r_right <= 0 or params_est.r_left <= 0:
        raise ValueError("estimated radii must be positive")
    times, scale = time_map(basis, t0, t0 + horizon)
    pos, v_ref, om_ref = ref.sample(times)
    n = basis.n_nodes

    lb = np.empty(5 * n)
    ub = np.empty(5 * n)
    lb[: 3 * n] = np.tile(bounds.state_lb, n)
    ub[: 3 * n] = np.tile(bounds.state_ub, n)
    lb[3 * n :] = -bounds.omega_max
    ub[3 * n :] = bounds.omega_max
    if prev_u is not None and bounds.rate_enabled:
        prev = prev_u.as_array()
        lb[3 * n : 3 * n + 2] = np.maximum(
            lb[3 * n : 3 * n + 2], prev - bounds.rate_per_period
        )
        ub[3 * n : 3 * n + 2] = np.minimum(
            ub[3 * n : 3 * n + 2], prev + bounds.rate_per_period
        )

    c_rows, d_rows = None, None
    if bounds.rate_enabled and n > 1:
        gaps = np.diff(times)
        allowed = bounds.rate_per_period * gaps / bounds.period
        rows = []
        rhs = []
        for j in range(n - 1):
            for m in range(2):
                row = np.zeros(5 * n)
                row[3 * n + 2 * (j + 1) + m] = 1.0
                row[3 * n + 2 * j + m] = -1.0
                rows.append(row)
                rhs.append(allowed[j])
                rows.append(-row)
                rhs.append(allowed[j])
        c_rows = np.vstack(rows)
        d_rows = np.array(rhs)

    return NlpProblem(
        basis=basis,
        times=times,
        scale=scale,
        x_now=x_now.as_array(),
        model=model if model is not None else KinematicModel(params_est),
        weights=weights,
        ref_pos=pos,
        ref_speed=v_ref,
        ref_turn=om_ref,
        lb=lb,
        ub=ub,
        c_rows=c_rows,
        d_rows=d_rows,
    )


def solve_nlp(
    problem: NlpProblem,
    initial_guess: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 200,
    warm: QpWorkingSet | None = None,
) -> MpcSolution:
    """Solve a transcribed problem; deterministic for fixed inputs."""
    result = solve_sqp(problem.functions(), initial_guess, tol=tol, max_iter=max_iter, warm=warm)
    states, controls = problem.split(result.z)
    controls = np.clip(controls, -OMEGA_MAX, OMEGA_MAX)
    u0 = ControlInput(float(controls[0, 0]), float(controls[0, 1]))
    return MpcSolution(
        states=states,
        controls=controls,
        u0=u0,
        objective=result.objective,
        status=result.status,
        iterations=result.iterations,
        constraint_violation=result.constraint_violation,
        z=problem.join(states, controls),
        working_set=result.working_set,
    )


@lru_cache(maxsize=None)
def _bary_weights(nodes: tuple[float, ...]) -> np.ndarray:
    tau = np.asarray(nodes)
    w = np.ones(tau.size)
    for j in range(tau.size):
        w[j] = 1.0 / np.prod(tau[j] - np.delete(tau, j))
    return w / np.max(np.abs(w))


def interpolate_nodes(
    basis: CollocationBasis, values: np.ndarray, tau_eval: np.ndarray
) -> np.ndarray:
    """Barycentric evaluation of the node polynomial at new tau points."""
    tau = basis.nodes
    w = _bary_weights(tuple(tau))
    out = np.empty((tau_eval.size, values.shape[1]))
    for i, te in enumerate(np.clip(tau_eval, -1.0, 1.0)):
        diff = te - tau
        hit = np.flatnonzero(np.abs(diff) < 1e-14)
        if hit.size:
            out[i] = values[hit[0]]
            continue
        coef = w / diff
        out[i] = (coef @ values) / coef.sum()
    return out


class _ControllerBase:
    """Shared receding-horizon bookkeeping: warm starts, failure handling."""

    def __init__(
        self,
        ref: CircleReference,
        weights: OcpWeights = OcpWeights(),
        basis: CollocationBasis | None = None,
        horizon: float = 5.0,
        bounds: ControlBounds = ControlBounds(),
        tol: float = 1e-6,
        max_iter: int = 60,
    ) -> None:
        self.ref = ref
        self.weights = weights
        self.basis = basis if basis is not None else lgl_basis(16)
        self.horizon = horizon
        self.bounds = bounds
        self.tol = tol
        self.max_iter = max_iter
        self.prev_t: float | None = None
        self.prev_z: np.ndarray | None = None
        self.prev_u: ControlInput | None = None
        self.warm: QpWorkingSet | None = None
        self.consecutive_failures = 0

    def _model(self, x_now: RobotState, params_est: RobotParams, t: float):
        raise NotImplementedError

    def _cold_guess(self, problem: NlpProblem, x_now: RobotState, params_est: RobotParams) -> np.ndarray:
        # Dynamically consistent start: roll the model out from the current
        # state under clipped reference controls and sample it at the nodes.
        # Keeps the initial collocation residual small even when the robot
        # is far from the reference.
        u_ref = np.clip(
            reference_controls(self.ref, params_est).as_array(),
            -self.bounds.omega_max,
            self.bounds.omega_max,
        )
        u = ControlInput(float(u_ref[0]), float(u_ref[1]))
        times = problem.times
        states = np.empty((problem.n_nodes, 3))
        state = x_now
        states[0] = state.as_array()
        for j in range(1, problem.n_nodes):
            gap = times[j] - times[j - 1]
            for _ in range(4):
                state = step_truth(state, u, params_est, gap / 4.0)
            states[j] = state.as_array()
        controls = np.tile(u_ref, (problem.n_nodes, 1))
        return problem.join(states, controls)

    def _shifted_guess(self, problem: NlpProblem, t: float) -> np.ndarray:
        assert self.prev_z is not None and self.prev_t is not None
        n = problem.n_nodes
        prev_states = self.prev_z[: 3 * n].reshape(n, 3)
        prev_controls = self.prev_z[3 * n :].reshape(n, 2)
        # Map the new node times into the previous horizon's tau interval.
        tau_new = (2.0 * (problem.times - self.prev_t) / self.horizon) - 1.0
        states = interpolate_nodes(problem.basis, prev_states, tau_new)
        controls = interpolate_nodes(problem.basis, prev_controls, tau_new)
        states[0] = problem.x_now
        return problem.join(states, controls)

    def step(self, x_now: RobotState, params_est: RobotParams, t: float) -> tuple[ControlInput, str]:
        """Transcribe at ``t``, solve, apply the first control.

        On an unusable solve the previous control is re-applied and the
        status reports it; more than three consecutive failures escalate the
        status to ``controller-failure``.
        """
        problem = transcribe(
            self.ref,
            x_now,
            params_est,
            self.weights,
            self.basis,
            t,
            self.horizon,
            self.bounds,
            prev_u=self.prev_u,
            model=self._model(x_now, params_est, t),
        )
        if self.prev_z is not None:
            guess = self._shifted_guess(problem, t)
        else:
            guess = self._cold_guess(problem, x_now, params_est)
        # After repeated failures (reference unreachable, solver stalling)
        # fall back to cheap probe solves until the problem becomes tractable
        # again; the probe still recovers instantly once it does.
        budget = self.max_iter if self.consecutive_failures < 2 else min(3, self.max_iter)
        sol = solve_nlp(problem, guess, tol=self.tol, max_iter=budget, warm=self.warm)

        usable = sol.status in (CONVERGED, "max-iter") and sol.constraint_violation <= 1e-3
        if usable:
            self.consecutive_failures = 0
            u = sol.u0
            self.prev_z = sol.z
            self.prev_t = t
            self.warm = sol.working_set
            status = "ok" if sol.status == CONVERGED else "max-iter"
        else:
            self.consecutive_failures += 1
            if self.prev_u is not None:
                u = self.prev_u
            else:
                fallback = np.clip(
                    reference_controls(self.ref, params_est).as_array(),
                    -self.bounds.omega_max,
                    self.bounds.omega_max,
                )
                u = ControlInput(float(fallback[0]), float(fallback[1]))
            status = (
                "controller-failure"
                if self.consecutive_failures > 3
                else f"failed-reapplied({sol.status})"
            )
        u = ControlInput(
            float(np.clip(u.omega_right, -self.bounds.omega_max, self.bounds.omega_max)),
            float(np.clip(u.omega_left, -self.bounds.omega_max, self.bounds.omega_max)),
        )
        assert abs(u.omega_right) <= OMEGA_MAX + 1e-9
        assert abs(u.omega_left) <= OMEGA_MAX + 1e-9
        self.prev_u = u
        return u, status


class NmpcController(_ControllerBase):
    """Pseudospectral nonlinear MPC, reconfigured through ``params_est``."""

    def _model(self, x_now: RobotState, params_est: RobotParams, t: float):
        return KinematicModel(params_est)


class LmpcController(_ControllerBase):
    """Linear MPC baseline: dynamics replaced by a first-order expansion
    about the current state and the reference controls, refreshed each step.

    The expansion is taken on the design-time (nominal-radii) kinematics, so
    unlike the nonlinear controller this one has no channel through which a
    radius estimate can retune its control effectiveness; that structural
    limitation is what the baseline is meant to expose.  Pass
    ``use_estimates=True`` to linearize the reconfigured model instead.
    """

    def __init__(self, *args, nominal_params: RobotParams | None = None,
                 use_estimates: bool = False, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.nominal_params = nominal_params if nominal_params is not None else RobotParams()
        self.use_estimates = use_estimates

    def _model(self, x_now: RobotState, params_est: RobotParams, t: float):
        params = params_est if self.use_estimates else self.nominal_params
        inner = KinematicModel(params)
        u_lin = reference_controls(self.ref, params).as_array()
        return AffineModel(inner, x_now.as_array(), u_lin)
