"""Closed-loop scenario orchestration, statistics and CSV logging.

One run couples, at the filter rate (100 Hz by default):

  * truth propagation with the scenario's fault profile applied,
  * noisy speed measurement synthesis,
  * one filter predict/update (single EKF/UKF or an IMM bank),

and on every controller tick (10 Hz by default) a receding-horizon step.
With feedback enabled the controller's process-model radii are the filter's
current estimates; without feedback they stay at the nominal values, which
is what separates estimation-only runs from the full reconfigurable loop.
Pose fed to the controller is the truth pose in both arms: the scalar speed
measurement cannot support full-state output feedback, so the two arms
differ only in the reconfiguration channel.

Runs are deterministic per seed, including byte-identical CSV exports.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import (
    ControlInput,
    FaultProfile,
    RobotParams,
    RobotState,
    apply_faults,
    measure_speed,
    speed,
    step_truth,
)
from .estimators import (
    FilterDivergence,
    GaussianBelief,
    InnovationRecord,
    NoiseConfig,
    default_initial_belief,
    default_noise,
    ekf_predict,
    ekf_update,
    ukf_predict,
    ukf_update,
)
from .imm import DegenerateBank, ImmBank, five_mode_bank, four_mode_bank, imm_cycle
from .mpc import (
    CircleReference,
    ControlBounds,
    LmpcController,
    NmpcController,
    OcpWeights,
    build_reference_circle,
)
from .pseudospectral import lgl_basis

FILTER_KINDS = ("ekf", "ukf", "imm_ekf", "imm_ukf")
NOMINAL_PARAMS = RobotParams(2.0, 2.0, 1.0)

# Radius estimates handed to the controller are kept strictly positive.
_MIN_CTRL_RADIUS = 0.02

SETTLE_FRACTION = 0.05
SETTLE_HOLD = 1.0


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative description of one experiment."""

    scenario: int = 1
    filter_kind: str = "ukf"
    imm_modes: int = 4
    feedback: bool = True
    controller: str = "nmpc"
    duration: float | None = None
    seed: int = 0
    filter_hz: int = 100
    controller_hz: int = 10
    n_nodes: int = 16
    horizon: float = 5.0
    circle_radius: float = 50.0
    circle_speed: float = 10.0
    meas_sigma: float = 0.5
    kappa: float = 0.001
    ramp_absolute_time: bool = False

    def __post_init__(self) -> None:
        if self.scenario not in (1, 2, 3, 4):
            raise ValueError("scenario must be 1..4")
        if self.filter_kind not in FILTER_KINDS:
            raise ValueError(f"filter_kind must be one of {FILTER_KINDS}")
        if self.imm_modes not in (4, 5):
            raise ValueError("imm_modes must be 4 or 5")
        if self.controller not in ("nmpc", "lmpc"):
            raise ValueError("controller must be 'nmpc' or 'lmpc'")
        if self.filter_hz % self.controller_hz != 0:
            raise ValueError("filter rate must be divisible by the controller rate")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive")

    @property
    def effective_duration(self) -> float:
        if self.duration is not None:
            return self.duration
        return 40.0 if self.scenario == 4 else 20.0


def scenario_faults(scenario: int, absolute_time: bool = False) -> tuple[FaultProfile, ...]:
    """Fault profiles for the four test cases."""
    if scenario == 1:
        return ()
    if scenario == 2:
        return (FaultProfile(kind="step", wheel="left", onset=10.0, step_fraction=0.5),)
    if scenario == 3:
        return (
            FaultProfile(kind="step", wheel="left", onset=5.0, step_fraction=0.5),
            FaultProfile(kind="step", wheel="right", onset=10.0, step_fraction=0.5),
        )
    if scenario == 4:
        return (
            FaultProfile(
                kind="ramp", wheel="left", onset=10.0, absolute_time=absolute_time
            ),
        )
    raise ValueError("scenario must be 1..4")


def first_fault_onset(cfg: ScenarioConfig) -> float | None:
    faults = scenario_faults(cfg.scenario)
    return min((f.onset for f in faults), default=None)


@dataclass
class SimLog:
    """Time-indexed record of one run (row 0 precedes the first measurement)."""

    cfg: ScenarioConfig | None
    t: np.ndarray
    truth: np.ndarray  # (K+1, 3): x, y, psi
    radii_true: np.ndarray  # (K+1, 2): rR, rL
    u_cmd: np.ndarray  # (K+1, 2): wR, wL
    z: np.ndarray
    est_mean: np.ndarray  # (K+1, 5)
    est_var: np.ndarray  # (K+1, 5) covariance diagonal
    nu: np.ndarray
    s: np.ndarray
    mu: np.ndarray | None  # (K+1, n_modes) for IMM runs
    status: list[str]
    ctrl_radii: np.ndarray | None = None  # (K+1, 2) radii given to the controller
    controller_calls: int = 0

    @property
    def n_rows(self) -> int:
        return self.t.size


class _SingleFilter:
    def __init__(self, kind: str, belief: GaussianBelief, noise: NoiseConfig, kappa: float):
        self.kind = kind
        self.belief = belief
        self.noise = noise
        self.kappa = kappa
        self.mu = None

    def step(self, z, u: ControlInput, dt: float) -> InnovationRecord:
        if self.kind == "ekf":
            pred = ekf_predict(self.belief, u, self.noise, dt)
            self.belief, rec = ekf_update(pred, z, u, self.noise)
        else:
            pred, pts = ukf_predict(self.belief, u, self.noise, dt, self.kappa)
            self.belief, rec = ukf_update(pred, pts, z, u, self.noise)
        return rec


class _ImmFilter:
    def __init__(self, kind: str, bank: ImmBank, noise: NoiseConfig, kappa: float):
        self.kind = "ekf" if kind == "imm_ekf" else "ukf"
        self.bank = bank
        self.noise = noise
        self.kappa = kappa
        self.belief = bank.combined()

    @property
    def mu(self) -> np.ndarray:
        return self.bank.mu

    def step(self, z, u: ControlInput, dt: float) -> InnovationRecord:
        self.bank, self.belief, records = imm_cycle(
            self.bank, z, u, self.noise, dt, filter_kind=self.kind, kappa=self.kappa
        )
        # Moment-matched mixture innovation for logging/consistency analysis.
        mu = self.bank.mu
        nus = np.array([r.nu for r in records])
        ss = np.array([r.s for r in records])
        nu_bar = float(mu @ nus)
        s_bar = float(mu @ (ss + nus**2) - nu_bar**2)
        return InnovationRecord(nu=nu_bar, s=max(s_bar, 1e-12), t=z.t)


def _make_filter(cfg: ScenarioConfig, x0: float, y0: float, psi0: float):
    noise = default_noise(1.0 / cfg.filter_hz)
    if cfg.filter_kind in ("ekf", "ukf"):
        return _SingleFilter(
            cfg.filter_kind, default_initial_belief(x0, y0, psi0), noise, cfg.kappa
        )
    bank = (
        four_mode_bank(x0, y0, psi0)
        if cfg.imm_modes == 4
        else five_mode_bank(x0, y0, psi0)
    )
    return _ImmFilter(cfg.filter_kind, bank, noise, cfg.kappa)


def _make_controller(cfg: ScenarioConfig, ref: CircleReference):
    bounds = ControlBounds(period=1.0 / cfg.controller_hz)
    cls = NmpcController if cfg.controller == "nmpc" else LmpcController
    return cls(
        ref=ref,
        weights=OcpWeights(),
        basis=lgl_basis(cfg.n_nodes),
        horizon=cfg.horizon,
        bounds=bounds,
    )


def run_scenario(cfg: ScenarioConfig) -> SimLog:
    """Run a full closed-loop scenario and return its log.

    Filter divergence and controller failures are recorded in the status
    column rather than raised: a breakdown is a result, not a crash.
    """
    rng = np.random.default_rng(cfg.seed)
    ref = build_reference_circle(cfg.circle_radius, cfg.circle_speed)
    faults = scenario_faults(cfg.scenario, cfg.ramp_absolute_time)
    dt = 1.0 / cfg.filter_hz
    stride = cfg.filter_hz // cfg.controller_hz
    steps = round(cfg.effective_duration * cfg.filter_hz)

    pos0 = ref.position(0.0)
    truth = RobotState(float(pos0[0]), float(pos0[1]), float(ref.heading(0.0)))
    filt = _make_filter(cfg, truth.x, truth.y, truth.psi)
    controller = _make_controller(cfg, ref)

    n_modes = filt.mu.size if filt.mu is not None else 0
    k1 = steps + 1
    log = SimLog(
        cfg=cfg,
        t=np.arange(k1) * dt,
        truth=np.zeros((k1, 3)),
        radii_true=np.zeros((k1, 2)),
        u_cmd=np.zeros((k1, 2)),
        z=np.full(k1, np.nan),
        est_mean=np.zeros((k1, 5)),
        est_var=np.zeros((k1, 5)),
        nu=np.full(k1, np.nan),
        s=np.full(k1, np.nan),
        mu=np.zeros((k1, n_modes)) if n_modes else None,
        status=[""] * k1,
        ctrl_radii=np.zeros((k1, 2)),
    )

    def write_row(
        k: int,
        t: float,
        u: ControlInput,
        z_val: float,
        rec,
        status: str,
        p_ctrl: RobotParams,
    ) -> None:
        p_true = apply_faults(faults, NOMINAL_PARAMS, t)
        log.truth[k] = truth.as_array()
        log.radii_true[k] = (p_true.r_right, p_true.r_left)
        log.u_cmd[k] = (u.omega_right, u.omega_left)
        log.est_mean[k] = filt.belief.mean
        log.est_var[k] = np.diag(filt.belief.cov)
        log.z[k] = z_val
        if rec is not None:
            log.nu[k] = rec.nu
            log.s[k] = rec.s
        if log.mu is not None:
            log.mu[k] = filt.mu
        log.status[k] = status
        log.ctrl_radii[k] = (p_ctrl.r_right, p_ctrl.r_left)

    u = ControlInput(0.0, 0.0)
    ctrl_status = ""
    params_ctrl = NOMINAL_PARAMS

    for k in range(steps):
        t = k * dt
        if k % stride == 0:
            if cfg.feedback:
                r_est = filt.belief.radii()
                params_ctrl = RobotParams(
                    r_right=max(_MIN_CTRL_RADIUS, float(r_est[0])),
                    r_left=max(_MIN_CTRL_RADIUS, float(r_est[1])),
                    b=NOMINAL_PARAMS.b,
                )
            else:
                params_ctrl = NOMINAL_PARAMS
            u, ctrl_status = controller.step(truth, params_ctrl, t)
            log.controller_calls += 1
        if k == 0:
            write_row(0, 0.0, u, math.nan, None, ctrl_status, params_ctrl)

        params_true = apply_faults(faults, NOMINAL_PARAMS, t)
        truth = step_truth(truth, u, params_true, dt)
        t1 = (k + 1) * dt
        params_true1 = apply_faults(faults, NOMINAL_PARAMS, t1)
        v_true = speed(u, params_true1)
        meas = measure_speed(v_true, cfg.meas_sigma, rng, t1)

        status = ctrl_status
        try:
            rec = filt.step(meas, u, dt)
        except (FilterDivergence, DegenerateBank) as exc:
            rec = None
            status = f"{ctrl_status};filter-divergence({type(exc).__name__})"
        write_row(k + 1, t1, u, meas.z, rec, status, params_ctrl)

    return log


@dataclass(frozen=True)
class ConsistencyStats:
    fraction_within_2sigma: float
    radius_rmse_post_convergence: float
    settle_time: float


def _window_mask(log: SimLog, window: tuple[float, float] | None) -> np.ndarray:
    if window is None:
        return np.ones(log.n_rows, dtype=bool)
    lo, hi = window
    if hi <= lo:
        raise ValueError("empty window")
    mask = (log.t >= lo) & (log.t <= hi)
    if not mask.any():
        raise ValueError("window outside the log span")
    return mask


def innovation_coverage(log: SimLog, window: tuple[float, float] | None = None) -> float:
    """Fraction of innovations inside the +-2 sqrt(S) band."""
    mask = _window_mask(log, window) & np.isfinite(log.nu)
    nu = log.nu[mask]
    s = log.s[mask]
    if nu.size == 0:
        raise ValueError("no innovations in window")
    return float(np.mean(np.abs(nu) <= 2.0 * np.sqrt(s)))


def settle_time(log: SimLog, window: tuple[float, float] | None = None) -> float:
    """First time both radius estimates enter the 5% band around truth and
    stay there for a sustained second; NaN if that never happens."""
    mask = _window_mask(log, window)
    idx = np.flatnonzero(mask)
    rel = np.abs(log.est_mean[idx, 3:5] - log.radii_true[idx]) / np.abs(
        log.radii_true[idx]
    )
    good = np.all(rel <= SETTLE_FRACTION, axis=1)
    dt = float(log.t[1] - log.t[0])
    hold = max(1, int(round(SETTLE_HOLD / dt)))
    if good.size < hold:
        return math.nan
    window_ok = np.convolve(good.astype(int), np.ones(hold, dtype=int), "valid") == hold
    starts = np.flatnonzero(window_ok)
    if starts.size == 0:
        return math.nan
    return float(log.t[idx[starts[0]]])


def radius_rmse(log: SimLog, window: tuple[float, float] | None = None, wheel: str | None = None) -> float:
    """RMSE of the radius estimates against truth over a window."""
    mask = _window_mask(log, window)
    err = log.est_mean[mask, 3:5] - log.radii_true[mask]
    if wheel == "right":
        err = err[:, :1]
    elif wheel == "left":
        err = err[:, 1:]
    return float(np.sqrt(np.mean(err**2)))


def tracking_error(log: SimLog, window: tuple[float, float] | None = None) -> float:
    """RMS distance between the robot and the moving reference point."""
    if log.cfg is None:
        raise ValueError("tracking error needs the run configuration")
    ref = build_reference_circle(log.cfg.circle_radius, log.cfg.circle_speed)
    mask = _window_mask(log, window)
    ref_pos = ref.position(log.t[mask])
    d = log.truth[mask, :2] - ref_pos
    return float(np.sqrt(np.mean(np.sum(d**2, axis=1))))


def consistency_stats(
    log: SimLog, window: tuple[float, float] | None = None
) -> ConsistencyStats:
    frac = innovation_coverage(log, window)
    ts = settle_time(log, window)
    if math.isnan(ts):
        rmse = math.nan
    else:
        end = log.t[-1] if window is None else window[1]
        rmse = radius_rmse(log, (ts, float(end)))
    return ConsistencyStats(
        fraction_within_2sigma=frac,
        radius_rmse_post_convergence=rmse,
        settle_time=ts,
    )


def compare_runs(logs: list[SimLog]) -> list[dict]:
    """Per-filter summary table for runs of the same scenario and seed."""
    if not logs:
        raise ValueError("no logs to compare")
    cfgs = [log.cfg for log in logs]
    if any(c is None for c in cfgs):
        raise ValueError("comparison needs configured logs")
    base = cfgs[0]
    for c in cfgs[1:]:
        if (c.scenario, c.seed) != (base.scenario, base.seed):
            raise ValueError("logs must share scenario and seed")
    onset = first_fault_onset(base)
    window = (onset, float(logs[0].t[-1])) if onset is not None else None
    rows = []
    for log in logs:
        label = log.cfg.filter_kind + (
            f"-{log.cfg.imm_modes}m" if log.cfg.filter_kind.startswith("imm") else ""
        )
        rows.append(
            {
                "filter": label,
                "settle_time": settle_time(log, window),
                "rmse_left": radius_rmse(log, window, wheel="left"),
                "rmse_right": radius_rmse(log, window, wheel="right"),
                "coverage": innovation_coverage(log, window),
                "tracking_rms": tracking_error(log, window),
            }
        )
    return rows


def format_comparison(rows: list[dict]) -> str:
    header = f"{'filter':<12}{'settle[s]':>10}{'rmseL[m]':>10}{'rmseR[m]':>10}{'cover':>8}{'track[m]':>10}"
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['filter']:<12}{r['settle_time']:>10.3g}{r['rmse_left']:>10.3g}"
            f"{r['rmse_right']:>10.3g}{r['coverage']:>8.3f}{r['tracking_rms']:>10.3g}"
        )
    return "\n".join(lines)


_BASE_COLUMNS = [
    "t",
    "x",
    "y",
    "psi",
    "rR_true",
    "rL_true",
    "wR_cmd",
    "wL_cmd",
    "z",
    "xhat",
    "yhat",
    "psihat",
    "rRhat",
    "rLhat",
    "P11",
    "P22",
    "P33",
    "P44",
    "P55",
    "nu",
    "S",
]


def csv_columns(n_modes: int) -> list[str]:
    cols = list(_BASE_COLUMNS)
    cols.extend(f"mu{j + 1}" for j in range(n_modes))
    cols.append("solver_status")
    return cols


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def export_csv(log: SimLog, path: str | Path) -> Path:
    """Write the run log; one row per filter tick, floats at 9 significant
    digits, deterministic for identical logs."""
    path = Path(path)
    n_modes = log.mu.shape[1] if log.mu is not None else 0
    lines = [",".join(csv_columns(n_modes))]
    for k in range(log.n_rows):
        vals = [
            log.t[k],
            log.truth[k, 0],
            log.truth[k, 1],
            log.truth[k, 2],
            log.radii_true[k, 0],
            log.radii_true[k, 1],
            log.u_cmd[k, 0],
            log.u_cmd[k, 1],
            log.z[k],
            *log.est_mean[k],
            *log.est_var[k],
            log.nu[k],
            log.s[k],
        ]
        if n_modes:
            vals.extend(log.mu[k])
        fields = [_fmt(v) for v in vals]
        fields.append(log.status[k])
        lines.append(",".join(fields))
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"failed to write log to {path}: {exc}") from exc
    return path


def parse_csv(path: str | Path) -> SimLog:
    """Read a log written by :func:`export_csv` (configuration not recovered)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"failed to read log from {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty log file")
    header = lines[0].split(",")
    mode_cols = [c for c in header if c.startswith("mu")]
    expected = csv_columns(len(mode_cols))
    if header != expected:
        raise ValueError(f"{path}: unexpected column layout")
    rows = [ln.split(",") for ln in lines[1:]]
    data = np.array([[float(v) for v in row[:-1]] for row in rows])
    status = [row[-1] for row in rows]
    n_modes = len(mode_cols)
    mu = data[:, 21 : 21 + n_modes] if n_modes else None
    return SimLog(
        cfg=None,
        t=data[:, 0],
        truth=data[:, 1:4],
        radii_true=data[:, 4:6],
        u_cmd=data[:, 6:8],
        z=data[:, 8],
        est_mean=data[:, 9:14],
        est_var=data[:, 14:19],
        nu=data[:, 19],
        s=data[:, 20],
        mu=mu,
        status=status,
    )
