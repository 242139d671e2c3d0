"""Differential-drive robot truth model with injectable wheel faults.

The plant is purely kinematic.  Both wheel radii are kept as independent
parameters so that a puncture (sudden or gradual radius loss) can be injected
on either side; with equal radii the model reduces to the familiar unicycle

    xdot   = V cos(psi)
    ydot   = V sin(psi)
    psidot = (rR*wR - rL*wL) / (2 b),     V = (rR*wR + rL*wL) / 2.

Everything in this module is a pure function over immutable values; the only
stateful object is the caller-supplied random generator used for measurement
noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# Actuator limit on each wheel (the controllers clamp to this).
OMEGA_MAX = math.radians(1000.0)

# Defaults for the gradual-puncture profile: radius loss rate and the value
# the radius is not allowed to drop below.
RAMP_RATE = 0.1
RAMP_FLOOR = 0.1


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite value in {name}: {v!r}")


@dataclass(frozen=True)
class RobotState:
    """Planar pose.  ``psi`` is stored unwrapped (no modular reduction) so
    that trajectories stay smooth for collocation."""

    x: float
    y: float
    psi: float

    def __post_init__(self) -> None:
        _require_finite("RobotState", self.x, self.y, self.psi)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi], dtype=float)


@dataclass(frozen=True)
class RobotParams:
    """Physical parameters: wheel radii and half axle length (all metres)."""

    r_right: float = 2.0
    r_left: float = 2.0
    b: float = 1.0

    def __post_init__(self) -> None:
        _require_finite("RobotParams", self.r_right, self.r_left, self.b)
        if self.r_right <= 0 or self.r_left <= 0 or self.b <= 0:
            raise ValueError("wheel radii and half axle length must be positive")


@dataclass(frozen=True)
class ControlInput:
    """Wheel angular rates in rad/s."""

    omega_right: float = 0.0
    omega_left: float = 0.0

    def __post_init__(self) -> None:
        _require_finite("ControlInput", self.omega_right, self.omega_left)

    def as_array(self) -> np.ndarray:
        return np.array([self.omega_right, self.omega_left], dtype=float)


@dataclass(frozen=True)
class FaultProfile:
    """Time-driven radius fault on one wheel.

    kind='step'  : at ``onset`` the radius drops to ``step_fraction`` of its
                   nominal value and stays there.
    kind='ramp'  : from ``onset`` the radius decreases at ``ramp_rate`` m/s,
                   clamped at ``floor``.  By default the ramp is measured
                   from the onset; ``absolute_time=True`` switches to the
                   literal r(t) = nominal - ramp_rate * t reading.
    kind='none'  : no fault.
    """

    kind: str = "none"
    wheel: str = "left"
    onset: float = 0.0
    step_fraction: float = 0.5
    ramp_rate: float = RAMP_RATE
    floor: float = RAMP_FLOOR
    absolute_time: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("none", "step", "ramp"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.wheel not in ("left", "right"):
            raise ValueError(f"unknown wheel {self.wheel!r}")
        if self.onset < 0:
            raise ValueError("fault onset must be >= 0")
        if not 0.0 < self.step_fraction <= 1.0:
            raise ValueError("step_fraction must be in (0, 1]")
        if self.ramp_rate <= 0 or self.floor <= 0:
            raise ValueError("ramp_rate and floor must be positive")


@dataclass(frozen=True)
class SpeedMeasurement:
    """Noisy forward-speed measurement."""

    z: float
    t: float

    def __post_init__(self) -> None:
        _require_finite("SpeedMeasurement", self.z, self.t)


def speed(u: ControlInput, params: RobotParams) -> float:
    """Forward speed V for the given wheel rates and radii."""
    return 0.5 * (params.r_right * u.omega_right + params.r_left * u.omega_left)


def yaw_rate(u: ControlInput, params: RobotParams) -> float:
    """Heading rate psidot for the given wheel rates and radii."""
    return (params.r_right * u.omega_right - params.r_left * u.omega_left) / (
        2.0 * params.b
    )


def derivatives(
    state: RobotState, u: ControlInput, params: RobotParams
) -> tuple[float, float, float]:
    """Kinematic state derivative (xdot, ydot, psidot)."""
    v = speed(u, params)
    return (v * math.cos(state.psi), v * math.sin(state.psi), yaw_rate(u, params))


def step_truth(
    state: RobotState, u: ControlInput, params: RobotParams, dt: float
) -> RobotState:
    """Advance the truth state by one fixed-step RK4 stage.

    Controls and parameters are held constant over the step (zero-order
    hold), for which RK4 is fourth-order accurate; straight-line motion is
    integrated exactly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")

    def f(s: np.ndarray) -> np.ndarray:
        v = speed(u, params)
        return np.array(
            [v * math.cos(s[2]), v * math.sin(s[2]), yaw_rate(u, params)]
        )

    s0 = state.as_array()
    k1 = f(s0)
    k2 = f(s0 + 0.5 * dt * k1)
    k3 = f(s0 + 0.5 * dt * k2)
    k4 = f(s0 + dt * k3)
    s1 = s0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RobotState(float(s1[0]), float(s1[1]), float(s1[2]))


def fault_radius(profile: FaultProfile, nominal: RobotParams, t: float) -> RobotParams:
    """Wheel radii at time ``t`` under a fault profile.

    Before the onset the nominal parameters are returned unchanged.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if profile.kind == "none" or t < profile.onset:
        return nominal
    nominal_r = nominal.r_left if profile.wheel == "left" else nominal.r_right
    if profile.kind == "step":
        r = profile.step_fraction * nominal_r
    else:
        elapsed = t if profile.absolute_time else t - profile.onset
        r = max(profile.floor, nominal_r - profile.ramp_rate * elapsed)
    if profile.wheel == "left":
        return replace(nominal, r_left=r)
    return replace(nominal, r_right=r)


def apply_faults(
    profiles: tuple[FaultProfile, ...], nominal: RobotParams, t: float
) -> RobotParams:
    """Apply several independent single-wheel profiles in sequence."""
    params = nominal
    for profile in profiles:
        params = fault_radius(profile, params, t)
    return params


def measure_speed(
    v: float, sigma: float, rng: np.random.Generator, t: float = 0.0
) -> SpeedMeasurement:
    """Speed measurement z = V + w with w ~ N(0, sigma^2).

    Deterministic for a fixed generator state, which is what makes whole
    simulation runs reproducible under a fixed seed.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    w = sigma * rng.standard_normal() if sigma > 0 else 0.0
    return SpeedMeasurement(z=v + w, t=t)
