"""EKF and UKF over the augmented state [x, y, psi, rR, rL].

The filters estimate the robot pose together with both wheel radii from a
scalar forward-speed measurement

    z = V + w,     V = (rR*wR + rL*wL) / 2,   w ~ N(0, R).

The process model is one explicit-Euler step of the generalized kinematics
evaluated at the belief's own radii; the radii themselves propagate as
constants (a random walk whose drift is absorbed by the process noise), or
through an optional caller-supplied radius map used by the multiple-model
bank to encode fault hypotheses.

Both filters are value-semantic: every predict/update returns a fresh
belief, so separate filter instances can run side by side on the same
measurement stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dynamics import ControlInput, SpeedMeasurement

STATE_DIM = 5
DEFAULT_KAPPA = 0.001

# Map applied to the two radius states during prediction.  Receives the
# radius pair and the step length, returns the propagated pair and the
# diagonal of its Jacobian.  None means "keep constant" (random walk).
RadiusUpdate = Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]]

_SYM_TOL = 1e-10
_PSD_TOL = -1e-10
_CHOL_JITTER = 1e-12


class FilterDivergence(RuntimeError):
    """Raised when a covariance loses positive semi-definiteness beyond
    repair or the innovation variance collapses."""


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a filter state (5-dimensional for the robot)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = mean.size
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError("belief needs an n-vector mean with an n x n covariance")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise FilterDivergence("non-finite belief")
        if np.max(np.abs(cov - cov.T)) > _SYM_TOL * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def radii(self) -> np.ndarray:
        return self.mean[3:5].copy()


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def _checked_belief(mean: np.ndarray, cov: np.ndarray) -> GaussianBelief:
    cov = _symmetrize(cov)
    scale = max(1.0, float(np.max(np.abs(cov))))
    if np.min(np.linalg.eigvalsh(cov)) < _PSD_TOL * scale:
        raise FilterDivergence("covariance lost positive semi-definiteness")
    return GaussianBelief(mean=mean, cov=cov)


@dataclass(frozen=True)
class NoiseConfig:
    """Process noise Q (5x5) and scalar measurement variance R."""

    q: np.ndarray
    r: float

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.shape != (STATE_DIM, STATE_DIM):
            raise ValueError("Q must be 5x5")
        if self.r <= 0:
            raise ValueError("R must be positive")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class InnovationRecord:
    """Scalar innovation nu with its predicted variance s."""

    nu: float
    s: float
    t: float = 0.0

    def __post_init__(self) -> None:
        if not self.s > 0:
            raise ValueError("innovation variance must be positive")


@dataclass(frozen=True)
class SigmaSet:
    """Unscented sample: 2n+1 points (rows) and their common weights."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if points.ndim != 2 or points.shape[0] != 2 * points.shape[1] + 1:
            raise ValueError("sigma set must hold 2n+1 points of dimension n")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("sigma weights must sum to 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)


def default_initial_belief(x0: float, y0: float, psi0: float) -> GaussianBelief:
    """Startup belief: known-ish pose, nominal 2 m radii, 0.5 m / 1 deg /
    0.5 m one-sigma uncertainties."""
    mean = np.array([x0, y0, psi0, 2.0, 2.0])
    cov = np.diag([0.5**2, 0.5**2, math.radians(1.0) ** 2, 0.5**2, 0.5**2])
    return GaussianBelief(mean=mean, cov=cov)


def default_noise(dt: float = 0.01) -> NoiseConfig:
    """Tuning used throughout the experiments (dt is the filter period)."""
    q = np.diag(
        [
            (5.0 * dt) ** 2,
            (5.0 * dt) ** 2,
            (0.1 * dt) ** 2,
            (2.0 * dt) ** 2,
            (2.0 * dt) ** 2,
        ]
    )
    return NoiseConfig(q=q, r=0.5**2)


def process_model(
    mean: np.ndarray,
    u: ControlInput,
    dt: float,
    b: float = 1.0,
    radius_update: RadiusUpdate | None = None,
) -> np.ndarray:
    """One Euler step of the filter process model."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y, psi, r_r, r_l = mean
    v = 0.5 * (r_r * u.omega_right + r_l * u.omega_left)
    om = (r_r * u.omega_right - r_l * u.omega_left) / (2.0 * b)
    out = np.array(
        [x + dt * v * math.cos(psi), y + dt * v * math.sin(psi), psi + dt * om, r_r, r_l]
    )
    if radius_update is not None:
        out[3:5], _ = radius_update(mean[3:5], dt)
    return out


def process_jacobian(
    mean: np.ndarray,
    u: ControlInput,
    dt: float,
    b: float = 1.0,
    radius_update: RadiusUpdate | None = None,
) -> np.ndarray:
    """Analytic Jacobian of :func:`process_model` at ``mean``."""
    _, _, psi, r_r, r_l = mean
    w_r, w_l = u.omega_right, u.omega_left
    v = 0.5 * (r_r * w_r + r_l * w_l)
    c, s = math.cos(psi), math.sin(psi)
    f = np.eye(STATE_DIM)
    f[0, 2] = -dt * v * s
    f[0, 3] = dt * 0.5 * w_r * c
    f[0, 4] = dt * 0.5 * w_l * c
    f[1, 2] = dt * v * c
    f[1, 3] = dt * 0.5 * w_r * s
    f[1, 4] = dt * 0.5 * w_l * s
    f[2, 3] = dt * w_r / (2.0 * b)
    f[2, 4] = -dt * w_l / (2.0 * b)
    if radius_update is not None:
        _, jac = radius_update(mean[3:5], dt)
        f[3, :] = 0.0
        f[4, :] = 0.0
        f[3, 3] = jac[0]
        f[4, 4] = jac[1]
    return f


def measurement_model(mean: np.ndarray, u: ControlInput) -> float:
    """Predicted speed from the belief's radii."""
    return 0.5 * (mean[3] * u.omega_right + mean[4] * u.omega_left)


def measurement_jacobian(u: ControlInput) -> np.ndarray:
    """Gradient of the predicted speed; only the radius states observe."""
    return np.array([0.0, 0.0, 0.0, 0.5 * u.omega_right, 0.5 * u.omega_left])


def ekf_predict(
    belief: GaussianBelief,
    u: ControlInput,
    noise: NoiseConfig,
    dt: float,
    b: float = 1.0,
    radius_update: RadiusUpdate | None = None,
) -> GaussianBelief:
    """EKF prediction: mean through the process model, covariance through
    its analytic Jacobian, process noise added."""
    mean = process_model(belief.mean, u, dt, b, radius_update)
    f = process_jacobian(belief.mean, u, dt, b, radius_update)
    cov = noise.q + f @ belief.cov @ f.T
    return _checked_belief(mean, cov)


def ekf_update(
    belief: GaussianBelief,
    z: SpeedMeasurement,
    u: ControlInput,
    noise: NoiseConfig,
) -> tuple[GaussianBelief, InnovationRecord]:
    """EKF measurement update (Joseph-form covariance for numerical safety)."""
    h = measurement_jacobian(u)
    z_hat = measurement_model(belief.mean, u)
    s = float(h @ belief.cov @ h + noise.r)
    if s <= 0:
        raise FilterDivergence("innovation variance collapsed")
    nu = z.z - z_hat
    k = belief.cov @ h / s
    mean = belief.mean + k * nu
    ikh = np.eye(STATE_DIM) - np.outer(k, h)
    cov = ikh @ belief.cov @ ikh.T + noise.r * np.outer(k, k)
    return _checked_belief(mean, cov), InnovationRecord(nu=nu, s=s, t=z.t)


def _cholesky_with_jitter(mat: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(mat + _CHOL_JITTER * np.eye(mat.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise FilterDivergence("covariance factorization failed") from exc


def sigma_points(belief: GaussianBelief, kappa: float = DEFAULT_KAPPA) -> SigmaSet:
    """Standard unscented transform sample of the belief.

    chi_0 is the mean; chi_(+-i) = mean +- column i of chol((n+kappa) P).
    """
    n = belief.mean.size
    root = _cholesky_with_jitter((n + kappa) * belief.cov)
    points = np.empty((2 * n + 1, n))
    points[0] = belief.mean
    points[1 : n + 1] = belief.mean + root.T
    points[n + 1 :] = belief.mean - root.T
    weights = np.full(2 * n + 1, 1.0 / (2.0 * (n + kappa)))
    weights[0] = kappa / (n + kappa)
    return SigmaSet(points=points, weights=weights)


def ukf_predict(
    belief: GaussianBelief,
    u: ControlInput,
    noise: NoiseConfig,
    dt: float,
    kappa: float = DEFAULT_KAPPA,
    b: float = 1.0,
    radius_update: RadiusUpdate | None = None,
) -> tuple[GaussianBelief, SigmaSet]:
    """UKF prediction.

    Every sigma point is pushed through the process model; the propagated
    set is returned so the update can reuse it without redrawing.
    """
    sigma = sigma_points(belief, kappa)
    propagated = np.stack(
        [process_model(p, u, dt, b, radius_update) for p in sigma.points]
    )
    w = sigma.weights
    mean = w @ propagated
    centered = propagated - mean
    cov = noise.q + (centered * w[:, None]).T @ centered
    return _checked_belief(mean, cov), SigmaSet(points=propagated, weights=w)


def ukf_update(
    belief: GaussianBelief,
    propagated: SigmaSet,
    z: SpeedMeasurement,
    u: ControlInput,
    noise: NoiseConfig,
) -> tuple[GaussianBelief, InnovationRecord]:
    """UKF measurement update from the propagated sigma set."""
    w = propagated.weights
    z_sigma = np.array([measurement_model(p, u) for p in propagated.points])
    z_hat = float(w @ z_sigma)
    dz = z_sigma - z_hat
    p_zz = float(w @ (dz * dz))
    p_xz = (propagated.points - belief.mean).T @ (w * dz)
    s = noise.r + p_zz
    if s <= 0:
        raise FilterDivergence("innovation variance collapsed")
    nu = z.z - z_hat
    k = p_xz / s
    mean = belief.mean + k * nu
    cov = belief.cov - s * np.outer(k, k)
    return _checked_belief(mean, cov), InnovationRecord(nu=nu, s=s, t=z.t)


def two_sigma_bounds(rec: InnovationRecord) -> tuple[float, float]:
    """Symmetric 2-sigma band for the innovation."""
    half = 2.0 * math.sqrt(rec.s)
    return (-half, half)
