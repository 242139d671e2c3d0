"""Interacting-multiple-model combinator over EKF or UKF mode filters.

Each mode carries a fault hypothesis about the wheel radii.  One filter runs
per mode; every cycle the mode beliefs are re-mixed through a Markov
transition matrix, filtered against the shared speed measurement, scored by
their innovation likelihoods, and combined into a single moment-matched
Gaussian output.

Mode hypotheses enter through the per-mode radius process:

  'nominal'   : radii follow the shared random walk (same model as a single
                filter; used for degenerate/diagnostic banks).
  'hold'      : the prediction re-anchors the radii at the hypothesis values,
                so a mode keeps asserting e.g. "left wheel at 50%" and its
                likelihood collapses whenever the data disagree.  This is
                what gives the bank persistent mode discrimination.
  'ramp_left' : right radius anchored nominal, left radius descending at the
                gradual-puncture rate (clamped at the floor), i.e. the
                hypothesis that a slow left puncture is in progress.

The mixing/likelihood/combination algebra below is model-agnostic and works
on plain arrays, which also makes it directly checkable against hand-rolled
reference implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ControlInput, RAMP_FLOOR, RAMP_RATE, SpeedMeasurement
from .estimators import (
    FilterDivergence,
    GaussianBelief,
    InnovationRecord,
    NoiseConfig,
    RadiusUpdate,
    STATE_DIM,
    default_initial_belief,
    ekf_predict,
    ekf_update,
    ukf_predict,
    ukf_update,
)

LIKELIHOOD_FLOOR = 1e-300
PROB_TOL = 1e-12


class DegenerateBank(RuntimeError):
    """The bank's probabilities collapsed (no mode explains the data)."""


@dataclass(frozen=True)
class ModeSpec:
    """One fault hypothesis: a label, its initial mean and its radius process."""

    label: str
    initial_mean: np.ndarray
    process_variant: str = "hold"

    def __post_init__(self) -> None:
        mean = np.asarray(self.initial_mean, dtype=float)
        if mean.shape != (STATE_DIM,):
            raise ValueError("initial mean must be a 5-vector")
        if mean[3] <= 0 or mean[4] <= 0:
            raise ValueError("hypothesis radii must be positive")
        if self.process_variant not in ("nominal", "hold", "ramp_left"):
            raise ValueError(f"unknown process variant {self.process_variant!r}")
        object.__setattr__(self, "initial_mean", mean)

    def radius_update(self) -> RadiusUpdate | None:
        if self.process_variant == "nominal":
            return None
        r_hyp = self.initial_mean[3:5]
        if self.process_variant == "hold":

            def hold(r: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
                return r_hyp.copy(), np.zeros(2)

            return hold

        def ramp_left(r: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
            r_l = r[1] - RAMP_RATE * dt
            clamped = r_l <= RAMP_FLOOR
            return (
                np.array([r_hyp[0], max(RAMP_FLOOR, r_l)]),
                np.array([0.0, 0.0 if clamped else 1.0]),
            )

        return ramp_left


@dataclass(frozen=True)
class ImmBank:
    """Mode specs with their current beliefs, probabilities and transitions."""

    specs: tuple[ModeSpec, ...]
    beliefs: tuple[GaussianBelief, ...]
    mu: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=float)
        p = np.asarray(self.p, dtype=float)
        r = len(self.specs)
        if len(self.beliefs) != r or mu.shape != (r,) or p.shape != (r, r):
            raise ValueError("inconsistent bank dimensions")
        if np.any(mu < -PROB_TOL) or abs(mu.sum() - 1.0) > PROB_TOL:
            raise ValueError("mode probabilities must form a distribution")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_TOL) or np.any(p < 0):
            raise ValueError("each row of the transition matrix must sum to 1")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p", p)

    @property
    def n_modes(self) -> int:
        return len(self.specs)

    def combined(self) -> GaussianBelief:
        means = np.stack([b.mean for b in self.beliefs])
        covs = np.stack([b.cov for b in self.beliefs])
        return combine(means, covs, self.mu)


@dataclass(frozen=True)
class MixResult:
    """Conditional mixing matrix mu_cond[i, j] = P(was i | now j) and the
    per-mode normalizers cbar."""

    mu_cond: np.ndarray
    cbar: np.ndarray


def mixing_probabilities(mu: np.ndarray, p: np.ndarray) -> MixResult:
    """Step 1: cbar_j = sum_i p_ij mu_i and mu_cond[i,j] = p_ij mu_i / cbar_j.

    A mode that is unreachable this cycle (cbar_j = 0, e.g. under an identity
    transition matrix with a concentrated mu) keeps its own belief: its
    column falls back to the identity so the zero-probability mode never
    contaminates, or is contaminated by, the rest of the bank.
    """
    mu = np.asarray(mu, dtype=float)
    p = np.asarray(p, dtype=float)
    cbar = p.T @ mu
    if np.all(cbar <= 0):
        raise DegenerateBank("no mode has any prior probability of being reached")
    safe = np.where(cbar > 0, cbar, 1.0)
    mu_cond = (p * mu[:, None]) / safe[None, :]
    for j in np.flatnonzero(cbar <= 0):
        mu_cond[:, j] = 0.0
        mu_cond[j, j] = 1.0
    return MixResult(mu_cond=mu_cond, cbar=cbar)


def mix_initial_conditions(
    means: np.ndarray, covs: np.ndarray, mu_cond: np.ndarray
) -> list[GaussianBelief]:
    """Step 2: per-mode mixed mean and covariance (with spread-of-means term)."""
    r = mu_cond.shape[0]
    mixed = []
    for j in range(r):
        w = mu_cond[:, j]
        mean = w @ means
        cov = np.zeros_like(covs[0])
        for i in range(r):
            d = means[i] - mean
            cov += w[i] * (covs[i] + np.outer(d, d))
        mixed.append(GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T)))
    return mixed


def mode_likelihood(rec: InnovationRecord) -> float:
    """Step 3 side product: Gaussian density of the innovation, floored so a
    badly mismatched mode cannot zero out the whole bank."""
    if rec.s <= 0:
        raise ValueError("innovation variance must be positive")
    lam = math.exp(-0.5 * rec.nu**2 / rec.s) / math.sqrt(2.0 * math.pi * rec.s)
    return max(lam, LIKELIHOOD_FLOOR)


def mode_probability_update(lambdas: np.ndarray, cbar: np.ndarray) -> np.ndarray:
    """Step 4: mu_j proportional to Lambda_j cbar_j."""
    lambdas = np.asarray(lambdas, dtype=float)
    raw = lambdas * np.asarray(cbar, dtype=float)
    total = raw.sum()
    if total <= 0:
        raise DegenerateBank("all mode likelihoods vanished")
    return raw / total


def combine(means: np.ndarray, covs: np.ndarray, mu: np.ndarray) -> GaussianBelief:
    """Step 5: moment-matched Gaussian over the mode-conditioned estimates."""
    mu = np.asarray(mu, dtype=float)
    mean = mu @ means
    cov = np.zeros_like(covs[0])
    for j in range(mu.size):
        d = means[j] - mean
        cov += mu[j] * (covs[j] + np.outer(d, d))
    return GaussianBelief(mean=mean, cov=0.5 * (cov + cov.T))


def imm_cycle(
    bank: ImmBank,
    z: SpeedMeasurement,
    u: ControlInput,
    noise: NoiseConfig,
    dt: float,
    filter_kind: str = "ukf",
    kappa: float = 0.001,
    b: float = 1.0,
) -> tuple[ImmBank, GaussianBelief, list[InnovationRecord]]:
    """Run one full mix / filter / re-weight / combine cycle.

    A mode whose filter diverges numerically gets zero probability for this
    cycle and is re-seeded from the combined output, so one broken hypothesis
    does not take the bank down.
    """
    if filter_kind not in ("ekf", "ukf"):
        raise ValueError(f"unknown filter kind {filter_kind!r}")
    mix = mixing_probabilities(bank.mu, bank.p)
    means = np.stack([bel.mean for bel in bank.beliefs])
    covs = np.stack([bel.cov for bel in bank.beliefs])
    mixed = mix_initial_conditions(means, covs, mix.mu_cond)

    r = bank.n_modes
    new_beliefs: list[GaussianBelief] = []
    records: list[InnovationRecord] = []
    lambdas = np.zeros(r)
    diverged: list[int] = []
    for j, (spec, bel0) in enumerate(zip(bank.specs, mixed)):
        rad = spec.radius_update()
        try:
            if filter_kind == "ekf":
                pred = ekf_predict(bel0, u, noise, dt, b, rad)
                post, rec = ekf_update(pred, z, u, noise)
            else:
                pred, pts = ukf_predict(bel0, u, noise, dt, kappa, b, rad)
                post, rec = ukf_update(pred, pts, z, u, noise)
            lambdas[j] = mode_likelihood(rec)
        except FilterDivergence:
            diverged.append(j)
            post = bel0
            rec = InnovationRecord(nu=0.0, s=noise.r, t=z.t)
        new_beliefs.append(post)
        records.append(rec)

    mu = mode_probability_update(lambdas, mix.cbar) if np.any(lambdas > 0) else None
    if mu is None:
        raise DegenerateBank("every mode filter diverged")

    out_means = np.stack([bel.mean for bel in new_beliefs])
    out_covs = np.stack([bel.cov for bel in new_beliefs])
    combined = combine(out_means, out_covs, mu)
    for j in diverged:
        new_beliefs[j] = combined
    new_bank = replace(bank, beliefs=tuple(new_beliefs), mu=mu)
    return new_bank, combined, records


def four_mode_bank(x0: float, y0: float, psi0: float) -> ImmBank:
    """The standard puncture-hypothesis bank: nominal, right 50%, left 50%,
    both 50%; uniform initial probabilities; sticky transitions."""
    base = default_initial_belief(x0, y0, psi0)
    radii = [(2.0, 2.0), (1.0, 2.0), (2.0, 1.0), (1.0, 1.0)]
    labels = ["no-fault", "right-50", "left-50", "both-50"]
    specs = []
    beliefs = []
    for label, (r_r, r_l) in zip(labels, radii):
        mean = base.mean.copy()
        mean[3], mean[4] = r_r, r_l
        specs.append(ModeSpec(label=label, initial_mean=mean, process_variant="hold"))
        beliefs.append(GaussianBelief(mean=mean, cov=base.cov.copy()))
    mu = np.full(4, 0.25)
    p = np.full((4, 4), 0.01) + np.eye(4) * 0.96
    return ImmBank(specs=tuple(specs), beliefs=tuple(beliefs), mu=mu, p=p)


def five_mode_bank(x0: float, y0: float, psi0: float) -> ImmBank:
    """Four puncture hypotheses plus a gradual-left-puncture hypothesis."""
    base4 = four_mode_bank(x0, y0, psi0)
    mean5 = default_initial_belief(x0, y0, psi0).mean
    spec5 = ModeSpec(label="left-ramp", initial_mean=mean5, process_variant="ramp_left")
    belief5 = default_initial_belief(x0, y0, psi0)
    specs = base4.specs + (spec5,)
    beliefs = base4.beliefs + (belief5,)
    mu = np.full(5, 0.2)
    p = np.full((5, 5), 0.01) + np.eye(5) * 0.95
    return ImmBank(specs=specs, beliefs=beliefs, mu=mu, p=p)
