import math

import numpy as np
import pytest

from ftcsim.dynamics import ControlInput, SpeedMeasurement
from ftcsim.estimators import (
    GaussianBelief,
    InnovationRecord,
    default_initial_belief,
    default_noise,
    ekf_predict,
    ekf_update,
)
from ftcsim.imm import (
    DegenerateBank,
    ImmBank,
    ModeSpec,
    combine,
    five_mode_bank,
    four_mode_bank,
    imm_cycle,
    mix_initial_conditions,
    mixing_probabilities,
    mode_likelihood,
    mode_probability_update,
)

P4 = np.full((4, 4), 0.01) + np.eye(4) * 0.96


def test_mixing_uniform_mu():
    mix = mixing_probabilities(np.full(4, 0.25), P4)
    assert np.allclose(mix.cbar, 0.25)
    assert np.allclose(mix.mu_cond, P4)
    assert np.allclose(mix.mu_cond.sum(axis=0), 1.0)


def test_mixing_identity_transitions():
    mu = np.array([0.1, 0.2, 0.3, 0.4])
    mix = mixing_probabilities(mu, np.eye(4))
    assert np.allclose(mix.cbar, mu)
    assert np.allclose(mix.mu_cond, np.eye(4))


def test_mixing_concentrated_mu():
    mu = np.array([1.0, 0.0, 0.0, 0.0])
    mix = mixing_probabilities(mu, P4)
    assert np.allclose(mix.cbar, [0.97, 0.01, 0.01, 0.01])


def test_mix_initial_conditions_identical_beliefs():
    belief = default_initial_belief(0, 0, 0)
    means = np.tile(belief.mean, (4, 1))
    covs = np.tile(belief.cov, (4, 1, 1))
    mix = mixing_probabilities(np.full(4, 0.25), P4)
    mixed = mix_initial_conditions(means, covs, mix.mu_cond)
    for b in mixed:
        assert np.allclose(b.mean, belief.mean)
        assert np.allclose(b.cov, belief.cov, atol=1e-12)


def test_mix_initial_conditions_two_mode_hand_case():
    m1 = np.zeros(5)
    m2 = np.ones(5)
    p = np.eye(5) * 0.3
    means = np.stack([m1, m2])
    covs = np.stack([p, p])
    mu_cond = np.full((2, 2), 0.5)
    mixed = mix_initial_conditions(means, covs, mu_cond)
    d = (m1 - m2).reshape(-1, 1)
    expected = p + 0.25 * (d @ d.T)
    for b in mixed:
        assert np.allclose(b.mean, 0.5 * (m1 + m2))
        assert np.allclose(b.cov, expected, atol=1e-12)


def test_mixed_covariance_dominates_smallest_mode():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r = 3
        means = rng.normal(size=(r, 5))
        covs = []
        for _ in range(r):
            a = rng.normal(size=(5, 5)) * 0.4
            covs.append(a @ a.T + 0.1 * np.eye(5))
        covs = np.stack(covs)
        mu = rng.dirichlet(np.ones(r))
        p = np.full((r, r), 0.05) + np.eye(r) * 0.85
        mix = mixing_probabilities(mu, p)
        mixed = mix_initial_conditions(means, covs, mix.mu_cond)
        min_trace = min(np.trace(c) for c in covs)
        for b in mixed:
            assert np.trace(b.cov) >= min_trace - 1e-9
            assert np.min(np.linalg.eigvalsh(b.cov)) >= -1e-10


def test_mode_likelihood_values():
    assert mode_likelihood(InnovationRecord(nu=0.0, s=1.0)) == pytest.approx(
        1.0 / math.sqrt(2 * math.pi), rel=1e-6
    )
    assert mode_likelihood(InnovationRecord(nu=0.0, s=0.25)) == pytest.approx(
        0.797885, rel=1e-5
    )
    lams = [mode_likelihood(InnovationRecord(nu=nu, s=0.5)) for nu in (0.0, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(lams, lams[1:]))


def test_mode_probability_update_examples():
    mu = mode_probability_update(np.array([2.0, 1, 1, 1]), np.full(4, 0.25))
    assert np.allclose(mu, [0.4, 0.2, 0.2, 0.2])
    cbar = np.array([0.4, 0.3, 0.2, 0.1])
    mu = mode_probability_update(np.ones(4), cbar)
    assert np.allclose(mu, cbar)
    mu = mode_probability_update(np.array([1.0, 0, 0, 0]), np.full(4, 0.25))
    assert np.allclose(mu, [1, 0, 0, 0])


def test_mode_probability_update_degenerate():
    with pytest.raises(DegenerateBank):
        mode_probability_update(np.zeros(4), np.full(4, 0.25))


def test_combine_single_surviving_mode():
    rng = np.random.default_rng(2)
    means = rng.normal(size=(3, 5))
    covs = np.stack([np.eye(5) * s for s in (1.0, 2.0, 3.0)])
    out = combine(means, covs, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(out.mean, means[0])
    assert np.allclose(out.cov, covs[0])


def test_combine_two_mode_spread():
    m1, m2 = np.zeros(5), np.ones(5)
    p = np.eye(5) * 0.2
    out = combine(np.stack([m1, m2]), np.stack([p, p]), np.array([0.5, 0.5]))
    d = (m1 - m2).reshape(-1, 1)
    assert np.allclose(out.cov, p + 0.25 * d @ d.T, atol=1e-12)


def test_combine_mean_in_convex_hull():
    rng = np.random.default_rng(3)
    for _ in range(100):
        means = rng.normal(size=(4, 5))
        covs = np.tile(np.eye(5), (4, 1, 1))
        mu = rng.dirichlet(np.ones(4))
        out = combine(means, covs, mu)
        assert np.all(out.mean <= means.max(axis=0) + 1e-12)
        assert np.all(out.mean >= means.min(axis=0) - 1e-12)


def _nominal_bank(n_modes=4):
    base = default_initial_belief(0, 0, 0)
    specs = tuple(
        ModeSpec(label=f"m{j}", initial_mean=base.mean, process_variant="nominal")
        for j in range(n_modes)
    )
    beliefs = tuple(GaussianBelief(base.mean.copy(), base.cov.copy()) for _ in range(n_modes))
    p = np.full((n_modes, n_modes), 0.01) + np.eye(n_modes) * (1 - 0.01 * n_modes)
    return ImmBank(specs=specs, beliefs=beliefs, mu=np.full(n_modes, 1 / n_modes), p=p)


def test_imm_cycle_degenerate_bank_equals_single_filter():
    noise = default_noise()
    bank = _nominal_bank()
    belief = default_initial_belief(0, 0, 0)
    u = ControlInput(5, 4)
    rng = np.random.default_rng(4)
    for k in range(50):
        z = SpeedMeasurement(z=9.0 + rng.normal(0, 0.5), t=0.01 * k)
        bank, combined, _ = imm_cycle(bank, z, u, noise, 0.01, filter_kind="ekf")
        pred = ekf_predict(belief, u, noise, 0.01)
        belief, _ = ekf_update(pred, z, u, noise)
        assert np.allclose(combined.mean, belief.mean, atol=1e-9)
        assert np.allclose(combined.cov, belief.cov, atol=1e-9)


def test_imm_no_mixing_leakage_with_identity_transitions():
    noise = default_noise()
    base = default_initial_belief(0, 0, 0)
    specs = tuple(
        ModeSpec(label=f"m{j}", initial_mean=base.mean, process_variant="nominal")
        for j in range(2)
    )
    # second mode starts somewhere else entirely; with p = I and mu = [1, 0]
    # it must never contaminate the output
    other = GaussianBelief(base.mean + np.array([5, 5, 0.3, 0.2, -0.4]), base.cov * 2)
    bank = ImmBank(specs=specs, beliefs=(base, other), mu=np.array([1.0, 0.0]), p=np.eye(2))
    belief = base
    u = ControlInput(5, 5)
    rng = np.random.default_rng(5)
    for k in range(30):
        z = SpeedMeasurement(z=10.0 + rng.normal(0, 0.5), t=0.01 * k)
        bank, combined, _ = imm_cycle(bank, z, u, noise, 0.01, filter_kind="ukf")
        assert bank.mu[0] == pytest.approx(1.0, abs=1e-12)
        from ftcsim.estimators import ukf_predict, ukf_update

        pred, pts = ukf_predict(belief, u, noise, 0.01)
        belief, _ = ukf_update(pred, pts, z, u, noise)
        assert np.allclose(combined.mean, belief.mean, atol=1e-9)


def test_mu_stays_probability_vector():
    noise = default_noise()
    bank = four_mode_bank(0, 0, 0)
    rng = np.random.default_rng(6)
    u = ControlInput(5, 5)
    for k in range(10_000):
        z = SpeedMeasurement(z=10.0 + rng.normal(0, 0.5), t=0.01 * k)
        bank, _, _ = imm_cycle(bank, z, u, noise, 0.01, filter_kind="ekf")
        assert np.all(bank.mu >= -1e-12)
        assert bank.mu.sum() == pytest.approx(1.0, abs=1e-9)


def _scalar_kf_predict(m, p, a, q):
    return a * m, a * a * p + q


def _scalar_kf_update(m, p, z, h, r):
    s = h * p * h + r
    nu = z - h * m
    k = p * h / s
    m1 = m + k * nu
    p1 = (1 - k * h) ** 2 * p + k * k * r
    return m1, p1, nu, s


def _reference_scalar_imm(mu0, p_trans, modes, z_seq, h, r):
    """Straight-from-the-equations scalar IMM, coded independently of the
    package implementation."""
    r_modes = len(modes)
    mus = [np.array(mu0, dtype=float)]
    means = [np.array([m0 for (a, q, m0, p0) in modes], dtype=float)]
    covs = [np.array([p0 for (a, q, m0, p0) in modes], dtype=float)]
    out_means = []
    for z in z_seq:
        mu = mus[-1]
        m_prev, p_prev = means[-1], covs[-1]
        cbar = np.array(
            [sum(p_trans[i][j] * mu[i] for i in range(r_modes)) for j in range(r_modes)]
        )
        mu_ij = np.array(
            [
                [p_trans[i][j] * mu[i] / cbar[j] for j in range(r_modes)]
                for i in range(r_modes)
            ]
        )
        m0j = np.array(
            [sum(mu_ij[i][j] * m_prev[i] for i in range(r_modes)) for j in range(r_modes)]
        )
        p0j = np.array(
            [
                sum(
                    mu_ij[i][j] * (p_prev[i] + (m_prev[i] - m0j[j]) ** 2)
                    for i in range(r_modes)
                )
                for j in range(r_modes)
            ]
        )
        m_new = np.zeros(r_modes)
        p_new = np.zeros(r_modes)
        lam = np.zeros(r_modes)
        for j, (a, q, _, _) in enumerate(modes):
            mp, pp = a * m0j[j], a * a * p0j[j] + q
            s = h * pp * h + r
            nu = z - h * mp
            k = pp * h / s
            m_new[j] = mp + k * nu
            p_new[j] = (1 - k * h) ** 2 * pp + k * k * r
            lam[j] = math.exp(-0.5 * nu * nu / s) / math.sqrt(2 * math.pi * s)
        c = float(sum(lam[j] * cbar[j] for j in range(r_modes)))
        mu_new = lam * cbar / c
        mus.append(mu_new)
        means.append(m_new)
        covs.append(p_new)
        out_means.append(float(sum(mu_new[j] * m_new[j] for j in range(r_modes))))
    return out_means


def test_imm_matches_independent_scalar_implementation():
    # Two scalar modes with different dynamics, driven by the same data; the
    # package's mixing/likelihood/combination algebra around hand-rolled
    # scalar Kalman filters must match the independent implementation.
    modes = [(1.0, 0.01, 0.0, 1.0), (0.9, 0.04, 2.0, 1.0)]
    p_trans = [[0.95, 0.05], [0.10, 0.90]]
    h, r = 1.0, 0.5
    rng = np.random.default_rng(7)
    z_seq = list(rng.normal(1.0, 1.0, size=100))

    reference = _reference_scalar_imm([0.6, 0.4], p_trans, modes, z_seq, h, r)

    mu = np.array([0.6, 0.4])
    means = np.array([[0.0], [2.0]])
    covs = np.array([[[1.0]], [[1.0]]])
    p_mat = np.array(p_trans)
    outputs = []
    for z in z_seq:
        mix = mixing_probabilities(mu, p_mat)
        mixed = mix_initial_conditions(means, covs, mix.mu_cond)
        lam = np.zeros(2)
        new_means = np.zeros((2, 1))
        new_covs = np.zeros((2, 1, 1))
        for j, (a, q, _, _) in enumerate(modes):
            mp, pp = _scalar_kf_predict(float(mixed[j].mean[0]), float(mixed[j].cov[0, 0]), a, q)
            m1, p1, nu, s = _scalar_kf_update(mp, pp, z, h, r)
            new_means[j, 0] = m1
            new_covs[j, 0, 0] = p1
            lam[j] = mode_likelihood(InnovationRecord(nu=nu, s=s))
        mu = mode_probability_update(lam, mix.cbar)
        means, covs = new_means, new_covs
        outputs.append(float(combine(means, covs, mu).mean[0]))

    assert np.allclose(outputs, reference, atol=1e-12)


def test_four_mode_bank_structure():
    bank = four_mode_bank(1.0, 2.0, 0.3)
    assert bank.n_modes == 4
    hyps = [tuple(s.initial_mean[3:5]) for s in bank.specs]
    assert hyps == [(2.0, 2.0), (1.0, 2.0), (2.0, 1.0), (1.0, 1.0)]
    assert np.allclose(bank.mu, 0.25)
    assert np.allclose(np.diag(bank.p), 0.97)
    assert np.allclose(bank.p.sum(axis=1), 1.0)


def test_five_mode_bank_structure():
    bank = five_mode_bank(0.0, 0.0, 0.0)
    assert bank.n_modes == 5
    assert bank.specs[4].process_variant == "ramp_left"
    assert tuple(bank.specs[4].initial_mean[3:5]) == (2.0, 2.0)
    assert np.allclose(bank.mu, 0.2)
    assert np.allclose(np.diag(bank.p), 0.96)
    assert np.allclose(bank.p.sum(axis=1), 1.0)


def test_ramp_left_variant_descends_and_clamps():
    bank = five_mode_bank(0.0, 0.0, 0.0)
    update = bank.specs[4].radius_update()
    r, jac = update(np.array([2.0, 2.0]), 0.01)
    assert r[0] == 2.0 and r[1] == pytest.approx(2.0 - 0.001)
    assert jac[1] == 1.0
    r, jac = update(np.array([2.0, 0.1005]), 0.01)
    assert r[1] == pytest.approx(0.1)
    assert jac[1] == 0.0
