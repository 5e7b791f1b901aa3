import math

import numpy as np
import pytest
from scipy import stats

from oracles import exclusion_probability_2d, grand_canonical_moments_2d
from rayleigh_gas.cluster import partition_function_series
from rayleigh_gas.core import CapExceeded, ContractError, ScalingParams, SystemState, exclusion_ok, maxwellian
from rayleigh_gas.ensemble import (GrandCanonicalSampler, Perturbation, compute_c0, cosine_perturbation,
                                   estimate_partition_function, gauss_shift_perturbation,
                                   initial_density_unnormalized, perturbation_preset, sample_initial_state,
                                   sample_tagged, uniform_perturbation, zero_perturbation)

UNIFORM = uniform_perturbation()


def test_density_of_empty_state_is_one():
    p = ScalingParams(0.1, lam=2.0)
    empty = SystemState(0.0, np.zeros((0, 2)), np.zeros((0, 2)), [])
    assert initial_density_unnormalized(empty, p, cosine_perturbation()) == 1.0


def test_density_single_background_particle():
    p = ScalingParams(0.1, lam=2.0)
    v = np.array([0.3, -1.2])
    s = SystemState(0.0, [[0.2, 0.7]], [v], [0])
    assert initial_density_unnormalized(s, p, cosine_perturbation()) == pytest.approx(p.mu * maxwellian(v, 1.0))


def test_density_single_tagged_particle():
    p = ScalingParams(0.1, lam=2.0)
    x, v = np.array([0.25, 0.7]), np.array([0.3, -1.2])
    s = SystemState(0.0, [x], [v], [1])
    expected = 2.0 * maxwellian(v, 1.0) * (1 + 0.5 * math.cos(2 * math.pi * 0.25))
    assert initial_density_unnormalized(s, p, cosine_perturbation()) == pytest.approx(expected)


def test_density_vanishes_on_overlap():
    p = ScalingParams(0.1)
    s = SystemState(0.0, [[0.5, 0.5], [0.55, 0.5]], [[0, 0], [1, 0]], [0, 0])
    assert initial_density_unnormalized(s, p, UNIFORM) == 0.0


def test_presets_and_bounds():
    rng = np.random.default_rng(0)
    x, v = rng.random((5000, 2)), 3 * rng.normal(size=(5000, 2))
    for name in ("uniform", "cosine", "gauss-shift"):
        phi = perturbation_preset(name)
        vals = phi(x, v)
        assert np.all(vals >= 0) and np.all(vals <= phi.bound)
    with pytest.raises(ContractError):
        perturbation_preset("nope")


def test_preset_masses_match_quadrature():
    for phi in (cosine_perturbation(), gauss_shift_perturbation(), uniform_perturbation()):
        closed = phi.mass(1.0, 2)
        generic = Perturbation("copy", phi.evaluator, phi.bound).mass(1.0, 2)
        assert closed == pytest.approx(generic, rel=1e-6)


def test_signed_perturbation_cannot_be_sampled():
    signed = Perturbation("signed", lambda x, v: np.cos(2 * np.pi * x[..., 0]), 1.0, signed=True)
    with pytest.raises(ContractError):
        GrandCanonicalSampler(ScalingParams(0.1), signed)


def test_samples_always_satisfy_exclusion():
    p = ScalingParams.from_mu(50, lam=5)
    rng = np.random.default_rng(2)
    for _ in range(200):
        s = sample_initial_state(p, cosine_perturbation(), rng)
        assert exclusion_ok(s.x, p.epsilon)


def test_no_tagged_particles_without_lambda():
    p = ScalingParams.from_mu(20)
    rng = np.random.default_rng(3)
    assert all(sample_initial_state(p, UNIFORM, rng).tags.sum() == 0 for _ in range(300))


def test_mean_count_matches_small_system_series():
    p = ScalingParams.decoupled(0.1, mu=1.0)
    sampler = GrandCanonicalSampler(p, UNIFORM)
    rng = np.random.default_rng(4)
    counts = np.array([sampler.sample(rng).n for _ in range(10_000)])
    z, mean0, _ = grand_canonical_moments_2d(1.0, 0.0, 0.1)
    assert abs(counts.mean() - mean0) <= 3 * counts.std(ddof=1) / math.sqrt(len(counts))
    est, se = sampler.partition_estimate()
    assert abs(est - z) <= 3 * se


def test_counts_are_poisson_when_exclusion_is_negligible():
    p = ScalingParams.decoupled(1e-9, mu=1.0)
    sampler = GrandCanonicalSampler(p, UNIFORM)
    rng = np.random.default_rng(5)
    empty = np.array([sampler.sample(rng).n == 0 for _ in range(100_000)])
    q = math.exp(-1)
    assert abs(empty.mean() - q) <= 3 * math.sqrt(q * (1 - q) / len(empty))


def test_tagged_counts_match_small_system_series():
    p = ScalingParams.decoupled(0.1, mu=1.0, lam=0.5)
    sampler = GrandCanonicalSampler(p, UNIFORM)
    rng = np.random.default_rng(6)
    tagged = np.array([int(sampler.sample(rng).tags.sum()) for _ in range(20_000)])
    _, _, mean1 = grand_canonical_moments_2d(1.0, 0.5, 0.1)
    assert abs(tagged.mean() - mean1) <= 3 * tagged.std(ddof=1) / math.sqrt(len(tagged))


def test_tagged_particles_follow_perturbation_profile():
    p = ScalingParams.decoupled(1e-9, mu=1.0, lam=0.9)
    rng = np.random.default_rng(7)
    sampler = GrandCanonicalSampler(p, cosine_perturbation())
    xs = np.concatenate([s.x[s.tags == 1, 0] for s in (sampler.sample(rng) for _ in range(20_000))])
    # density 1 + cos(2 pi x) / 2 has CDF x + sin(2 pi x) / (4 pi)
    cdf = lambda u: u + np.sin(2 * np.pi * u) / (4 * np.pi)  # noqa: E731
    assert stats.kstest(xs, cdf).pvalue > 0.001


def test_background_order_carries_no_information():
    p = ScalingParams.from_mu(30)
    rng = np.random.default_rng(8)
    first, last = [], []
    for _ in range(1500):
        s = sample_initial_state(p, UNIFORM, rng)
        if s.n >= 4:
            first.append(np.linalg.norm(s.v[0]) + np.hypot(*(s.x[0] - s.x[1])))
            last.append(np.linalg.norm(s.v[-1]) + np.hypot(*(s.x[-1] - s.x[-2])))
    assert stats.ks_2samp(first, last).pvalue > 0.001


def test_rejection_cap_is_reported():
    p = ScalingParams.decoupled(0.2, mu=60.0)
    with pytest.raises(CapExceeded) as info:
        GrandCanonicalSampler(p, UNIFORM, max_rounds=50).sample(np.random.default_rng(0))
    assert info.value.module == "ensemble"


def test_proposal_mass_cap():
    with pytest.raises(CapExceeded):
        GrandCanonicalSampler(ScalingParams.decoupled(1e-6, mu=2e4), UNIFORM)


def test_partition_function_without_exclusion():
    p = ScalingParams.decoupled(0.0, mu=1.5, lam=0.7)
    z, se = estimate_partition_function(p, UNIFORM, 100, np.random.default_rng(9))
    assert z == pytest.approx(math.exp(2.2), rel=1e-12) and se == 0.0


def test_partition_function_matches_series_oracles():
    p = ScalingParams.decoupled(0.1, mu=1.0)
    z, se = estimate_partition_function(p, UNIFORM, 200_000, np.random.default_rng(10))
    exact, _, _ = grand_canonical_moments_2d(1.0, 0.0, 0.1)
    series, series_se = partition_function_series(p, UNIFORM, 8, 50_000, np.random.default_rng(11))
    assert abs(z - exact) <= 3 * se
    assert abs(z - series) <= 3 * math.hypot(se, series_se) + 1e-5


def test_zero_perturbation_matches_lambda_zero():
    with_tags = ScalingParams.decoupled(0.1, mu=1.0, lam=0.8)
    without = ScalingParams.decoupled(0.1, mu=1.0)
    a = estimate_partition_function(with_tags, zero_perturbation(), 5000, np.random.default_rng(12))
    b = estimate_partition_function(without, zero_perturbation(), 5000, np.random.default_rng(12))
    assert a == b


def test_partition_function_needs_samples():
    with pytest.raises(ContractError):
        estimate_partition_function(ScalingParams(0.1), UNIFORM, 1, np.random.default_rng(0))


def test_acceptance_bookkeeping_matches_partition_estimate():
    p = ScalingParams.decoupled(0.08, mu=2.0, lam=1.0)
    phi = cosine_perturbation()
    sampler = GrandCanonicalSampler(p, phi)
    rng = np.random.default_rng(13)
    for _ in range(20_000):
        sampler.sample(rng)
    a, sa = sampler.partition_estimate()
    b, sb = estimate_partition_function(p, phi, 100_000, np.random.default_rng(14))
    assert abs(a - b) <= 3 * math.hypot(sa, sb)


def test_exclusion_probability_oracle_against_brute_force():
    from rayleigh_gas.core import exclusion_ok_batch
    x = np.random.default_rng(15).random((200_000, 4, 2))
    hits = exclusion_ok_batch(x, 0.1)
    assert abs(hits.mean() - exclusion_probability_2d(4, 0.1)) <= 3 * hits.std() / math.sqrt(len(hits)) + 1e-4


def test_sample_tagged_matches_density():
    x, v = sample_tagged(gauss_shift_perturbation(), 1.0, 2, 40_000, np.random.default_rng(16))
    # mean of v_0 under M (1 + exp(-|v - e_0|^2 / 2)) / m, by Gaussian integration
    mass = gauss_shift_perturbation().mass(1.0, 2)
    bump = mass - 1.0
    expected = bump * 0.5 / mass
    assert abs(v[:, 0].mean() - expected) <= 4 * v[:, 0].std() / math.sqrt(len(v))


def test_c0_zero_perturbation():
    c0 = compute_c0(zero_perturbation(), 1.0, 2)
    assert c0.value == pytest.approx(1 / (2 * math.pi), abs=1e-6)


def test_c0_uniform_terms_against_double_grid():
    phi = uniform_perturbation()
    coarse = compute_c0(phi, 1.0, 2)
    fine = compute_c0(phi, 1.0, 2, points=401)
    np.testing.assert_allclose(coarse.terms, fine.terms, atol=1e-6)
    # sup of M_beta / sqrt(M_{beta/2}) sits at v = 0
    assert coarse.terms[2] == pytest.approx((1 / (2 * math.pi)) / math.sqrt(1 / (4 * math.pi)), abs=1e-6)
    assert coarse.value == max(coarse.terms)


def test_c0_positive_homogeneity():
    base = cosine_perturbation()
    doubled = Perturbation("double", lambda x, v: 2 * base(x, v), 2 * base.bound, grid_fn=base.grid_fn)
    a, b = compute_c0(base, 1.0, 2), compute_c0(doubled, 1.0, 2)
    assert a.value <= b.value <= 2 * a.value + 1e-15
    assert b.terms[0] == a.terms[0]
