import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from rayleigh_gas.core import ContractError, ScalingParams, SystemState, maxwellian
from rayleigh_gas.ensemble import GrandCanonicalSampler, cosine_perturbation, uniform_perturbation
from rayleigh_gas.kinetic import VelocityGrid, solve_rb_grid
from rayleigh_gas.stats import (EnsembleReport, LLNConfig, Observable, ObservableSummary, PhaseBins,
                                bin_counts, bin_indicator, bonferroni_threshold, bonferroni_verdict,
                                cos_observable, empirical_measure, energy_observable, estimate_correlation,
                                histogram_estimate, initial_proximity_bound, kinetic_targets, linear_slope,
                                lln_experiment, maxwellian_bin_profile, observable_preset, one_observable,
                                pair_distance_counts, recollision_gate, run_members, tag_observable,
                                tagged_density_gap, tagged_empirical_measure, trend_is_decreasing, tuple_sum,
                                variance_ratio)

STATE = SystemState(0.0, [[0.1, 0.2], [0.6, 0.7], [0.3, 0.9]], [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]], [0, 1, 1])


def random_state(rng, n=12):
    return SystemState(0.0, rng.random((n, 2)), rng.normal(size=(n, 2)), rng.integers(0, 2, n))


def test_empirical_measure_examples():
    assert empirical_measure(STATE, one_observable(), 10.0) == pytest.approx(0.3)
    assert tagged_empirical_measure(STATE, one_observable(), 4.0) == pytest.approx(0.5)
    assert tagged_empirical_measure(STATE, energy_observable(), 1.0) == pytest.approx(2.0 + 1.0)
    empty = SystemState(0.0, np.zeros((0, 2)), np.zeros((0, 2)), [])
    assert empirical_measure(empty, one_observable(), 3.0) == 0.0
    with pytest.raises(ContractError):
        tagged_empirical_measure(STATE, one_observable(), 0.0)


@settings(max_examples=30)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_empirical_measure_is_linear(a, b):
    H = cos_observable().scaled(a) + tag_observable().scaled(b)
    lhs = empirical_measure(STATE, H, 7.0)
    rhs = a * empirical_measure(STATE, cos_observable(), 7.0) + b * empirical_measure(STATE, tag_observable(), 7.0)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_observable_presets():
    assert observable_preset("cos").name == "cos1"
    assert observable_preset("energy").bound == pytest.approx(18.0)
    with pytest.raises(ContractError):
        observable_preset("nope")


def test_observable_summary_standard_error():
    vals = np.arange(10.0)
    s = ObservableSummary.from_values(vals)
    assert s.mean == 4.5
    assert s.variance == pytest.approx(np.var(vals, ddof=1))
    assert s.std_error == pytest.approx(math.sqrt(s.variance / 10))


def test_ensemble_report_json(tmp_path):
    rep = EnsembleReport.from_values(0.5, {"cos1": [1.0, 2.0, 4.0]}, {"master": 3})
    data = json.loads(rep.to_json(tmp_path / "r.json").read_text())
    assert data["members"] == 3 and data["seeds"] == {"master": 3}
    assert data["estimates"]["cos1"]["mean"] == pytest.approx(7 / 3)
    with pytest.raises(ContractError):
        EnsembleReport.from_values(0.5, {"a": [1.0], "b": [1.0, 2.0]}, {})


def test_phase_bins_index_and_validation():
    bins = PhaseBins.velocities(4, 2.0)
    idx = bins.index(np.zeros((4, 2)), np.array([[-3.0, 0], [-2.0, 0], [1.99, 0], [2.0, 0]]))
    assert idx.tolist() == [-1, 0, 3, -1]
    with pytest.raises(ContractError):
        PhaseBins("x", 0, [0.0, 0.5, 0.5])
    with pytest.raises(ContractError):
        PhaseBins("y", 0, [0.0, 1.0])


def test_tuple_sum_matches_counting():
    rng = np.random.default_rng(0)
    bins = PhaseBins.positions(4)
    for _ in range(20):
        s = random_state(rng)
        c0, c1 = bin_counts(s, bins, 0), bin_counts(s, bins, 1)
        for a in range(4):
            assert tuple_sum(s, bin_indicator(bins, [a], [1]), 1) == c1[a]
            for b in range(4):
                expected = c0[a] * c1[b]
                assert tuple_sum(s, bin_indicator(bins, [a, b], [0, 1]), 2) == expected
                same = c0[a] * c0[b] - (c0[a] if a == b else 0)
                assert tuple_sum(s, bin_indicator(bins, [a, b], [0, 0]), 2) == same


def test_tuple_sum_order_cap():
    with pytest.raises(ContractError):
        tuple_sum(STATE, lambda x, v, g: np.ones(x.shape[:-2]), 3)


def test_correlation_estimate_matches_tuple_sums():
    rng = np.random.default_rng(1)
    ensemble = [random_state(rng) for _ in range(30)]
    bins = PhaseBins.positions(3)
    p = ScalingParams(0.1, lam=4.0)
    est = estimate_correlation(ensemble, 2, (0, 1), bins, p)
    for a in range(3):
        for b in range(3):
            direct = np.mean([tuple_sum(s, bin_indicator(bins, [a, b], [0, 1]), 2) for s in ensemble])
            assert est.estimate[a, b] == pytest.approx(direct / (p.mu * p.lam * (1 / 3) ** 2), rel=1e-12)


def test_correlation_is_relabel_invariant():
    rng = np.random.default_rng(2)
    ensemble = [random_state(rng) for _ in range(10)]
    perms = [s.replace(x=s.x[::-1], v=s.v[::-1], tags=s.tags[::-1]) for s in ensemble]
    bins = PhaseBins.positions(3)
    p = ScalingParams(0.1, lam=4.0)
    a = estimate_correlation(ensemble, 2, (1, 1), bins, p)
    b = estimate_correlation(perms, 2, (1, 1), bins, p)
    np.testing.assert_array_equal(a.estimate, b.estimate)


def test_correlation_contract_checks():
    bins = PhaseBins.positions(2)
    with pytest.raises(ContractError):
        estimate_correlation([STATE], 3, (0, 0, 0), bins, ScalingParams(0.1))
    with pytest.raises(ContractError):
        estimate_correlation([STATE], 1, (1,), bins, ScalingParams(0.1))
    with pytest.raises(ContractError):
        estimate_correlation([], 1, (0,), bins, ScalingParams(0.1))


def test_histogram_matches_per_member_mean():
    rng = np.random.default_rng(3)
    ensemble = [random_state(rng) for _ in range(25)]
    bins = PhaseBins.velocities(5, 2.0)
    p = ScalingParams(0.1, lam=4.0)
    est = estimate_correlation(ensemble, 1, (0,), bins, p)
    np.testing.assert_allclose(histogram_estimate(ensemble, 0, bins), est.mean_counts, rtol=1e-12)


def test_correlation_csv(tmp_path):
    rng = np.random.default_rng(4)
    est = estimate_correlation([random_state(rng) for _ in range(3)], 1, (0,), PhaseBins.positions(2),
                               ScalingParams(0.1))
    rows = est.to_csv(tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "center_0,estimate,std_error,flag"
    assert rows[1].endswith("underfilled")


def test_maxwellian_bin_profile_against_quadrature():
    bins = PhaseBins.velocities(6, 3.0)
    prof = maxwellian_bin_profile(bins, 2.0)
    for b in range(6):
        lo, hi = bins.edges[b], bins.edges[b + 1]
        val, _ = integrate.dblquad(lambda y, x: maxwellian(np.array([x, y]), 2.0), lo, hi, -10, 10)
        assert prof[b] == pytest.approx(val / (hi - lo), rel=1e-8)


def test_velocity_profile_of_background_at_time_zero():
    p = ScalingParams.from_mu(40)
    bins = PhaseBins.velocities(8, 3.0)
    ensemble = []
    run_members(p, uniform_perturbation(), [0.0], 300, 5, lambda k, s: ensemble.append(s))
    est = estimate_correlation(ensemble, 1, (0,), bins, p)
    # exclusion thins the density evenly across velocities, so compare normalized shapes
    shape = est.estimate / est.estimate.sum()
    target = maxwellian_bin_profile(bins, 1.0)
    target /= target.sum()
    err = est.std_error / est.estimate.sum()
    assert bonferroni_verdict(shape, err, target).passed


def test_tagged_position_profile_at_low_density():
    p = ScalingParams.decoupled(0.05, mu=2.0, lam=1.5)
    phi = cosine_perturbation()
    bins = PhaseBins.positions(6)
    ensemble = []
    run_members(p, phi, [0.0], 3000, 6, lambda k, s: ensemble.append(s))
    est = estimate_correlation(ensemble, 1, (1,), bins, p)
    lo, hi = bins.edges[:-1], bins.edges[1:]
    profile = 1 + (np.sin(2 * np.pi * hi) - np.sin(2 * np.pi * lo)) / (4 * np.pi * bins.widths)
    # exclusion thins the tagged density by a factor of order pi eps^2 (mu + lam); allow for it
    scale = est.estimate.sum() / profile.sum()
    assert 0.9 < scale <= 1.0 + 3 * est.std_error.sum() / profile.sum()
    assert bonferroni_verdict(est.estimate, est.std_error, scale * profile).passed


def test_pair_distances_respect_exclusion():
    p = ScalingParams.from_mu(50)
    sampler = GrandCanonicalSampler(p, uniform_perturbation())
    rng = np.random.default_rng(7)
    edges = np.array([0.0, p.epsilon, 2 * p.epsilon, 0.5])
    totals = sum(pair_distance_counts(sampler.sample(rng), edges) for _ in range(100))
    assert totals[0] == 0 and totals[1] > 0
    # particle 0 sees particle 2 at distance 0.36; particle 1 sits farther than 0.5 away
    assert pair_distance_counts(STATE, edges, (0, 1)).tolist() == [0, 0, 1]


def test_pair_correlation_factorizes_away_from_diagonal():
    p = ScalingParams.from_mu(30)
    bins = PhaseBins.positions(4)
    ensemble = []
    run_members(p, uniform_perturbation(), [0.0], 1500, 8, lambda k, s: ensemble.append(s))
    one = estimate_correlation(ensemble, 1, (0,), bins, p)
    two = estimate_correlation(ensemble, 2, (0, 0), bins, p)
    target = np.outer(one.estimate, one.estimate)
    # at this density the bin counts are still close to Poisson: within 3 sigma in most cells
    z = np.abs(two.estimate - target) / np.hypot(two.std_error, 2 * one.std_error.max() * one.estimate.max())
    off = ~np.eye(4, dtype=bool)
    assert np.mean(z[off] <= 3) >= 0.9


def test_recollision_gate_flags_only_dense_cases():
    p = ScalingParams(0.01)
    bins = PhaseBins.positions(2)
    gated = recollision_gate(bins, 0.05, p, np.random.default_rng(9), samples=100)
    assert gated.shape == (2, 2) and not gated.any()
    # at a long horizon almost every pair of free trajectories comes within eps^(2/3)
    gated = recollision_gate(bins, 50.0, p, np.random.default_rng(9), samples=50)
    assert gated.all()


def test_bonferroni_threshold_and_verdict():
    assert bonferroni_threshold(1) == pytest.approx(3.0)
    assert bonferroni_threshold(10) > 3.0
    v = bonferroni_verdict([1.0, 2.0, 10.0], [0.1, 0.1, 0.1], [1.0, 2.1, 1.0], exclude=[False, False, True])
    assert v.passed and v.compared == 2 and v.excluded == 1
    assert "PASS" in v.line("demo")
    assert not bonferroni_verdict([1.0], [0.1], [2.0]).passed


def test_run_members_is_reproducible():
    p = ScalingParams.from_mu(20, lam=2.0)
    out = [[], []]
    for k in range(2):
        run_members(p, cosine_perturbation(), [0.0, 0.2], 3, 11, lambda i, s, k=k: out[k].append(s.x.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(*out))
    with pytest.raises(ContractError):
        run_members(p, cosine_perturbation(), [0.5, 0.2], 1, 0, lambda i, s: None)


def test_kinetic_targets_for_cosine():
    coarse = kinetic_targets(cosine_perturbation(), cos_observable(), [0.5], 1.0, 16)
    targets = kinetic_targets(cosine_perturbation(), cos_observable(), [0.5], 1.0, 32)
    assert targets[0.0][0] == pytest.approx(0.25, abs=1e-6)
    assert 0 < targets[0.5][0] < 0.25
    assert targets[0.5][1] < coarse[0.5][1]
    assert abs(targets[0.5][0] - coarse[0.5][0]) <= coarse[0.5][1]


def test_lln_small_ensemble_and_variance_identity(tmp_path):
    p = ScalingParams.from_mu(30, lam=6.0)
    cfg = LLNConfig(p, cosine_perturbation(), cos_observable(), (0.3,), 100, seed=12, grid_points=16)
    res = lln_experiment(cfg)
    dec = res.decompositions[0]
    var = res.variance(0.3)
    # population identity: E[X^2] - E[X]^2 with X the tagged measure, versus the unbiased sample variance
    assert dec.total * 100 / 99 == pytest.approx(var, rel=1e-9)
    assert res.passed == all(abs(z) <= 3 for z in res.z_scores())
    data = json.loads(res.to_json(tmp_path / "lln.json").read_text())
    assert data["lambda"] == 6.0 and len(data["times"]) == 1
    with pytest.raises(ContractError):
        lln_experiment(LLNConfig(p, cosine_perturbation(), cos_observable(), (0.3,), 10))
    with pytest.raises(ContractError):
        variance_ratio(res, res, 0.3)


def test_gap_report_at_time_zero_small():
    p = ScalingParams.from_mu(20, lam=5.0)
    phi = cosine_perturbation()
    sol = solve_rb_grid(phi, [0.0], 1.0, VelocityGrid.for_beta(1.0, 16))
    rep = tagged_density_gap(p, phi, 0.0, PhaseBins.positions(4), 200, 13, sol)
    assert rep.gap >= 0 and rep.gap_error > 0 and rep.noise_floor > 0
    with pytest.raises(ContractError):
        tagged_density_gap(p, phi, 0.0, PhaseBins.velocities(4, 2.0), 10, 13, sol)


def test_initial_proximity_bound_scales_linearly():
    phi = cosine_perturbation()
    a = initial_proximity_bound(phi, ScalingParams(0.02))
    b = initial_proximity_bound(phi, ScalingParams(0.01))
    assert a == pytest.approx(2 * b)
    assert b == pytest.approx(0.01 * 4 * math.pi * 0.8459, rel=1e-3)


def test_trend_helpers():
    assert trend_is_decreasing([3, 2, 1]) and not trend_is_decreasing([3, 3, 1])
    assert linear_slope([1, 2], [2, 4]) == pytest.approx(2.0)


def test_observable_broadcasts_scalars():
    H = Observable("const", lambda x, v, g: 2.0)
    assert H(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3)).tolist() == [2.0, 2.0, 2.0]
