import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from rayleigh_gas.core import CapExceeded, ContractError, ParticleState, ScalingParams, SystemState, pair_distances
from rayleigh_gas.dynamics import EventLog, advance_free, contact_times, evolve, predict_collision
from rayleigh_gas.ensemble import sample_initial_state, uniform_perturbation


def torus_gap(xi, xj, vi, vj, t):
    d = (np.asarray(xi) + t * np.asarray(vi)) - (np.asarray(xj) + t * np.asarray(vj))
    d -= np.round(d)
    return float(np.linalg.norm(d))


def first_contact_by_bisection(xi, xj, vi, vj, eps, horizon, steps=20_000):
    """Scan the brute-force torus distance on a fine grid, then refine the first crossing."""
    ts = np.linspace(0.0, horizon, steps)
    gaps = np.array([torus_gap(xi, xj, vi, vj, t) for t in ts]) - eps
    below = np.flatnonzero(gaps <= 0)
    if below.size == 0:
        return None
    k = below[0]
    return optimize.brentq(lambda t: torus_gap(xi, xj, vi, vj, t) - eps, ts[k - 1], ts[k], xtol=1e-14)


def pair(xi, vi, xj, vj):
    return (ParticleState(np.array(xi, float), np.array(vi, float), 0),
            ParticleState(np.array(xj, float), np.array(vj, float), 0))


def test_approaching_through_the_seam():
    a, b = pair([0.8, 0.5], [1, 0], [0.2, 0.5], [-1, 0])
    t = predict_collision(a, b, 0.1)
    assert t == pytest.approx(0.15, abs=1e-14)
    assert t == pytest.approx(first_contact_by_bisection(a.x, b.x, a.v, b.v, 0.1, 0.2), abs=1e-10)


def test_pair_receding_through_the_seam_is_not_predicted():
    # the nearest image recedes; contact happens only through the far image at t = 0.25
    a, b = pair([0.2, 0.5], [1, 0], [0.8, 0.5], [-1, 0])
    assert predict_collision(a, b, 0.1) is None
    assert first_contact_by_bisection(a.x, b.x, a.v, b.v, 0.1, 0.3) == pytest.approx(0.25, abs=1e-10)


def test_evolve_two_body_head_on():
    s = SystemState(0.0, [[0.2, 0.5], [0.8, 0.5]], [[1, 0], [-1, 0]], [0, 0])
    out, log = evolve(s, 0.3, 0.1)
    assert len(log) == 1
    assert log.times[0] == pytest.approx(0.25, abs=1e-12)
    np.testing.assert_allclose(out.v, [[-1, 0], [1, 0]], atol=1e-15)
    np.testing.assert_allclose(log.omegas[0], [-1, 0], atol=1e-12)


def test_parallel_equal_velocities_never_meet():
    a, b = pair([0.1, 0.1], [0.3, 0.7], [0.6, 0.4], [0.3, 0.7])
    assert predict_collision(a, b, 0.05) is None


def test_receding_pair_has_no_contact():
    a, b = pair([0.5, 0.5], [0.5, 0], [0.3, 0.5], [-0.5, 0])
    assert predict_collision(a, b, 0.05) is None


def test_overlap_is_a_contract_violation():
    a, b = pair([0.5, 0.5], [1, 0], [0.52, 0.5], [0, 0])
    with pytest.raises(ContractError):
        predict_collision(a, b, 0.05)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 0.999), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_prediction_matches_bisection(xs, vs):
    eps = 0.07
    a, b = pair(xs[:2], vs[:2], xs[2:], vs[2:])
    if torus_gap(a.x, b.x, a.v, b.v, 0.0) <= eps * 1.001:
        return
    speed = np.linalg.norm(a.v - b.v)
    if speed < 1e-3:
        return
    horizon = (0.5 - eps) / speed
    t = predict_collision(a, b, eps)
    oracle = first_contact_by_bisection(a.x, b.x, a.v, b.v, eps, horizon)
    if oracle is None or t is None:
        # only grazing contacts (tangent to the disc) may be ambiguous
        assert oracle is None and t is None or min(
            torus_gap(a.x, b.x, a.v, b.v, s) for s in np.linspace(0, horizon, 2000)) > eps * (1 - 1e-3)
    else:
        assert t == pytest.approx(oracle, abs=1e-8)


def test_contact_times_vectorized():
    dx = np.array([[0.4, 0.0], [0.0, 0.3]])
    dv = np.array([[-2.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(contact_times(dx, dv, 0.1), [0.15, np.inf])


def test_advance_free_examples():
    s = SystemState(0.0, [[0.9, 0.0]], [[1.0, 0.0]], [0])
    assert advance_free(s, 0.0) is s
    np.testing.assert_allclose(advance_free(s, 0.2).x, [[0.1, 0.0]], atol=1e-15)
    assert advance_free(s, 0.2).time == 0.2
    with pytest.raises(ContractError):
        advance_free(s, -1.0)


@given(st.floats(0, 5), st.lists(st.floats(0, 0.999), min_size=2, max_size=2),
       st.lists(st.floats(-4, 4), min_size=2, max_size=2))
def test_free_flow_semigroup(dt, x, v):
    s = SystemState(0.0, [x], [v], [1])
    one = advance_free(s, dt)
    two = advance_free(advance_free(s, dt / 2), dt / 2)
    d = one.x - two.x
    d -= np.round(d)
    assert np.max(np.abs(d)) < 1e-12
    assert np.array_equal(one.v, s.v) and np.array_equal(one.tags, s.tags)


def equilibrium_state(mu, seed):
    return sample_initial_state(ScalingParams.from_mu(mu), uniform_perturbation(), np.random.default_rng(seed))


def test_conservation_and_exclusion_along_run():
    s = equilibrium_state(80, 1)
    p0, e0 = s.momentum(), s.kinetic_energy()
    eps = 1 / 80
    state, total = s, 0
    for k in range(1, 11):
        state, log = evolve(state, 0.1 * k, eps)
        total += len(log)
        assert np.min(pair_distances(state.x)) >= eps - 1e-12
    assert total > 50
    np.testing.assert_allclose(state.momentum(), p0, atol=1e-9 * max(1, np.abs(p0).max()) * s.n)
    assert abs(state.kinetic_energy() - e0) <= 1e-9 * e0


def test_event_log_is_ordered_and_pairs_separate():
    s = equilibrium_state(60, 2)
    eps = 1 / 60
    _, log = evolve(s, 1.0, eps)
    times = np.array(log.times)
    assert np.all(np.diff(times) >= 0)
    # a pair leaves contact after colliding, so a repeat needs either a
    # deflection of one partner in between or a flight around the torus
    last, touched = {}, {}
    for k, (t, (i, j), w) in enumerate(log):
        if (i, j) in last:
            between = touched.get(i, -1) > last[(i, j)][1] or touched.get(j, -1) > last[(i, j)][1]
            assert t > last[(i, j)][0] and (between or t - last[(i, j)][0] > 0.05)
        last[(i, j)] = (t, k)
        touched[i] = touched[j] = k


def test_reversibility_small_runs():
    eps = 1 / 40
    for seed in range(5):
        s = equilibrium_state(40, seed)
        out, log = evolve(s, 0.3, eps)
        assert len(log) <= 50
        back, _ = evolve(out.replace(v=-out.v), 0.6, eps)
        d = back.x - s.x
        d -= np.round(d)
        assert np.max(np.abs(d)) <= 1e-6


def test_event_cap_raises_with_log():
    s = equilibrium_state(80, 3)
    with pytest.raises(CapExceeded) as info:
        evolve(s, 5.0, 1 / 80, max_events=10)
    assert len(info.value.log) == 11


def test_evolve_rejects_past_target():
    s = SystemState(1.0, [[0.5, 0.5]], [[0, 0]], [0])
    with pytest.raises(ContractError):
        evolve(s, 0.5, 0.1)


def test_event_log_csv(tmp_path):
    log = EventLog()
    log.append(0.5, 0, 3, np.array([0.6, 0.8]))
    path = log.to_csv(tmp_path / "events.csv")
    rows = path.read_text().splitlines()
    assert rows[0] == "time,i,j,omega_0,omega_1"
    assert rows[1] == "0.5,0,3,0.6,0.8"


def test_three_dimensional_run_conserves_energy():
    # the scaled 3D gas is too dense for rejection sampling on the unit torus
    p = ScalingParams.decoupled(0.05, mu=20.0, dim=3)
    s = sample_initial_state(p, uniform_perturbation(), np.random.default_rng(4))
    out, log = evolve(s, 0.5, p)
    assert len(log) > 0
    assert math.isclose(out.kinetic_energy(), s.kinetic_energy(), rel_tol=1e-9)
    assert np.min(pair_distances(out.x)) >= p.epsilon - 1e-12
