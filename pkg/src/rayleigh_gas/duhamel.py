"""Backward pseudo-trajectories and Monte Carlo evaluation of collision-expansion terms.

A pseudo-trajectory starts from an end configuration at time t and runs
backwards. At each branch time a new particle is adjoined next to an existing
one (its progenitor), either plainly (sign -1) or after a pre-collisional
scattering (sign +1). In hard-sphere mode the particles have diameter epsilon
and follow the hard-sphere flow between branch times; in limit mode they are
points in free flight. Indices are 0-based: the i-th adjoined particle
(i = 1..k) gets index n + i - 1 and its progenitor lies in 0..n + i - 2.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .core import (ContractError, ScalingParams, SystemState, maxwellian, minimal_image, sample_maxwellian,
                   sample_sphere, scatter, sphere_area, torus_distance, wrap)
from .dynamics import evolve
from .ensemble import Perturbation
from .kinetic import collision_rate, sample_collisions

MAX_DYSON_ORDER = 4
MAX_CUTTING_STEPS = 4
MAX_BRANCH_PARTICLES = 30
ADJUNCTION_TOL = 1e-12

InitialData = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CollisionHistory:
    """Progenitor indices, tags of adjoined particles and gain/loss signs."""

    m: tuple
    ell_star: tuple
    s: tuple

    def __post_init__(self):
        object.__setattr__(self, "m", tuple(int(a) for a in self.m))
        object.__setattr__(self, "ell_star", tuple(int(a) for a in self.ell_star))
        object.__setattr__(self, "s", tuple(int(a) for a in self.s))
        if not len(self.m) == len(self.ell_star) == len(self.s):
            raise ContractError("history fields must have equal length")
        if any(a not in (0, 1) for a in self.ell_star):
            raise ContractError("tags must be 0 or 1")
        if any(a not in (-1, 1) for a in self.s):
            raise ContractError("signs must be +1 or -1")

    @property
    def k(self) -> int:
        return len(self.m)

    def validate(self, n: int):
        for i, mi in enumerate(self.m, start=1):
            if not 0 <= mi <= n + i - 2:
                raise ContractError(f"progenitor m_{i}={mi} outside 0..{n + i - 2}")

    @classmethod
    def plain(cls, m, s) -> "CollisionHistory":
        return cls(tuple(m), (0,) * len(m), tuple(s))


def histories(n: int, k: int, tags: tuple | None = None):
    """Every (m, s) history of length k for n end particles, with fixed tags."""
    tags = (0,) * k if tags is None else tuple(tags)
    ranges = [range(n + i - 1) for i in range(1, k + 1)]
    for m in itertools.product(*ranges):
        for s in itertools.product((-1, 1), repeat=k):
            yield CollisionHistory(m, tags, s)


def tag_patterns(k: int):
    return itertools.product((0, 1), repeat=k)


def tag_pattern_weight(pattern, p_mu: float) -> float:
    return p_mu ** sum(pattern)


@dataclass
class PseudoTrajectory:
    """Snapshots of a backward construction.

    ``before[i]`` is the configuration reached at t_i by the flow (i = 1..k),
    ``after[i]`` the configuration once particle n + i - 1 has been adjoined
    (``after[0]`` is the end configuration at time t) and ``initial`` the
    configuration at time 0. Frozen trajectories stop adjoining and hold their
    last configuration.
    """

    mode: str
    epsilon: float
    times: np.ndarray
    before: list = field(default_factory=list)
    after: list = field(default_factory=list)
    initial: tuple | None = None
    frozen: bool = False
    frozen_step: int | None = None
    cross_sections: list = field(default_factory=list)
    recollisions: list = field(default_factory=list)
    tags: np.ndarray | None = None

    @property
    def k(self) -> int:
        return len(self.times) - 1

    @property
    def n(self) -> int:
        return self.after[0][0].shape[0]


class RecollisionReport(NamedTuple):
    found: bool
    pair: tuple | None
    time: float | None

    def __bool__(self) -> bool:
        return self.found


def _flow_back(x: np.ndarray, v: np.ndarray, duration: float, mode: str, epsilon: float):
    """Backward flow for ``duration``; returns positions, velocities and contacts (time offset, i, j)."""
    if duration <= 0:
        return x, v, []
    if mode == "limit" or x.shape[0] < 2:
        return wrap(x - duration * v), v, []
    state = SystemState(0.0, wrap(x), -v, np.zeros(x.shape[0], dtype=np.int8))
    end, log = evolve(state, duration, epsilon)
    contacts = [(t, i, j) for t, (i, j), _ in log]
    return end.x.copy(), -end.v, contacts


def build_pseudo_trajectory(z_n, history: CollisionHistory, times, coll_params, mode: str,
                            params: ScalingParams | float, end_tags=None) -> PseudoTrajectory:
    """Backward construction from the end configuration z_n = (x, v) at times[0].

    ``times`` is (t, t_1, ..., t_k) decreasing and ``coll_params`` a pair of
    arrays (omega (k, d), new velocities (k, d)).
    """
    if mode not in ("limit", "hard-sphere"):
        raise ContractError(f"mode must be 'limit' or 'hard-sphere', got {mode!r}")
    epsilon = params.epsilon if isinstance(params, ScalingParams) else float(params)
    x = wrap(np.array(z_n[0], dtype=float, ndmin=2))
    v = np.array(z_n[1], dtype=float, ndmin=2)
    n, dim = x.shape
    history.validate(n)
    times = np.asarray(times, dtype=float)
    if times.shape != (history.k + 1,) or np.any(np.diff(times) > 0) or times[-1] < 0:
        raise ContractError("times must be (t, t_1, ..., t_k) decreasing and nonnegative")
    omegas, new_v = (np.array(a, dtype=float).reshape(history.k, dim) for a in coll_params)
    if np.any(np.abs(np.linalg.norm(omegas, axis=-1) - 1) > 1e-12):
        raise ContractError("collision directions must be unit vectors")
    tags = np.concatenate([np.zeros(n, dtype=np.int8) if end_tags is None else np.asarray(end_tags, np.int8),
                           np.asarray(history.ell_star, dtype=np.int8)])
    traj = PseudoTrajectory(mode, epsilon, times, before=[None], after=[(x.copy(), v.copy())], tags=tags)
    now = times[0]
    for i in range(1, history.k + 1):
        if traj.frozen:
            traj.before.append((x.copy(), v.copy()))
            traj.after.append((x.copy(), v.copy()))
            continue
        x, v, contacts = _flow_back(x, v, now - times[i], mode, epsilon)
        traj.recollisions += [(i - 1, now - dt, a, b) for dt, a, b in contacts]
        now = times[i]
        traj.before.append((x.copy(), v.copy()))
        mi, si, om, vn = history.m[i - 1], history.s[i - 1], omegas[i - 1], new_v[i - 1].copy()
        traj.cross_sections.append(max(float(np.dot(om, vn - v[mi])), 0.0))
        offset = si * epsilon * om if mode == "hard-sphere" else 0.0
        x_new = wrap(x[mi] + offset)
        if mode == "hard-sphere" and x.shape[0] > 1:
            others = np.delete(x, mi, axis=0)
            if np.any(torus_distance(others, x_new) <= epsilon * (1 + ADJUNCTION_TOL)):
                traj.frozen = True
                traj.frozen_step = i
                traj.after.append((x.copy(), v.copy()))
                continue
        v = v.copy()
        if si == 1:
            v[mi], vn = scatter(v[mi], vn, om)
        x = np.vstack([x, x_new])
        v = np.vstack([v, vn])
        traj.after.append((x.copy(), v.copy()))
    if not traj.frozen:
        x, v, contacts = _flow_back(x, v, now, mode, epsilon)
        traj.recollisions += [(history.k, now - dt, a, b) for dt, a, b in contacts]
    traj.initial = (x, v)
    return traj


def detect_recollision(traj: PseudoTrajectory) -> RecollisionReport:
    """First unscheduled contact during a flow segment, if any."""
    if traj.mode != "hard-sphere":
        raise ContractError("recollisions are only defined in hard-sphere mode")
    if not traj.recollisions:
        return RecollisionReport(False, None, None)
    _, time, i, j = max(traj.recollisions, key=lambda r: r[1])
    return RecollisionReport(True, (i, j), time)


def excluding_radius(epsilon: float, dim: int) -> float:
    """Extra room epsilon**(d/(d+1)) used for past-excluding end configurations."""
    return epsilon ** (dim / (dim + 1))


def _segment_min_distance(d0: np.ndarray, dv: np.ndarray, t: float) -> np.ndarray:
    """Minimum over tau in [0, t] of the torus norm of d0 - tau dv (batched over pairs)."""
    dim = d0.shape[-1]
    reach = int(np.ceil(np.max(np.abs(dv)) * t)) + 1 if d0.size else 1
    shifts = np.array(list(itertools.product(range(-reach, reach + 1), repeat=dim)), dtype=float)
    base = d0[:, None, :] + shifts[None, :, :]
    vv = np.sum(dv * dv, axis=-1)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 0, np.sum(base * dv[:, None, :], axis=-1) / vv, 0.0)
    tau = np.clip(tau, 0.0, t)
    closest = base - tau[..., None] * dv[:, None, :]
    return np.min(np.linalg.norm(closest, axis=-1), axis=1)


def past_excluding(z_n, t: float, eps_d: float) -> bool:
    """True iff the backward free flow keeps every pair farther than eps_d apart on [0, t]."""
    x = np.array(z_n[0], dtype=float, ndmin=2)
    v = np.array(z_n[1], dtype=float, ndmin=2)
    if x.shape[0] < 2:
        return True
    i, j = np.triu_indices(x.shape[0], k=1)
    d0 = minimal_image(x[i] - x[j])
    return bool(np.all(_segment_min_distance(d0, v[i] - v[j], t) > eps_d))


@dataclass(frozen=True)
class DysonTruncation:
    """Energy cutoff on the time-0 configuration and minimal gap between consecutive branch times."""

    V: float | None = None
    delta: float = 0.0

    def __post_init__(self):
        if self.V is not None and self.V < 0:
            raise ContractError("energy cutoff must be nonnegative")
        if self.delta < 0:
            raise ContractError("time separation must be nonnegative")


def product_initial_data(phi0: Perturbation, beta: float) -> InitialData:
    """Product data: M_beta on every particle times phi0 on the tagged ones."""
    def evaluate(x, v, tags):
        out = np.prod(maxwellian(v, beta), axis=-1)
        tagged = np.flatnonzero(np.asarray(tags) == 1)
        if tagged.size:
            out = out * np.prod(phi0(x[..., tagged, :], v[..., tagged, :]), axis=-1)
        return out
    return evaluate


def sample_ordered_times(t: float, k: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Decreasing branch times uniform on the ordered simplex, with its volume t**k / k!."""
    u = np.sort(rng.random((size, k)) * t, axis=1)[:, ::-1]
    return u, t**k / math.factorial(k)


def _separated(times: np.ndarray, delta: float) -> np.ndarray:
    if delta <= 0 or times.shape[1] < 2:
        return np.ones(times.shape[0], dtype=bool)
    return np.all(-np.diff(times, axis=1) > delta, axis=1)


def _limit_batch(x_end, v_end, t, times, m, s, omega, v_new):
    """Vectorised limit construction; returns time-0 positions, velocities and cross sections.

    ``m`` and ``s`` have shape (S, k) or (k,); ``times`` (S, k); ``omega`` and
    ``v_new`` (S, k, d).
    """
    size, k = times.shape
    n, dim = x_end.shape
    rows = np.arange(size)
    m = np.broadcast_to(m, (size, k))
    s = np.broadcast_to(s, (size, k))
    x = np.zeros((size, n + k, dim))
    v = np.zeros((size, n + k, dim))
    x[:, :n] = x_end
    v[:, :n] = v_end
    cross = np.zeros((size, k))
    now = np.full(size, float(t))
    for i in range(k):
        count = n + i
        x[:, :count] -= (now - times[:, i])[:, None, None] * v[:, :count]
        now = times[:, i]
        vm = v[rows, m[:, i]]
        cross[:, i] = np.maximum(np.sum(omega[:, i] * (v_new[:, i] - vm), axis=-1), 0.0)
        x[:, count] = x[rows, m[:, i]]
        vn = v_new[:, i].copy()
        gain = s[:, i] == 1
        if np.any(gain):
            vm_star, vn_star = scatter(vm[gain], vn[gain], omega[gain, i])
            v[rows[gain], m[gain, i]] = vm_star
            vn[gain] = vn_star
        v[:, count] = vn
    x -= now[:, None, None] * v
    return wrap(x), v, cross


class DysonEstimate(NamedTuple):
    estimate: float
    std_error: float


def sample_dyson_term(n: int, history_class, t: float, initial_data: InitialData, z_n, params: ScalingParams,
                      truncation: DysonTruncation | None = None, samples: int = 10_000,
                      rng: np.random.Generator | None = None, mode: str = "limit", end_tags=None,
                      enumerate_histories: bool | None = None) -> DysonEstimate:
    """Monte Carlo value of the k-collision term for end configuration z_n at time t.

    ``history_class`` is k or (k, tags of the adjoined particles). Branch times
    are uniform on the ordered simplex, progenitors and signs uniform (or
    summed exactly when ``enumerate_histories``; default for k <= 2), angles
    uniform on the sphere and new velocities Maxwellian with weight 1/M.
    In limit mode only untagged adjunctions contribute.
    """
    k, tags = (history_class, (0,) * history_class) if isinstance(history_class, int) else history_class
    tags = tuple(tags)
    if not 0 <= k <= MAX_DYSON_ORDER or len(tags) != k:
        raise ContractError(f"k must lie in [0, {MAX_DYSON_ORDER}] with one tag per collision")
    if mode not in ("limit", "hard-sphere"):
        raise ContractError(f"unknown mode {mode!r}")
    truncation = truncation or DysonTruncation()
    rng = rng or np.random.default_rng()
    beta, dim = params.beta, params.dim
    x_end = wrap(np.array(z_n[0], dtype=float).reshape(n, dim))
    v_end = np.array(z_n[1], dtype=float).reshape(n, dim)
    end_tags = np.zeros(n, dtype=np.int8) if end_tags is None else np.asarray(end_tags, dtype=np.int8)
    all_tags = np.concatenate([end_tags, np.asarray(tags, dtype=np.int8)])
    energy_ok = (lambda vv: np.sum(vv**2, axis=(-2, -1)) <= truncation.V**2) if truncation.V is not None \
        else (lambda vv: np.ones(vv.shape[0], dtype=bool))
    if k == 0:
        if mode == "limit":
            x0 = wrap(x_end - t * v_end)
        else:
            x0 = _flow_back(x_end, v_end, t, mode, params.epsilon)[0]
        val = float(initial_data(x0[None], v_end[None], all_tags)[0] * energy_ok(v_end[None])[0])
        return DysonEstimate(val, 0.0)
    if mode == "limit" and any(tags):
        return DysonEstimate(0.0, 0.0)
    if samples < 2:
        raise ContractError("need at least two samples")
    if enumerate_histories is None:
        enumerate_histories = k <= 2
    times, simplex = sample_ordered_times(t, k, samples, rng)
    omega = sample_sphere(dim, rng, size=(samples, k))
    v_new = sample_maxwellian(beta, dim, rng, size=(samples, k))
    base = simplex * sphere_area(dim) ** k * tag_pattern_weight(tags, params.p_mu)
    base = base / np.prod(maxwellian(v_new, beta), axis=1)
    base = base * _separated(times, truncation.delta)

    def evaluate(m, s):
        if mode == "limit":
            x0, v0, cross = _limit_batch(x_end, v_end, t, times, m, s, omega, v_new)
            sign = np.prod(np.broadcast_to(s, (samples, k)), axis=1)
            vals = sign * np.prod(cross, axis=1) * initial_data(x0, v0, all_tags) * energy_ok(v0)
            return vals
        vals = np.zeros(samples)
        m = np.broadcast_to(m, (samples, k))
        s = np.broadcast_to(s, (samples, k))
        for a in range(samples):
            if base[a] == 0:
                continue
            hist = CollisionHistory(m[a], tags, s[a])
            traj = build_pseudo_trajectory((x_end, v_end), hist, np.concatenate([[t], times[a]]),
                                           (omega[a], v_new[a]), "hard-sphere", params, end_tags)
            if traj.frozen:
                continue
            x0, v0 = traj.initial
            w = np.prod(s[a]) * np.prod(traj.cross_sections)
            if w != 0:
                vals[a] = w * initial_data(x0[None], v0[None], all_tags)[0] * energy_ok(v0[None])[0]
        return vals

    if enumerate_histories:
        total = np.zeros(samples)
        for h in histories(n, k, tags):
            total += evaluate(np.array(h.m), np.array(h.s))
    else:
        m = np.stack([rng.integers(0, n + i, size=samples) for i in range(k)], axis=1)
        s = rng.choice(np.array([-1, 1]), size=(samples, k))
        counts = np.prod([n + i for i in range(k)]) * 2**k
        total = counts * evaluate(m, s)
    vals = base * total
    return DysonEstimate(float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples)))


@dataclass(frozen=True)
class CuttingParams:
    t: float
    K: int
    alpha: float
    A: float = 2.5

    def __post_init__(self):
        if self.K < 2:
            raise ContractError("K must be at least 2")
        if not 0 < self.alpha < 0.75:
            raise ContractError("alpha must lie in (0, 3/4)")
        if not self.A > 2:
            raise ContractError("A must exceed 2")
        if not self.t > 0:
            raise ContractError("t must be positive")

    def validity(self, c: float = 1.0) -> tuple[bool, str]:
        """Check t <= c K^{3/4 - alpha}; reported, never enforced."""
        limit = c * self.K ** (0.75 - self.alpha)
        ok = self.t <= limit
        return ok, f"t={self.t} {'<=' if ok else '>'} c*K^(3/4-alpha)={limit:.4g} (c={c})"


class CuttingSchedule(NamedTuple):
    h: np.ndarray
    h_tilde: np.ndarray
    caps: np.ndarray
    step_times: np.ndarray
    # natural logs of h; the first pieces underflow to 0.0 in h for K >= 16
    log_h: np.ndarray


def adaptive_cutting(cp: CuttingParams, warn: bool = True) -> CuttingSchedule:
    """Progressively longer pieces h_1 < ... < h_K covering [0, t].

    Unnormalised lengths exp(-2**(K - K**(1-alpha) - i)) / (2 K**(1/4+alpha)),
    rescaled to sum to t. Piece i allows at most 2**i collisions; step_times[i]
    is t minus the first i + 1 pieces (the last one is 0).
    """
    ok, msg = cp.validity()
    if warn and not ok:
        warnings.warn("cutting outside its validity range: " + msg, stacklevel=2)
    K = cp.K
    i = np.arange(1, K + 1)
    log_tilde = -np.exp2(K - K ** (1 - cp.alpha) - i) - math.log(2 * K ** (0.25 + cp.alpha))
    h_tilde = np.exp(log_tilde)
    h = cp.t * h_tilde / h_tilde.sum()
    log_h = math.log(cp.t) + log_tilde - math.log(h_tilde.sum())
    step_times = cp.t - np.cumsum(h)
    step_times[-1] = 0.0
    return CuttingSchedule(h, h_tilde, np.exp2(i).astype(int), step_times, log_h)


@dataclass
class CouplingResult:
    skipped: str | None
    collisions: int
    epsilon: float
    velocity_gap: float = 0.0
    position_gap: float = 0.0

    @property
    def holds(self) -> bool:
        return self.velocity_gap <= 1e-12 and self.position_gap <= self.collisions * self.epsilon * (1 + 1e-9)


def couple_trajectories(z_n, history: CollisionHistory, times, coll_params, params: ScalingParams,
                        truncation: DysonTruncation | None = None) -> CouplingResult:
    """Build hard-sphere and limit trajectories from the same data and compare them at every branch time."""
    truncation = truncation or DysonTruncation()
    x, v = (np.array(a, dtype=float, ndmin=2) for a in z_n)
    eps = params.epsilon
    k = history.k
    if not past_excluding((x, v), times[0], excluding_radius(eps, params.dim)):
        return CouplingResult("not past-excluding", k, eps)
    if k > 1 and truncation.delta > 0 and np.any(-np.diff(np.asarray(times[1:])) <= truncation.delta):
        return CouplingResult("not separated", k, eps)
    hard = build_pseudo_trajectory((x, v), history, times, coll_params, "hard-sphere", params)
    if hard.frozen:
        return CouplingResult("frozen", k, eps)
    if detect_recollision(hard):
        return CouplingResult("recollision", k, eps)
    limit = build_pseudo_trajectory((x, v), history, times, coll_params, "limit", params)
    if truncation.V is not None and np.sum(hard.initial[1] ** 2) > truncation.V**2:
        return CouplingResult("energy", k, eps)
    pairs = [(hard.initial, limit.initial)] + list(zip(hard.after[1:], limit.after[1:]))
    pairs += list(zip(hard.before[1:], limit.before[1:]))
    vgap = max(float(np.max(np.abs(a[1] - b[1]))) for a, b in pairs)
    xgap = max(float(np.max(torus_distance(a[0], b[0]))) for a, b in pairs)
    return CouplingResult(None, k, eps, vgap, xgap)


def random_incoming_parameters(v_prog: np.ndarray, beta: float, rng: np.random.Generator):
    """A new velocity ~ M_beta and a uniform direction flipped into the incoming half-sphere."""
    dim = v_prog.shape[-1]
    vn = sample_maxwellian(beta, dim, rng)
    om = sample_sphere(dim, rng)
    if np.dot(om, vn - v_prog) < 0:
        om = -om
    return om, vn


@dataclass
class CouplingSummary:
    attempted: int
    checked: int
    failures: int
    skips: dict
    max_velocity_gap: float
    max_position_ratio: float

    @property
    def skip_rate(self) -> float:
        return 1 - self.checked / self.attempted if self.attempted else 0.0

    @property
    def recollision_rate(self) -> float:
        return self.skips.get("recollision", 0) / self.attempted if self.attempted else 0.0


def coupling_experiment(n: int, k_max: int, t: float, params: ScalingParams, truncation: DysonTruncation,
                        samples: int, rng: np.random.Generator) -> CouplingSummary:
    """Sample random end states, histories and incoming collision parameters and couple the two modes.

    Adjunction parameters are drawn along a limit construction so that every
    adjunction is incoming for the limit trajectory.
    """
    dim, beta = params.dim, params.beta
    skips: dict = {}
    checked = failures = 0
    vmax = ratio = 0.0
    for _ in range(samples):
        k = int(rng.integers(1, k_max + 1))
        x = rng.random((n, dim))
        v = sample_maxwellian(beta, dim, rng, size=n)
        times = np.concatenate([[t], np.sort(rng.random(k) * t)[::-1]])
        m = [int(rng.integers(0, n + i)) for i in range(k)]
        s = [int(a) for a in rng.choice([-1, 1], size=k)]
        hist = CollisionHistory.plain(m, s)
        omegas, news = [], []
        cur = v.copy()
        for i in range(k):
            om, vn = random_incoming_parameters(cur[m[i]], beta, rng)
            if s[i] == 1:
                cur[m[i]], vn2 = scatter(cur[m[i]], vn, om)
            else:
                vn2 = vn
            cur = np.vstack([cur, vn2])
            omegas.append(om)
            news.append(vn)
        res = couple_trajectories((x, v), hist, times, (np.array(omegas), np.array(news)), params, truncation)
        if res.skipped:
            skips[res.skipped] = skips.get(res.skipped, 0) + 1
            continue
        checked += 1
        vmax = max(vmax, res.velocity_gap)
        ratio = max(ratio, res.position_gap / (k * params.epsilon))
        failures += not res.holds
    return CouplingSummary(samples, checked, failures, skips, vmax, ratio)


@dataclass
class PrunedReport:
    """Per-step masses of the absolute branching expansion."""

    K: int
    t: float
    p_mu: float
    h: list
    caps: list
    retained: list
    retained_se: list
    tagged: list
    tagged_se: list
    over_cap: list
    over_cap_se: list
    samples: int
    particle_cap_hits: int

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()}


def pruned_series_diagnostic(n: int, t: float, cp: CuttingParams, params: ScalingParams, phi0: Perturbation | None,
                             samples: int, rng: np.random.Generator) -> PrunedReport:
    """Masses of retained, tagged and over-cap branches of the absolute collision expansion.

    Running backwards from t, every particle spawns adjunctions at rate
    2 nu(v) (both signs), with the partner and direction drawn from the
    collision kernel and a fair sign. Weighting each path by exp(integral of
    the total rate) turns path averages into sums over histories of the
    absolute integrands. A branch is over cap at step i when it exceeds 2**i
    collisions on piece i (or the particle cap); it is then stopped and its
    mass booked to step i. Tagged masses weight retained branches by
    (1 + p_mu)**J - 1, the sum of p_mu**|tags| over non-zero tag patterns.
    ``phi0`` is accepted for the report's provenance; branch masses do not depend on it.
    """
    if cp.K > MAX_CUTTING_STEPS:
        raise ContractError(f"K must be at most {MAX_CUTTING_STEPS}")
    if abs(cp.t - t) > 1e-12:
        raise ContractError("cutting parameters were built for a different t")
    if n < 1 or n >= MAX_BRANCH_PARTICLES:
        raise ContractError(f"n must lie in [1, {MAX_BRANCH_PARTICLES})")
    sched = adaptive_cutting(cp, warn=False)
    beta, dim, p = params.beta, params.dim, params.p_mu
    K = cp.K
    cap_n = MAX_BRANCH_PARTICLES
    V = np.zeros((samples, cap_n, dim))
    V[:, :n] = sample_maxwellian(beta, dim, rng, size=(samples, n))
    rate = np.zeros((samples, cap_n))
    rate[:, :n] = 2 * collision_rate(V[:, :n], beta, dim)
    count = np.full(samples, n)
    tau = np.full(samples, t)
    step = np.zeros(samples, dtype=int)
    j_step = np.zeros(samples, dtype=int)
    j_total = np.zeros(samples, dtype=int)
    logw = np.zeros(samples)
    active = np.ones(samples, dtype=bool)
    over_step = np.full(samples, -1)
    # log weights and collision totals at the end of each step, for retained branches
    end_logw = np.full((samples, K), np.nan)
    end_j = np.zeros((samples, K), dtype=int)
    particle_hits = 0
    boundaries = np.asarray(sched.step_times)
    while np.any(active):
        idx = np.flatnonzero(active)
        total = rate[idx].sum(axis=1)
        dt = rng.exponential(1 / total)
        edge = boundaries[step[idx]]
        cross = tau[idx] - dt <= edge
        a = idx[cross]
        logw[a] += total[cross] * (tau[a] - edge[cross])
        tau[a] = edge[cross]
        end_logw[a, step[a]] = logw[a]
        end_j[a, step[a]] = j_total[a]
        step[a] += 1
        j_step[a] = 0
        active[a[step[a] >= K]] = False
        b = idx[~cross]
        if not b.size:
            continue
        logw[b] += total[~cross] * dt[~cross]
        tau[b] -= dt[~cross]
        j_step[b] += 1
        j_total[b] += 1
        full = count[b] >= cap_n
        over = (j_step[b] > sched.caps[step[b]]) | full
        particle_hits += int(np.sum(full & ~(j_step[b] > sched.caps[step[b]])))
        stop = b[over]
        over_step[stop] = step[stop]
        active[stop] = False
        c = b[~over]
        if not c.size:
            continue
        probs = rate[c] / rate[c].sum(axis=1, keepdims=True)
        u = rng.random(c.size)[:, None]
        prog = np.minimum((np.cumsum(probs, axis=1) < u).sum(axis=1), count[c] - 1)
        sign = rng.random(c.size) < 0.5
        v_star, _, v_c, _ = sample_collisions(V[c, prog], beta, rng)
        # gain branches scatter the progenitor; the adjoined particle carries the matching partner velocity
        v_partner = v_c + (V[c, prog] - v_star)
        V[c[sign], prog[sign]] = v_star[sign]
        V[c, count[c]] = np.where(sign[:, None], v_partner, v_c)
        rate[c, prog] = 2 * collision_rate(V[c, prog], beta, dim)
        rate[c, count[c]] = 2 * collision_rate(V[c, count[c]], beta, dim)
        count[c] += 1
    retained, retained_se, tagged, tagged_se, over_mass, over_se = [], [], [], [], [], []
    for k in range(K):
        alive = ~np.isnan(end_logw[:, k])
        w = np.where(alive, np.exp(np.where(alive, end_logw[:, k], 0.0)), 0.0)
        tg = w * ((1 + p) ** end_j[:, k] - 1)
        ov = np.where(over_step == k, np.exp(logw) * (1 + p) ** j_total, 0.0)
        for arr, mean_list, se_list in ((w, retained, retained_se), (tg, tagged, tagged_se),
                                        (ov, over_mass, over_se)):
            mean_list.append(float(arr.mean()))
            se_list.append(float(arr.std(ddof=1) / math.sqrt(samples)))
    return PrunedReport(K, t, p, sched.h.tolist(), sched.caps.tolist(), retained, retained_se, tagged, tagged_se,
                        over_mass, over_se, samples, particle_hits)
