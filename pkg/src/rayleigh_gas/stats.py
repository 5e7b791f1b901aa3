"""Empirical measures, binned correlation estimates and the law-of-large-numbers experiment."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from .core import ContractError, ScalingParams, SystemState, derive_stream, sample_maxwellian
from .duhamel import excluding_radius, past_excluding
from .dynamics import evolve
from .ensemble import GrandCanonicalSampler, Perturbation, compute_c0
from .kinetic import VelocityGrid, solve_rb_grid

MAX_CORRELATION_ORDER = 2
MIN_BIN_COUNT = 10.0
MIN_LLN_MEMBERS = 100
SIGMA_GATE = 3.0
# recollision gate: a bin pair is flagged when more than this fraction of
# sampled pairs in it fail the past-excluding test
GATE_FRACTION = 0.1
GATE_SAMPLES = 400


@dataclass(frozen=True)
class Observable:
    """Test function H(x, v, tag) evaluated on arrays of shape (..., d), (..., d), (...)."""

    name: str
    evaluator: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    bound: float = math.inf

    def __call__(self, x, v, tags) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        tags = np.asarray(tags)
        out = np.asarray(self.evaluator(x, v, tags), dtype=float)
        return np.broadcast_to(out, tags.shape)

    def __add__(self, other: "Observable") -> "Observable":
        return Observable(f"{self.name}+{other.name}", lambda x, v, g: self(x, v, g) + other(x, v, g),
                          self.bound + other.bound)

    def scaled(self, factor: float) -> "Observable":
        return Observable(f"{factor:g}*{self.name}", lambda x, v, g: factor * self(x, v, g),
                          abs(factor) * self.bound)


def one_observable() -> Observable:
    return Observable("one", lambda x, v, g: np.ones(np.shape(g)), 1.0)


def cos_observable(mode: int = 1) -> Observable:
    return Observable(f"cos{mode}", lambda x, v, g: np.cos(2 * np.pi * mode * x[..., 0]), 1.0)


def tag_observable() -> Observable:
    return Observable("tag", lambda x, v, g: g.astype(float), 1.0)


def energy_observable(v_max: float = 6.0) -> Observable:
    """|v|^2 / 2, bounded by v_max^2 / 2 on the declared velocity ball."""
    return Observable("energy", lambda x, v, g: 0.5 * np.sum(v * v, axis=-1), 0.5 * v_max**2)


OBSERVABLES: dict[str, Callable[[], Observable]] = {
    "one": one_observable,
    "cos": cos_observable,
    "tag": tag_observable,
    "energy": energy_observable,
}


def observable_preset(name: str) -> Observable:
    try:
        return OBSERVABLES[name]()
    except KeyError:
        raise ContractError(f"unknown observable preset {name!r}; choose from {sorted(OBSERVABLES)}") from None


def empirical_measure(state: SystemState, H: Observable, mu: float) -> float:
    if state.n == 0:
        return 0.0
    return float(np.sum(H(state.x, state.v, state.tags))) / mu


def tagged_empirical_measure(state: SystemState, H: Observable, lam: float) -> float:
    if lam <= 0:
        raise ContractError("lambda must be positive")
    tagged = state.tags == 1
    if not tagged.any():
        return 0.0
    return float(np.sum(H(state.x[tagged], state.v[tagged], state.tags[tagged]))) / lam


@dataclass
class ObservableSummary:
    mean: float
    variance: float
    std_error: float

    @classmethod
    def from_values(cls, values) -> "ObservableSummary":
        values = np.asarray(values, dtype=float)
        m = len(values)
        var = float(np.var(values, ddof=1)) if m > 1 else 0.0
        return cls(float(np.mean(values)) if m else math.nan, var, math.sqrt(var / m) if m else math.nan)


@dataclass
class EnsembleReport:
    t: float
    members: int
    seeds: dict
    estimates: dict[str, ObservableSummary] = field(default_factory=dict)

    @classmethod
    def from_values(cls, t: float, values: dict[str, Sequence[float]], seeds: dict) -> "EnsembleReport":
        members = {len(v) for v in values.values()}
        if len(members) > 1:
            raise ContractError("observables were evaluated on different member counts")
        return cls(t, members.pop() if members else 0, dict(seeds),
                   {k: ObservableSummary.from_values(v) for k, v in values.items()})

    def to_dict(self) -> dict:
        return {"t": self.t, "members": self.members, "seeds": self.seeds,
                "estimates": {k: vars(s) for k, s in self.estimates.items()}}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


@dataclass(frozen=True)
class PhaseBins:
    """Slabs along one coordinate of phase space.

    ``coordinate`` is "x" or "v"; the other coordinates are integrated out, so
    the volume of a bin is its width (positions live on the unit torus).
    """

    coordinate: str
    axis: int
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if self.coordinate not in ("x", "v"):
            raise ContractError("coordinate must be 'x' or 'v'")
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ContractError("edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def positions(cls, count: int, axis: int = 0) -> "PhaseBins":
        return cls("x", axis, np.linspace(0.0, 1.0, count + 1))

    @classmethod
    def velocities(cls, count: int, v_max: float, axis: int = 0) -> "PhaseBins":
        return cls("v", axis, np.linspace(-v_max, v_max, count + 1))

    @property
    def count(self) -> int:
        return len(self.edges) - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def index(self, x, v) -> np.ndarray:
        """Bin index of each particle, -1 outside the edges."""
        coord = (np.asarray(x) if self.coordinate == "x" else np.asarray(v))[..., self.axis]
        idx = np.searchsorted(self.edges, coord, side="right") - 1
        return np.where((idx >= 0) & (idx < self.count), idx, -1)

    def sample_point(self, b: int, dim: int, beta: float, rng: np.random.Generator, size: int):
        """Uniform draws inside bin ``b`` with the integrated-out coordinates filled in."""
        x = rng.random((size, dim))
        v = sample_maxwellian(beta, dim, rng, size)
        lo, hi = self.edges[b], self.edges[b + 1]
        if self.coordinate == "x":
            x[:, self.axis] = lo + (hi - lo) * rng.random(size)
        else:
            v[:, self.axis] = lo + (hi - lo) * rng.random(size)
        return x, v


def bin_counts(state: SystemState, bins: PhaseBins, tag: int) -> np.ndarray:
    """Histogram of the particles carrying ``tag``."""
    idx = bins.index(state.x, state.v)
    keep = (state.tags == tag) & (idx >= 0)
    return np.bincount(idx[keep], minlength=bins.count)


def tuple_sum(state: SystemState, H, n: int) -> float:
    """Sum of H over distinct ordered n-tuples of particles, by direct enumeration.

    ``H`` receives stacked arrays x (..., n, d), v (..., n, d), tags (..., n).
    """
    if n < 1 or n > MAX_CORRELATION_ORDER:
        raise ContractError(f"tuple order must be 1..{MAX_CORRELATION_ORDER}")
    if state.n < n:
        return 0.0
    if n == 1:
        idx = np.arange(state.n)[:, None]
    else:
        i, j = np.nonzero(~np.eye(state.n, dtype=bool))
        idx = np.stack([i, j], axis=1)
    return float(np.sum(H(state.x[idx], state.v[idx], state.tags[idx])))


def bin_indicator(bins: PhaseBins, cells: Sequence[int], tags: Sequence[int]):
    """Indicator of (particle k in bin cells[k] with tag tags[k]) for tuple_sum."""

    def H(x, v, g):
        idx = bins.index(x, v)
        out = np.ones(idx.shape[:-1], dtype=bool)
        for k, (b, tag) in enumerate(zip(cells, tags)):
            out &= (idx[..., k] == b) & (g[..., k] == tag)
        return out.astype(float)

    return H


def tag_normalization(params: ScalingParams, tags: Sequence[int]) -> float:
    tagged = int(sum(tags))
    return params.mu ** (len(tags) - tagged) * params.lam ** tagged


@dataclass
class CorrelationEstimate:
    """Binned estimate of the n-particle correlation function for a tag pattern.

    Arrays have one axis per particle: shape (B,) for n=1 and (B, B) for n=2.
    ``mean_counts`` is the ensemble mean number of tuples in each cell.
    """

    n: int
    tags: tuple[int, ...]
    bins: PhaseBins
    estimate: np.ndarray
    std_error: np.ndarray
    mean_counts: np.ndarray
    underfilled: np.ndarray
    gated: np.ndarray
    members: int

    @property
    def flags(self) -> np.ndarray:
        return self.underfilled | self.gated

    def to_csv(self, path) -> Path:
        path = Path(path)
        centers = self.bins.centers
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"center_{k}" for k in range(self.n)] + ["estimate", "std_error", "flag"])
            for cell in np.ndindex(*self.estimate.shape):
                flag = "underfilled" if self.underfilled[cell] else ("gated" if self.gated[cell] else "")
                writer.writerow([repr(float(centers[c])) for c in cell]
                                + [repr(float(self.estimate[cell])), repr(float(self.std_error[cell])), flag])
        return path


def recollision_gate(bins: PhaseBins, t: float, params: ScalingParams, rng: np.random.Generator,
                     samples: int = GATE_SAMPLES, fraction: float = GATE_FRACTION) -> np.ndarray:
    """Flag bin pairs where sampled pairs often fail the past-excluding test.

    This is an empirical stand-in for the small exceptional set on which the
    hard-sphere and limiting correlations are not compared.
    """
    eps_d = excluding_radius(params.epsilon, params.dim)
    B = bins.count
    gated = np.zeros((B, B), dtype=bool)
    for b1 in range(B):
        for b2 in range(b1, B):
            x1, v1 = bins.sample_point(b1, params.dim, params.beta, rng, samples)
            x2, v2 = bins.sample_point(b2, params.dim, params.beta, rng, samples)
            fails = sum(not past_excluding((np.stack([x1[s], x2[s]]), np.stack([v1[s], v2[s]])), t, eps_d)
                        for s in range(samples))
            gated[b1, b2] = gated[b2, b1] = fails > fraction * samples
    return gated


def estimate_correlation(ensemble: Sequence[SystemState], n: int, tags: Sequence[int], bins: PhaseBins,
                         params: ScalingParams, min_count: float = MIN_BIN_COUNT,
                         gate_rng: np.random.Generator | None = None) -> CorrelationEstimate:
    """Per-bin correlation estimate from counts of distinct ordered tuples.

    The ensemble mean of the tuple count in a cell, divided by
    mu^(n-|tags|) lam^|tags| and the cell volume, estimates the correlation
    function averaged over the cell. For n=2, a recollision gate is applied
    when ``gate_rng`` is given.
    """
    tags = tuple(int(g) for g in tags)
    if not 1 <= n <= MAX_CORRELATION_ORDER or len(tags) != n:
        raise ContractError(f"need 1 <= n <= {MAX_CORRELATION_ORDER} and one tag per particle")
    if not ensemble:
        raise ContractError("empty ensemble")
    if any(tags) and params.lam == 0:
        raise ContractError("tagged correlations need lambda > 0")
    B = bins.count
    per_member = []
    for state in ensemble:
        c = [bin_counts(state, bins, g) for g in tags]
        if n == 1:
            per_member.append(c[0].astype(float))
        else:
            pairs = np.outer(c[0], c[1]).astype(float)
            if tags[0] == tags[1]:
                pairs -= np.diag(c[0])
            per_member.append(pairs)
    counts = np.stack(per_member)
    m = len(ensemble)
    mean = counts.mean(axis=0)
    sd = counts.std(axis=0, ddof=1) if m > 1 else np.zeros_like(mean)
    volume = bins.widths if n == 1 else np.outer(bins.widths, bins.widths)
    norm = tag_normalization(params, tags) * volume
    t = ensemble[0].time
    gated = np.zeros(mean.shape, dtype=bool)
    if n == 2 and gate_rng is not None:
        gated = recollision_gate(bins, t, params, gate_rng)
    return CorrelationEstimate(n, tags, bins, mean / norm, sd / math.sqrt(m) / norm, mean,
                               mean < min_count, gated, m)


def histogram_estimate(ensemble: Sequence[SystemState], tag: int, bins: PhaseBins) -> np.ndarray:
    """Mean per-bin particle count, from one pooled histogram of all members."""
    idx = np.concatenate([bins.index(s.x, s.v)[(s.tags == tag)] for s in ensemble])
    idx = idx[idx >= 0]
    return np.bincount(idx, minlength=bins.count) / len(ensemble)


def pair_distance_counts(state: SystemState, edges, tags: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Distinct ordered pairs with the given tags, histogrammed by torus distance."""
    a = np.flatnonzero(state.tags == tags[0])
    b = np.flatnonzero(state.tags == tags[1])
    if a.size == 0 or b.size == 0:
        return np.zeros(len(edges) - 1, dtype=np.int64)
    d = state.x[a][:, None, :] - state.x[b][None, :, :]
    d -= np.round(d)
    r = np.linalg.norm(d, axis=-1)
    distinct = a[:, None] != b[None, :]
    return np.histogram(r[distinct], bins=edges)[0]


@dataclass
class Verdict:
    passed: bool
    z_scores: np.ndarray
    threshold: float
    compared: int
    excluded: int

    def line(self, label: str) -> str:
        worst = float(np.max(np.abs(self.z_scores))) if self.z_scores.size else 0.0
        return (f"{label}: {'PASS' if self.passed else 'FAIL'} (max |z| {worst:.2f} vs {self.threshold:.2f}, "
                f"{self.compared} compared, {self.excluded} excluded)")


def bonferroni_threshold(comparisons: int, sigma: float = SIGMA_GATE) -> float:
    """Two-sided z threshold keeping the family-wise error at the single-test level of ``sigma``."""
    alpha = 2 * sps.norm.sf(sigma)
    return float(sps.norm.isf(alpha / (2 * max(comparisons, 1))))


def bonferroni_verdict(estimate, std_error, target, target_error=0.0, exclude=None,
                       sigma: float = SIGMA_GATE) -> Verdict:
    estimate = np.asarray(estimate, dtype=float)
    combined = np.sqrt(np.asarray(std_error, dtype=float) ** 2 + np.asarray(target_error, dtype=float) ** 2)
    keep = np.ones(estimate.shape, dtype=bool) if exclude is None else ~np.asarray(exclude, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(combined > 0, (estimate - target) / combined, np.where(estimate == target, 0.0, np.inf))
    z = np.broadcast_to(z, estimate.shape)[keep]
    threshold = bonferroni_threshold(int(z.size), sigma)
    return Verdict(bool(np.all(np.abs(z) <= threshold)), z, threshold, int(z.size), int((~keep).sum()))


def maxwellian_bin_profile(bins: PhaseBins, beta: float) -> np.ndarray:
    """Average of the one-dimensional Maxwellian marginal over each velocity slab."""
    if bins.coordinate != "v":
        raise ContractError("velocity bins required")
    scale = 1 / math.sqrt(beta)
    return np.diff(sps.norm.cdf(bins.edges, scale=scale)) / bins.widths


def run_members(params: ScalingParams, phi0: Perturbation, times: Sequence[float], members: int, seed: int,
                record: Callable[[int, SystemState], None], module: str = "stats"):
    """Sample and evolve ``members`` initial states, calling record(k, state) at each time.

    Member ``i`` draws from derive_stream(seed, module, i); times must be nondecreasing.
    """
    times = [float(t) for t in times]
    if any(b < a for a, b in zip(times, times[1:])) or (times and times[0] < 0):
        raise ContractError("times must be nonnegative and nondecreasing")
    sampler = GrandCanonicalSampler(params, phi0)
    for i in range(members):
        state = sampler.sample(derive_stream(seed, module, i))
        for k, t in enumerate(times):
            if t > state.time:
                state, _ = evolve(state, t, params)
            record(k, state)


@dataclass
class LLNConfig:
    params: ScalingParams
    phi0: Perturbation
    H: Observable
    times: tuple[float, ...]
    members: int
    seed: int = 0
    grid_points: int = 32


@dataclass
class VarianceDecomposition:
    """Pieces of Var(tagged measure) = pair term + (1/lam) self term - mean^2."""

    pair_term: float
    self_term: float
    mean_square: float

    @property
    def total(self) -> float:
        return self.pair_term + self.self_term - self.mean_square


@dataclass
class LLNResult:
    config: LLNConfig
    reports: list[EnsembleReport]
    targets: list[float]
    target_errors: list[float]
    decompositions: list[VarianceDecomposition]

    def z_scores(self) -> list[float]:
        out = []
        for rep, target, err in zip(self.reports, self.targets, self.target_errors):
            s = rep.estimates[self.config.H.name]
            out.append((s.mean - target) / math.hypot(s.std_error, err))
        return out

    @property
    def passed(self) -> bool:
        return all(abs(z) <= SIGMA_GATE for z in self.z_scores())

    def verdict_line(self) -> str:
        parts = ", ".join(f"t={rep.t:g}: z={z:+.2f}" for rep, z in zip(self.reports, self.z_scores()))
        return f"lln lambda={self.config.params.lam:g}: {'PASS' if self.passed else 'FAIL'} ({parts})"

    def variance(self, t: float) -> float:
        for rep in self.reports:
            if abs(rep.t - t) < 1e-12:
                return rep.estimates[self.config.H.name].variance
        raise ContractError(f"time {t} not in the experiment")

    def to_dict(self) -> dict:
        return {"lambda": self.config.params.lam, "mu": self.config.params.mu,
                "epsilon": self.config.params.epsilon, "observable": self.config.H.name,
                "phi0": self.config.phi0.name, "passed": self.passed,
                "times": [{"report": rep.to_dict(), "target": tg, "target_error": te, "z": z,
                           "variance_decomposition": {**vars(dec), "total": dec.total}}
                          for rep, tg, te, z, dec in zip(self.reports, self.targets, self.target_errors,
                                                         self.z_scores(), self.decompositions)]}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def kinetic_targets(phi0: Perturbation, H: Observable, times: Sequence[float], beta: float,
                    grid_points: int = 32) -> dict[float, tuple[float, float]]:
    """Grid-solver prediction of the integral of M phi(t) H and a resolution error estimate.

    The error is the difference against a grid with three quarters as many points per axis.
    """
    times = sorted(set(float(t) for t in times) | {0.0})
    fine = solve_rb_grid(phi0, times, beta, VelocityGrid.for_beta(beta, grid_points))
    coarse = solve_rb_grid(phi0, times, beta, VelocityGrid.for_beta(beta, (3 * grid_points) // 4))
    out = {}
    for t in times:
        value = fine.expectation(t, H)
        out[t] = (value, abs(value - coarse.expectation(t, H)))
    return out


def lln_experiment(config: LLNConfig) -> LLNResult:
    """Tagged empirical measure of H across an ensemble, against the kinetic prediction."""
    p = config.params
    if config.members < MIN_LLN_MEMBERS:
        raise ContractError(f"need at least {MIN_LLN_MEMBERS} members")
    if p.lam <= 0:
        raise ContractError("lambda must be positive")
    if p.dim != 2:
        raise ContractError("the kinetic grid solver is two-dimensional")
    times = sorted(float(t) for t in config.times)
    H = config.H
    values = [[] for _ in times]
    pair = [[] for _ in times]
    self_sq = [[] for _ in times]

    def record(k, state):
        tagged = state.tags == 1
        h = H(state.x[tagged], state.v[tagged], state.tags[tagged])
        s, s2 = float(h.sum()), float((h * h).sum())
        values[k].append(s / p.lam)
        pair[k].append((s * s - s2) / p.lam**2)
        self_sq[k].append(s2 / p.lam**2)

    run_members(p, config.phi0, times, config.members, config.seed, record)
    lookup = kinetic_targets(config.phi0, H, times, p.beta, config.grid_points)
    seeds = {"master": config.seed, "module": "stats", "members": f"0..{config.members - 1}"}
    reports, decomps = [], []
    for k, t in enumerate(times):
        reports.append(EnsembleReport.from_values(t, {H.name: values[k]}, seeds))
        mean = float(np.mean(values[k]))
        decomps.append(VarianceDecomposition(float(np.mean(pair[k])), float(np.mean(self_sq[k])), mean * mean))
    return LLNResult(config, reports, [lookup[t][0] for t in times], [lookup[t][1] for t in times], decomps)


@dataclass
class RatioCheck:
    ratio: float
    band: tuple[float, float]

    @property
    def passed(self) -> bool:
        return self.band[0] <= self.ratio <= self.band[1]


def variance_ratio(low: LLNResult, high: LLNResult, t: float, band=(1.5, 2.7)) -> RatioCheck:
    """Variance at the smaller lambda over variance at the larger one."""
    if low.config.params.lam >= high.config.params.lam:
        raise ContractError("first result must have the smaller lambda")
    return RatioCheck(low.variance(t) / high.variance(t), tuple(band))


@dataclass
class GapReport:
    """Aggregated L1 distance between the binned tagged one-particle correlation and a kinetic target."""

    epsilon: float
    t: float
    estimate: CorrelationEstimate
    target: np.ndarray

    @property
    def gap(self) -> float:
        w = self.estimate.bins.widths
        return float(np.sum(w * np.abs(self.estimate.estimate - self.target)))

    @property
    def gap_error(self) -> float:
        """Standard deviation of the gap from the per-bin errors (bins treated as independent)."""
        w = self.estimate.bins.widths
        return float(math.sqrt(np.sum((w * self.estimate.std_error) ** 2)))

    @property
    def noise_floor(self) -> float:
        """Expected gap if the estimate were pure noise around the target."""
        w = self.estimate.bins.widths
        return float(np.sum(w * self.estimate.std_error) * math.sqrt(2 / math.pi))


def tagged_density_gap(params: ScalingParams, phi0: Perturbation, t: float, bins: PhaseBins, members: int,
                       seed: int, solution) -> GapReport:
    """Binned tagged one-particle correlation at time t against the grid solution's slab averages."""
    if bins.coordinate != "x" or bins.axis != 0:
        raise ContractError("the grid solution resolves the first position coordinate only")
    ensemble: list[SystemState] = []
    run_members(params, phi0, [t], members, seed, lambda k, s: ensemble.append(s), module="stats.gap")
    est = estimate_correlation(ensemble, 1, (1,), bins, params)
    target = solution.bin_integrals(t, bins.edges) / bins.widths
    return GapReport(params.epsilon, t, est, target)


def initial_proximity_bound(phi0: Perturbation, params: ScalingParams) -> float:
    """Aggregated position-slab L1 bound C0 * eps * (4 pi / beta)^(d/2).

    Follows from a pointwise bound C0 eps exp(-beta |v|^2 / 4) on the
    one-particle discrepancy after integrating out the velocity.
    """
    c0 = float(compute_c0(phi0, params.beta, params.dim))
    return c0 * params.epsilon * (4 * math.pi / params.beta) ** (params.dim / 2)


def trend_is_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


def linear_slope(eps: Sequence[float], gaps: Sequence[float]) -> float:
    """Least-squares slope of gap against epsilon through the origin."""
    e = np.asarray(eps, dtype=float)
    return float(np.dot(e, gaps) / np.dot(e, e))

