"""Grand-canonical initial law of the mixture: density, exact sampler, partition function, C0."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (CapExceeded, ContractError, ScalingParams, SystemState, exclusion_ok,
                   exclusion_ok_batch, maxwellian, sample_maxwellian)

MAX_REJECTION_ROUNDS = 10**6
MAX_PROPOSAL_MASS = 1e4
MAX_PARTITION_MASS = 50.0

PhaseFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _x1_grid(dim: int, points: int = 64) -> np.ndarray:
    grid = np.zeros((points, dim))
    grid[:, 0] = (np.arange(points) + 0.5) / points
    return grid


def _tensor_grid(dim: int, points: int = 8) -> np.ndarray:
    axis = (np.arange(points) + 0.5) / points
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass(frozen=True)
class Perturbation:
    """Nonnegative bounded initial perturbation of the tagged particles.

    ``evaluator(x, v)`` takes arrays of shape (..., dim) and returns shape (...).
    ``bound`` is the declared sup; ``mass_fn(beta, dim)`` optionally gives
    the exact value of the integral of M_beta * phi0 over phase space.
    ``grid_fn(dim)`` lists the positions used when maximising over x.
    """

    name: str
    evaluator: PhaseFunction
    bound: float
    mass_fn: Callable[[float, int], float] | None = None
    grid_fn: Callable[[int], np.ndarray] = _tensor_grid
    signed: bool = False

    def __call__(self, x, v) -> np.ndarray:
        return np.asarray(self.evaluator(np.asarray(x, dtype=float), np.asarray(v, dtype=float)), dtype=float)

    def position_grid(self, dim: int) -> np.ndarray:
        return self.grid_fn(dim)

    def mass(self, beta: float, dim: int) -> float:
        if self.mass_fn is not None:
            return float(self.mass_fn(beta, dim))
        nodes, weights = np.polynomial.hermite_e.hermegauss(24)
        nodes = nodes / math.sqrt(beta)
        weights = weights / weights.sum()
        mesh = np.meshgrid(*([nodes] * dim), indexing="ij")
        wmesh = np.meshgrid(*([weights] * dim), indexing="ij")
        v = np.stack([m.ravel() for m in mesh], axis=-1)
        w = np.prod(np.stack([m.ravel() for m in wmesh], axis=-1), axis=-1)
        xs = _tensor_grid(dim, 16 if dim == 2 else 8)
        vals = self(xs[:, None, :], v[None, :, :])
        return float(np.mean(vals @ w))

    def sup_norm_weighted(self, beta: float, dim: int) -> float:
        """Sup of M_beta * M_{beta/2}^{-1/2} * |phi0| over the C0 grid."""
        return compute_c0(self, beta, dim).terms[2]


def uniform_perturbation() -> Perturbation:
    return Perturbation("uniform", lambda x, v: np.ones(np.broadcast_shapes(x.shape, v.shape)[:-1]),
                        bound=1.0, mass_fn=lambda beta, dim: 1.0, grid_fn=lambda dim: _x1_grid(dim, 4))


def zero_perturbation() -> Perturbation:
    return Perturbation("zero", lambda x, v: np.zeros(np.broadcast_shapes(x.shape, v.shape)[:-1]),
                        bound=1.0, mass_fn=lambda beta, dim: 0.0, grid_fn=lambda dim: _x1_grid(dim, 4))


def cosine_perturbation(amplitude: float = 0.5) -> Perturbation:
    def phi(x, v):
        out = 1.0 + amplitude * np.cos(2 * np.pi * x[..., 0])
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, v.shape)[:-1])

    return Perturbation("cosine", phi, bound=1.0 + abs(amplitude),
                        mass_fn=lambda beta, dim: 1.0, grid_fn=_x1_grid)


def gauss_shift_perturbation(shift: float = 1.0) -> Perturbation:
    """1 + exp(-|v - u|^2 / 2) with u = (shift, 0, ...): a Gaussian bump in velocity."""

    def phi(x, v):
        u = np.zeros(v.shape[-1])
        u[0] = shift
        out = 1.0 + np.exp(-0.5 * np.sum((v - u) ** 2, axis=-1))
        return np.broadcast_to(out, np.broadcast_shapes(x.shape, v.shape)[:-1])

    def mass(beta, dim):
        return 1.0 + (beta / (beta + 1)) ** (dim / 2) * math.exp(-beta * shift**2 / (2 * (beta + 1)))

    return Perturbation("gauss-shift", phi, bound=2.0, mass_fn=mass, grid_fn=lambda dim: _x1_grid(dim, 4))


PRESETS: dict[str, Callable[[], Perturbation]] = {
    "uniform": uniform_perturbation,
    "cosine": cosine_perturbation,
    "gauss-shift": gauss_shift_perturbation,
}


def perturbation_preset(name: str) -> Perturbation:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ContractError(f"unknown perturbation preset {name!r}; choose from {sorted(PRESETS)}") from None


def log_initial_density(state: SystemState, params: ScalingParams, phi0: Perturbation) -> float:
    if not exclusion_ok(state.x, params.epsilon):
        return -math.inf
    tagged = state.tags == 1
    n_tagged = int(tagged.sum())
    if n_tagged and params.lam == 0:
        return -math.inf
    out = n_tagged * math.log(params.lam) if n_tagged else 0.0
    out += (state.n - n_tagged) * math.log(params.mu)
    out += float(np.sum(np.log(maxwellian(state.v, params.beta)))) if state.n else 0.0
    if n_tagged:
        vals = phi0(state.x[tagged], state.v[tagged])
        if np.any(vals <= 0):
            return -math.inf
        out += float(np.sum(np.log(vals)))
    return out


def initial_density_unnormalized(state: SystemState, params: ScalingParams, phi0: Perturbation) -> float:
    """lam^|tagged| mu^(n-|tagged|) prod M(v_i) prod_tagged phi0(z_i) times the exclusion indicator."""
    return math.exp(log_initial_density(state, params, phi0))


class GrandCanonicalSampler:
    """Exact sampler of the mixture law by whole-configuration rejection.

    Proposals are independent Poisson clouds: mu background particles, uniform
    in space with Maxwellian velocities, and lam*m tagged ones drawn from
    M_beta*phi0/m, where m is the phase-space mass of M_beta*phi0. The proposal
    already carries the product density, so a configuration is accepted iff it
    satisfies the exclusion condition and the acceptance probability equals
    Z / exp(mu + lam*m).
    """

    def __init__(self, params: ScalingParams, phi0: Perturbation, max_rounds: int = MAX_REJECTION_ROUNDS):
        if phi0.signed:
            raise ContractError("sampling requires a nonnegative perturbation")
        self.params = params
        self.phi0 = phi0
        self.max_rounds = max_rounds
        self.tagged_mass = phi0.mass(params.beta, params.dim) if params.lam > 0 else 0.0
        self.proposal_mass = params.mu + params.lam * self.tagged_mass
        if params.mu + params.lam * phi0.bound > MAX_PROPOSAL_MASS:
            raise CapExceeded("ensemble", f"expected particle count {self.proposal_mass:.1f} exceeds {MAX_PROPOSAL_MASS:g}")
        self.rounds = 0
        self.accepted = 0

    @property
    def reference_normalization(self) -> float:
        return math.exp(self.proposal_mass)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.rounds if self.rounds else float("nan")

    def partition_estimate(self) -> tuple[float, float]:
        """Z implied by the acceptance bookkeeping, with a binomial std error."""
        p = self.acceptance_rate
        return self.reference_normalization * p, self.reference_normalization * math.sqrt(p * (1 - p) / self.rounds)

    def sample(self, rng: np.random.Generator) -> SystemState:
        p = self.params
        for _ in range(self.max_rounds):
            self.rounds += 1
            n0 = rng.poisson(p.mu)
            n1 = rng.poisson(p.lam * self.tagged_mass) if self.tagged_mass > 0 else 0
            n = n0 + n1
            x = rng.random((n, p.dim))
            v = sample_maxwellian(p.beta, p.dim, rng, size=n)
            if n1:
                x[n0:], v[n0:] = sample_tagged(self.phi0, p.beta, p.dim, n1, rng)
            if not exclusion_ok(x, p.epsilon):
                continue
            self.accepted += 1
            tags = np.zeros(n, dtype=np.int8)
            tags[n0:] = 1
            order = rng.permutation(n)
            return SystemState(0.0, x[order], v[order], tags[order])
        raise CapExceeded("ensemble", f"no configuration accepted in {self.max_rounds} rejection rounds")


def sample_initial_state(params: ScalingParams, phi0: Perturbation, rng: np.random.Generator) -> SystemState:
    return GrandCanonicalSampler(params, phi0).sample(rng)


def sample_tagged(phi0: Perturbation, beta: float, dim: int, count: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Independent draws from the normalised density M_beta * phi0 by rejection."""
    xs, vs = [], []
    have = 0
    while have < count:
        batch = max(16, 2 * (count - have))
        x = rng.random((batch, dim))
        v = sample_maxwellian(beta, dim, rng, size=batch)
        keep = rng.random(batch) * phi0.bound < phi0(x, v)
        xs.append(x[keep])
        vs.append(v[keep])
        have += int(keep.sum())
    return np.concatenate(xs)[:count], np.concatenate(vs)[:count]


def estimate_partition_function(params: ScalingParams, phi0: Perturbation, samples: int,
                                rng: np.random.Generator) -> tuple[float, float]:
    """Importance-sampling estimate of the grand-canonical partition function.

    The reference is the non-interacting mixture: Poisson(mu) uniform background
    particles and Poisson(lam * m) tagged particles drawn from M*phi0/m, where m
    is the phase-space mass of M*phi0. Its normalisation is exp(mu + lam*m) and
    the estimator averages the exclusion indicator under it.
    """
    if samples < 2:
        raise ContractError("samples must be at least 2")
    if params.mu + params.lam * phi0.bound > MAX_PARTITION_MASS:
        raise CapExceeded("ensemble", f"mu + lam*B exceeds {MAX_PARTITION_MASS:g}")
    mass = phi0.mass(params.beta, params.dim) if params.lam > 0 else 0.0
    n0 = rng.poisson(params.mu, size=samples)
    n1 = rng.poisson(params.lam * mass, size=samples) if mass > 0 else np.zeros(samples, dtype=int)
    hits = np.zeros(samples)
    pairs = np.stack([n0, n1], axis=1)
    for a, b in np.unique(pairs, axis=0):
        idx = np.flatnonzero((n0 == a) & (n1 == b))
        x = rng.random((idx.size, a + b, params.dim))
        if b:
            xt, _ = sample_tagged(phi0, params.beta, params.dim, idx.size * b, rng)
            x[:, a:, :] = xt.reshape(idx.size, b, params.dim)
        hits[idx] = exclusion_ok_batch(x, params.epsilon)
    norm = math.exp(params.mu + params.lam * mass)
    return norm * hits.mean(), norm * hits.std(ddof=1) / math.sqrt(samples)


@dataclass(frozen=True)
class C0Constant:
    value: float
    terms: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __float__(self) -> float:
        return self.value


def c0_velocity_grid(beta: float, dim: int, points: int = 201) -> np.ndarray:
    axis = np.linspace(-6 / math.sqrt(beta), 6 / math.sqrt(beta), points)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def compute_c0(phi0: Perturbation, beta: float, dim: int, points: int = 201) -> C0Constant:
    """Largest of the three weighted sups of M_beta and M_beta*phi0, taken on a grid.

    The terms are sup M e^{beta|v|^2/2}, sup |M phi0| e^{beta|v|^2/4} and
    sup |M phi0| / sqrt(M_{beta/2}).
    """
    v = c0_velocity_grid(beta, dim, points)
    sq = np.sum(v * v, axis=-1)
    m = maxwellian(v, beta)
    first = float(np.max(m * np.exp(0.5 * beta * sq)))
    w2 = m * np.exp(0.25 * beta * sq)
    w3 = m / np.sqrt(maxwellian(v, beta / 2))
    second = third = 0.0
    for x in phi0.position_grid(dim):
        phi = np.abs(phi0(x[None, :], v))
        second = max(second, float(np.max(w2 * phi)))
        third = max(third, float(np.max(w3 * phi)))
    return C0Constant(max(first, second, third), (first, second, third))
