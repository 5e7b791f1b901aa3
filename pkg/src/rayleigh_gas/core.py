"""Torus geometry, Maxwellian sampling, elastic scattering and hard-sphere exclusion."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from scipy.special import gamma


class ContractError(ValueError):
    """Raised when an input violates an operation's precondition."""


class CapExceeded(RuntimeError):
    """Raised when a declared resource cap (rejection rounds, event count, ...) is hit."""

    def __init__(self, module: str, message: str):
        super().__init__(f"{module}: {message}")
        self.module = module


def ball_volume(dim: int) -> float:
    """Volume of the unit ball in R^dim."""
    return math.pi ** (dim / 2) / gamma(dim / 2 + 1)


def sphere_area(dim: int) -> float:
    """Surface measure of the unit sphere S^{dim-1}."""
    return dim * ball_volume(dim)


@dataclass(frozen=True)
class ScalingParams:
    """Diameter, fugacities, temperature and dimension of the mixture.

    The background fugacity is tied to the diameter by mu * epsilon**(dim-1) = 1.
    ``decoupled`` builds a parameter set where mu is free (used for small
    closed-form checks); such sets carry ``scaled=False``.
    """

    epsilon: float
    lam: float = 0.0
    beta: float = 1.0
    dim: int = 2
    mu: float = field(default=float("nan"))
    scaled: bool = True

    def __post_init__(self):
        errors = []
        if self.dim not in (2, 3):
            errors.append(f"dim must be 2 or 3, got {self.dim}")
        if not self.beta > 0:
            errors.append(f"beta must be positive, got {self.beta}")
        if not self.lam >= 0:
            errors.append(f"lam must be nonnegative, got {self.lam}")
        if self.scaled:
            if not 0 < self.epsilon < 0.25:
                errors.append(f"epsilon must lie in (0, 1/4), got {self.epsilon}")
            elif not errors:
                object.__setattr__(self, "mu", self.epsilon ** (1 - self.dim))
        else:
            if not 0 <= self.epsilon < 0.25:
                errors.append(f"epsilon must lie in [0, 1/4), got {self.epsilon}")
            if not self.mu > 0:
                errors.append(f"mu must be positive, got {self.mu}")
        if not errors and not self.lam < self.mu:
            errors.append(f"lam must be strictly below mu={self.mu}, got {self.lam}")
        if errors:
            raise ContractError("; ".join(errors))

    @classmethod
    def from_mu(cls, mu: float, lam: float = 0.0, beta: float = 1.0, dim: int = 2) -> "ScalingParams":
        """Pick epsilon so that the scaling relation gives the requested mu."""
        return cls(epsilon=mu ** (-1.0 / (dim - 1)), lam=lam, beta=beta, dim=dim)

    @classmethod
    def decoupled(cls, epsilon: float, mu: float, lam: float = 0.0, beta: float = 1.0,
                  dim: int = 2) -> "ScalingParams":
        return cls(epsilon=epsilon, lam=lam, beta=beta, dim=dim, mu=mu, scaled=False)

    @property
    def p_mu(self) -> float:
        return self.lam / self.mu


class ParticleState(NamedTuple):
    x: np.ndarray
    v: np.ndarray
    tag: int


@dataclass(frozen=True)
class SystemState:
    """Particles at a common time, stored column-wise.

    ``x`` has shape (n, dim) with entries in [0, 1), ``v`` shape (n, dim)
    and ``tags`` shape (n,) with values in {0, 1}.
    """

    time: float
    x: np.ndarray
    v: np.ndarray
    tags: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float, ndmin=2)
        v = np.array(self.v, dtype=float, ndmin=2)
        tags = np.array(self.tags, dtype=np.int8, ndmin=1)
        if x.size == 0:
            dim = x.shape[-1] or v.shape[-1] or 2
            x = x.reshape(0, dim)
            v = v.reshape(0, dim)
            tags = tags.reshape(0)
        if x.shape != v.shape or tags.shape != (x.shape[0],):
            raise ContractError(f"inconsistent shapes x{x.shape} v{v.shape} tags{tags.shape}")
        if np.any((x < 0) | (x >= 1)):
            raise ContractError("positions must lie in [0, 1)")
        if np.any((tags != 0) & (tags != 1)):
            raise ContractError("tags must be 0 or 1")
        for name, arr in (("x", x), ("v", v), ("tags", tags)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @classmethod
    def from_particles(cls, time: float, particles: list[ParticleState], dim: int = 2) -> "SystemState":
        if not particles:
            return cls(time, np.zeros((0, dim)), np.zeros((0, dim)), np.zeros(0, dtype=np.int8))
        return cls(time, np.array([p.x for p in particles]), np.array([p.v for p in particles]),
                   np.array([p.tag for p in particles]))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def particles(self) -> list[ParticleState]:
        return [ParticleState(self.x[i].copy(), self.v[i].copy(), int(self.tags[i])) for i in range(self.n)]

    def __iter__(self) -> Iterator[ParticleState]:
        return iter(self.particles)

    def replace(self, **changes) -> "SystemState":
        fields = {"time": self.time, "x": self.x, "v": self.v, "tags": self.tags}
        fields.update(changes)
        return SystemState(**fields)

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.v ** 2))

    def momentum(self) -> np.ndarray:
        return self.v.sum(axis=0)

    def is_physical(self, epsilon: float) -> bool:
        return exclusion_ok(self.x, epsilon)


def wrap(x: np.ndarray) -> np.ndarray:
    """Reduce coordinates to [0, 1), guarding against x % 1 rounding up to 1."""
    y = np.mod(x, 1.0)
    return np.where(y >= 1.0, 0.0, y)


def minimal_image(d: np.ndarray) -> np.ndarray:
    """Representative of a displacement with each component in [-1/2, 1/2)."""
    r = np.mod(np.asarray(d, dtype=float) + 0.5, 1.0) - 0.5
    return np.where(r >= 0.5, r - 1.0, r)


def torus_displacement(x1, x2, dim: int | None = None) -> np.ndarray:
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if dim is not None and x1.shape[-1] != dim:
        raise ContractError(f"expected {dim} coordinates, got {x1.shape[-1]}")
    return minimal_image(x1 - x2)


def torus_distance(x1, x2) -> np.ndarray:
    return np.linalg.norm(torus_displacement(x1, x2), axis=-1)


def scatter(v_i, v_j, omega) -> tuple[np.ndarray, np.ndarray]:
    """Post-collisional velocities for a pair with contact direction ``omega``.

    Accepts single vectors or stacks of them along the leading axes.
    """
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    omega = np.asarray(omega, dtype=float)
    norm = np.linalg.norm(omega, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-12):
        raise ContractError("omega must be a unit vector")
    transfer = np.sum((v_i - v_j) * omega, axis=-1, keepdims=True) * omega
    return v_i - transfer, v_j + transfer


def maxwellian(v, beta: float) -> np.ndarray:
    """Density of the centered Gaussian with covariance I/beta, evaluated on the last axis."""
    v = np.asarray(v, dtype=float)
    dim = v.shape[-1]
    return (beta / (2 * np.pi)) ** (dim / 2) * np.exp(-0.5 * beta * np.sum(v * v, axis=-1))


def sample_maxwellian(beta: float, dim: int, rng: np.random.Generator, size=None) -> np.ndarray:
    if not beta > 0:
        raise ContractError(f"beta must be positive, got {beta}")
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    return rng.normal(scale=1 / math.sqrt(beta), size=shape)


def sample_sphere(dim: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform unit vectors on S^{dim-1}."""
    shape = (dim,) if size is None else tuple(np.atleast_1d(size)) + (dim,)
    g = rng.normal(size=shape)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def pair_distances(positions) -> np.ndarray:
    """Condensed vector of torus distances over pairs i < j."""
    x = np.asarray(positions, dtype=float)
    if x.shape[0] < 2:
        return np.zeros(0)
    i, j = np.triu_indices(x.shape[0], k=1)
    return np.linalg.norm(minimal_image(x[i] - x[j]), axis=-1)


def exclusion_ok(positions, epsilon: float) -> bool:
    x = np.asarray(positions, dtype=float)
    if x.ndim < 2 or x.shape[0] < 2:
        return True
    n = x.shape[0]
    if n <= 2000:
        return bool(np.all(pair_distances(x) > epsilon))
    for i in range(n - 1):
        d = np.linalg.norm(minimal_image(x[i] - x[i + 1:]), axis=-1)
        if np.any(d <= epsilon):
            return False
    return True


def exclusion_ok_batch(positions: np.ndarray, epsilon: float) -> np.ndarray:
    """Vectorised exclusion test for a stack of configurations of shape (S, n, dim)."""
    x = np.asarray(positions, dtype=float)
    if x.shape[1] < 2:
        return np.ones(x.shape[0], dtype=bool)
    i, j = np.triu_indices(x.shape[1], k=1)
    d = np.linalg.norm(minimal_image(x[:, i] - x[:, j]), axis=-1)
    return np.all(d > epsilon, axis=1)


def derive_stream(master: int, module: str, index: int = 0) -> np.random.Generator:
    """Independent generator for (master seed, module name, index).

    The triple is fed to SeedSequence with the module name reduced by CRC-32,
    so streams are stable across runs and platforms.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master) & (2**64 - 1), zlib.crc32(module.encode()),
                                                         int(index)]))
