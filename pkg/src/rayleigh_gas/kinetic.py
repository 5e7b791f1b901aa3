"""Linear Boltzmann equation for a test particle in a Maxwellian background.

Two solvers: a Monte Carlo jump process (free flight interrupted by collisions
with background partners) and a discrete-velocity grid solver in two dimensions
with Fourier modes along the first coordinate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import erf, gammaln, ive

from .core import (CapExceeded, ContractError, ScalingParams, ball_volume, maxwellian, sample_maxwellian,
                   sample_sphere, scatter, wrap)
from .ensemble import Perturbation

MAX_SAMPLER_TRIALS = 10**6
THINNING_MARGIN = 1.1


def hemisphere_factor(dim: int) -> float:
    """Integral over the unit sphere of the positive part of one coordinate."""
    return ball_volume(dim - 1)


def mean_speed(beta: float, dim: int) -> float:
    """Mean of |v| under M_beta."""
    return math.sqrt(2 / beta) * math.exp(gammaln((dim + 1) / 2) - gammaln(dim / 2))


def collision_rate(v, beta: float, dim: int | None = None) -> np.ndarray:
    """Total rate of collisions with background partners for a particle of velocity v.

    The angular integral of the cross section gives hemisphere_factor(dim)*|v_c - v|,
    and the mean distance of a Gaussian from a point has a closed form in terms
    of Bessel functions (d=2) or the error function (d=3).
    """
    v = np.asarray(v, dtype=float)
    dim = v.shape[-1] if dim is None else dim
    sigma = 1 / math.sqrt(beta)
    a = np.linalg.norm(v, axis=-1) / sigma
    if dim == 2:
        y = a * a / 4
        mean = sigma * math.sqrt(math.pi / 2) * ((1 + 2 * y) * ive(0, y) + 2 * y * ive(1, y))
    elif dim == 3:
        small = a < 1e-4
        safe = np.where(small, 1.0, a)
        big = sigma * (math.sqrt(2 / math.pi) * np.exp(-safe**2 / 2) + (safe + 1 / safe) * erf(safe / math.sqrt(2)))
        series = sigma * math.sqrt(2 / math.pi) * (2 + a * a / 3)
        mean = np.where(small, series, big)
    else:
        raise ContractError(f"dim must be 2 or 3, got {dim}")
    return hemisphere_factor(dim) * mean


def envelope_rate(v, beta: float, dim: int | None = None) -> np.ndarray:
    """Rate of the proposal used by the collision sampler; it dominates collision_rate."""
    v = np.asarray(v, dtype=float)
    dim = v.shape[-1] if dim is None else dim
    return hemisphere_factor(dim) * (np.linalg.norm(v, axis=-1) + mean_speed(beta, dim))


def _cosine_weighted_direction(u_hat: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors with density proportional to <omega, u_hat>_+ on the sphere."""
    n, dim = u_hat.shape
    if dim == 2:
        theta = np.arcsin(2 * rng.random(n) - 1)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([c * u_hat[:, 0] - s * u_hat[:, 1], s * u_hat[:, 0] + c * u_hat[:, 1]], axis=-1)
    cos_t = np.sqrt(rng.random(n))
    sin_t = np.sqrt(1 - cos_t**2)
    phi = 2 * np.pi * rng.random(n)
    helper = np.where(np.abs(u_hat[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
    e1 = np.cross(u_hat, helper)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    e2 = np.cross(u_hat, e1)
    return (cos_t[:, None] * u_hat + (sin_t * np.cos(phi))[:, None] * e1 + (sin_t * np.sin(phi))[:, None] * e2)


def sample_collisions(v: np.ndarray, beta: float, rng: np.random.Generator,
                      max_trials: int = MAX_SAMPLER_TRIALS) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Draw (v_star, omega, v_c) for each row of v, with (v_c, omega) ~ M(v_c)<omega, v_c - v>_+.

    Partner velocities are proposed from the mixture proportional to
    M(v_c)(|v| + |v_c|) and accepted with probability |v_c - v|/(|v| + |v_c|);
    omega is then drawn exactly from the cosine law around v_c - v.
    Returns the samples and the number of proposals used.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n, dim = v.shape
    speed = np.linalg.norm(v, axis=-1)
    m1 = mean_speed(beta, dim)
    v_c = np.empty_like(v)
    todo = np.arange(n)
    trials = 0
    while todo.size:
        if trials >= max_trials * max(n, 1):
            raise CapExceeded("kinetic", f"collision sampler exceeded {max_trials} trials per draw")
        k = todo.size
        trials += k
        plain = rng.random(k) * (speed[todo] + m1) < speed[todo]
        prop = sample_maxwellian(beta, dim, rng, size=k)
        radius = np.sqrt(rng.chisquare(dim + 1, size=k) / beta)
        biased = sample_sphere(dim, rng, size=k) * radius[:, None]
        prop = np.where(plain[:, None], prop, biased)
        rel = np.linalg.norm(prop - v[todo], axis=-1)
        accept = rng.random(k) * (speed[todo] + np.linalg.norm(prop, axis=-1)) < rel
        v_c[todo[accept]] = prop[accept]
        todo = todo[~accept]
    u = v_c - v
    omega = _cosine_weighted_direction(u / np.linalg.norm(u, axis=-1, keepdims=True), rng)
    v_star, _ = scatter(v, v_c, omega)
    return v_star, omega, v_c, trials


def sample_collision(v, beta: float, dim: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float).reshape(1, dim)
    v_star, omega, v_c, _ = sample_collisions(v, beta, rng)
    return v_star[0], omega[0], v_c[0]


@dataclass
class TestTrajectory:
    """Jump times and the (position, velocity) held from each jump to the next."""

    jump_times: list[float] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    velocities: list[np.ndarray] = field(default_factory=list)
    end_time: float = 0.0

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        k = int(np.searchsorted(self.jump_times, t, side="right"))
        start = self.jump_times[k - 1] if k else 0.0
        return wrap(self.positions[k] + (t - start) * self.velocities[k]), self.velocities[k]

    @property
    def final(self) -> tuple[np.ndarray, np.ndarray]:
        return self.state_at(self.end_time)

    def to_csv(self, path) -> Path:
        path = Path(path)
        dim = len(self.velocities[0])
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time"] + [f"x_{k}" for k in range(dim)] + [f"v_{k}" for k in range(dim)])
            for t, x, v in zip([0.0] + self.jump_times, self.positions, self.velocities):
                writer.writerow([repr(float(t))] + [repr(float(c)) for c in (*x, *v)])
        return path


def thinning_rate(speed, beta: float, dim: int) -> np.ndarray:
    """Majorant of the collision rate used for thinning; covers the ball |v| <= 8/sqrt(beta)."""
    reach = np.maximum(np.asarray(speed, dtype=float), 8 / math.sqrt(beta))
    probe = np.zeros(reach.shape + (dim,))
    probe[..., 0] = reach
    return THINNING_MARGIN * collision_rate(probe, beta, dim)


def simulate_test_particle(z0, t: float, params: ScalingParams, rng: np.random.Generator) -> TestTrajectory:
    x0, v0 = (np.asarray(a, dtype=float) for a in z0)
    if t < 0:
        raise ContractError("t must be nonnegative")
    beta, dim = params.beta, params.dim
    traj = TestTrajectory(positions=[wrap(x0)], velocities=[v0.copy()], end_time=t)
    now, x, v = 0.0, wrap(x0), v0.copy()
    bound = float(thinning_rate(np.linalg.norm(v), beta, dim))
    while True:
        step = rng.exponential(1 / bound)
        if now + step >= t:
            break
        now += step
        x = wrap(x + step * v)
        if rng.random() * bound >= float(collision_rate(v, beta, dim)):
            continue
        v = sample_collision(v, beta, dim, rng)[0]
        bound = float(thinning_rate(np.linalg.norm(v), beta, dim))
        traj.jump_times.append(now)
        traj.positions.append(x.copy())
        traj.velocities.append(v.copy())
    return traj


def simulate_test_particles(x0: np.ndarray, v0: np.ndarray, t: float, beta: float,
                            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised jump process for many independent test particles.

    Returns final positions, final velocities and per-particle jump counts.
    """
    x = wrap(np.array(x0, dtype=float))
    v = np.array(v0, dtype=float)
    n, dim = v.shape
    jumps = np.zeros(n, dtype=int)
    clock = np.zeros(n)
    bound = thinning_rate(np.linalg.norm(v, axis=-1), beta, dim)
    active = np.arange(n)
    while active.size:
        step = rng.exponential(1 / bound[active])
        done = clock[active] + step >= t
        fin = active[done]
        x[fin] = wrap(x[fin] + (t - clock[fin])[:, None] * v[fin])
        clock[fin] = t
        active, step = active[~done], step[~done]
        if not active.size:
            break
        x[active] = wrap(x[active] + step[:, None] * v[active])
        clock[active] += step
        real = rng.random(active.size) * bound[active] < collision_rate(v[active], beta, dim)
        hit = active[real]
        if hit.size:
            v[hit] = sample_collisions(v[hit], beta, rng)[0]
            jumps[hit] += 1
            bound[hit] = thinning_rate(np.linalg.norm(v[hit], axis=-1), beta, dim)
    return x, v, jumps


@dataclass(frozen=True)
class VelocityGrid:
    """Cell-centred uniform lattice on [-v_max, v_max]^2 with equal weights."""

    n_per_axis: int
    v_max: float

    @classmethod
    def for_beta(cls, beta: float, n_per_axis: int = 48) -> "VelocityGrid":
        return cls(n_per_axis, 6 / math.sqrt(beta))

    @property
    def spacing(self) -> float:
        return 2 * self.v_max / self.n_per_axis

    @property
    def axis(self) -> np.ndarray:
        return -self.v_max + (np.arange(self.n_per_axis) + 0.5) * self.spacing

    @property
    def nodes(self) -> np.ndarray:
        a, b = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=-1)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n_per_axis**2, self.spacing**2)

    def maxwellian_mass(self, beta: float) -> float:
        return float(np.sum(self.weights * maxwellian(self.nodes, beta)))


def _bilinear(grid: VelocityGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat node indices and weights of the four cloud-in-cell neighbours of each point."""
    h = grid.spacing
    n = grid.n_per_axis
    s = (points + grid.v_max) / h - 0.5
    base = np.floor(s).astype(int)
    frac = s - base
    idx, wts = [], []
    for dx in (0, 1):
        for dy in (0, 1):
            ix = base[:, 0] + dx
            iy = base[:, 1] + dy
            w = (frac[:, 0] if dx else 1 - frac[:, 0]) * (frac[:, 1] if dy else 1 - frac[:, 1])
            ok = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
            idx.append(np.where(ok, ix * n + iy, 0))
            wts.append(np.where(ok, w, 0.0))
    return np.concatenate(idx), np.concatenate(wts)


def _collision_quadrature(radius: float, n_r: int = 24, n_psi: int = 32, n_theta: int = 12):
    """Nodes in (relative speed, relative direction, deflection) with the cross-section Jacobian."""
    r, wr = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (r + 1)
    wr = 0.5 * radius * wr
    psi = 2 * np.pi * np.arange(n_psi) / n_psi
    wpsi = np.full(n_psi, 2 * np.pi / n_psi)
    th, wth = np.polynomial.legendre.leggauss(n_theta)
    th = 0.5 * np.pi * th
    wth = 0.5 * np.pi * wth
    R, P, T = np.meshgrid(r, psi, th, indexing="ij")
    W = np.einsum("i,j,k->ijk", wr, wpsi, wth) * R * R * np.cos(T)
    return R.ravel(), P.ravel(), T.ravel(), W.ravel()


@lru_cache(maxsize=8)
def collision_matrix(grid: VelocityGrid, beta: float) -> np.ndarray:
    """Matrix of the linear collision operator on grid values of phi.

    Built as a symmetric equilibrium flux B between cells (gain deposited by
    cloud-in-cell weights), with the loss on the diagonal set so that every row
    of B sums to zero. Hence A = B / (M w) conserves the M-weighted mass,
    annihilates constants and is self-adjoint and nonpositive in L^2(M w).
    """
    nodes = grid.nodes
    nv = nodes.shape[0]
    mw = maxwellian(nodes, beta) * grid.weights
    reach = grid.v_max * math.sqrt(2) + 9 / math.sqrt(beta)
    R, P, T, W = _collision_quadrature(reach)
    u_hat = np.stack([np.cos(P), np.sin(P)], axis=-1)
    omega = np.stack([np.cos(P + T), np.sin(P + T)], axis=-1)
    jump = (R * np.cos(T))[:, None] * omega
    u = R[:, None] * u_hat
    flux = np.zeros((nv, nv))
    for i in range(nv):
        if mw[i] < 1e-300:
            continue
        q = W * maxwellian(nodes[i] + u, beta)
        keep = q > 1e-16 * q.max()
        idx, wts = _bilinear(grid, nodes[i] + jump[keep])
        flux[i] = mw[i] * np.bincount(idx, weights=np.tile(q[keep], 4) * wts, minlength=nv)
    flux = 0.5 * (flux + flux.T)
    np.fill_diagonal(flux, 0.0)
    flux[np.diag_indices(nv)] = -flux.sum(axis=1)
    safe = np.where(mw > 1e-300, mw, 1.0)
    return flux / safe[:, None]


@dataclass
class RBGridSolution:
    """Fourier coefficients in x_1 of the solution on the velocity grid.

    ``coeffs[k, m, i]`` is the coefficient of exp(2 pi i m x_1) at time
    ``times[k]`` and node i, for m = 0..M; negative modes are conjugates.
    """

    grid: VelocityGrid
    beta: float
    times: np.ndarray
    coeffs: np.ndarray

    def _index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-12:
            raise ContractError(f"time {t} not stored; available {self.times.tolist()}")
        return k

    def values(self, t: float, x1) -> np.ndarray:
        """phi(t, x1, v_i) on all nodes, shape (len(x1), nodes)."""
        c = self.coeffs[self._index(t)]
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        m = np.arange(c.shape[0])
        phase = np.exp(2j * np.pi * np.outer(x1, m))
        scale = np.where(m == 0, 1.0, 2.0)
        return np.real((phase * scale) @ c)

    def mass(self, t: float) -> float:
        mw = maxwellian(self.grid.nodes, self.beta) * self.grid.weights
        return float(np.real(self.coeffs[self._index(t), 0] @ mw))

    def cos_moment(self, t: float) -> float:
        """Integral of M phi(t) cos(2 pi x_1) over phase space."""
        mw = maxwellian(self.grid.nodes, self.beta) * self.grid.weights
        c = self.coeffs[self._index(t)]
        return float(np.real(c[1] @ mw)) if c.shape[0] > 1 else 0.0

    def position_density(self, t: float, x1) -> np.ndarray:
        mw = maxwellian(self.grid.nodes, self.beta) * self.grid.weights
        return self.values(t, x1) @ mw

    def bin_integrals(self, t: float, edges: np.ndarray) -> np.ndarray:
        """Integral of M phi(t) over slabs edges[k] <= x_1 < edges[k+1]."""
        mw = maxwellian(self.grid.nodes, self.beta) * self.grid.weights
        c = self.coeffs[self._index(t)] @ mw
        edges = np.asarray(edges, dtype=float)
        out = np.real(c[0]) * np.diff(edges)
        for m in range(1, c.shape[0]):
            prim = np.exp(2j * np.pi * m * edges) / (2j * np.pi * m)
            out = out + 2 * np.real(c[m] * np.diff(prim))
        return out

    def sup_norms(self, t: float, x_points: int = 64) -> tuple[float, float]:
        """Plain sup of |phi(t)| and the sup weighted by exp(-beta |v|^2 / 4) (the M_{beta/2} weight)."""
        x1 = np.arange(x_points) / x_points
        vals = np.abs(self.values(t, x1))
        weight = np.exp(-0.25 * self.beta * np.sum(self.grid.nodes**2, axis=-1))
        return float(vals.max()), float((vals * weight).max())

    def expectation(self, t: float, H, x_points: int = 64) -> float:
        """Integral of M phi(t) H over phase space for H(x, v, tag) with tag 1."""
        mw = maxwellian(self.grid.nodes, self.beta) * self.grid.weights
        x1 = (np.arange(x_points) + 0.5) / x_points
        vals = self.values(t, x1)
        nodes = self.grid.nodes
        xs = np.zeros((x_points, nodes.shape[0], 2))
        xs[..., 0] = x1[:, None]
        xs[..., 1] = 0.5
        hv = H(xs, np.broadcast_to(nodes, xs.shape), np.ones(xs.shape[:-1], dtype=np.int8))
        return float(np.mean((vals * hv) @ mw))

    def to_csv(self, path) -> Path:
        path = Path(path)
        nodes = self.grid.nodes
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "v_0", "v_1", "mode", "re", "im"])
            for k, t in enumerate(self.times):
                for m in range(self.coeffs.shape[1]):
                    for i in range(nodes.shape[0]):
                        c = self.coeffs[k, m, i]
                        writer.writerow([repr(float(t)), repr(float(nodes[i, 0])), repr(float(nodes[i, 1])), m,
                                         repr(float(c.real)), repr(float(c.imag))])
        return path


def project_modes(phi0: Perturbation, grid: VelocityGrid, space_modes: int, samples: int = 64) -> np.ndarray:
    """Fourier coefficients in x_1 (other coordinates at 0) of phi0 on the velocity nodes."""
    x1 = np.arange(samples) / samples
    nodes = grid.nodes
    xs = np.zeros((samples, nodes.shape[0], 2))
    xs[..., 0] = x1[:, None]
    vals = phi0(xs, np.broadcast_to(nodes, xs.shape))
    coeffs = np.fft.fft(vals, axis=0) / samples
    return coeffs[: space_modes + 1]


def solve_rb_grid(phi0: Perturbation, t, beta: float, grid: VelocityGrid, space_modes: int = 1,
                  growth_limit: float = 10.0) -> RBGridSolution:
    """Integrate the linear Boltzmann equation on the grid up to each requested time.

    Transport acts diagonally on each Fourier mode and is integrated exactly;
    the collision part uses the classical fourth-order Runge-Kutta scheme in the
    integrating-factor (Lawson) form with dt <= 0.5 / max rate.
    """
    times = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(times < 0) or np.any(times > 10):
        raise ContractError("times must lie in [0, 10]")
    A = collision_matrix(grid, beta)
    rate_max = float(np.max(-np.diag(A)))
    dt_max = 0.5 / rate_max
    mw = maxwellian(grid.nodes, beta) * grid.weights
    u = project_modes(phi0, grid, space_modes).astype(complex)
    m = np.arange(space_modes + 1)
    drift = -2j * np.pi * np.outer(m, grid.nodes[:, 0])

    At = np.ascontiguousarray(A.T)

    def apply(w):
        return (w.real @ At) + 1j * (w.imag @ At)

    def norm(w):
        return math.sqrt(float(np.sum(np.abs(w) ** 2 @ mw)))

    start_norm = max(norm(u), 1e-300)
    order = np.argsort(times)
    out = np.empty((len(times),) + u.shape, dtype=complex)
    now = 0.0
    for k in order:
        target = times[k]
        steps = max(1, math.ceil((target - now) / dt_max - 1e-12)) if target > now else 0
        h = (target - now) / steps if steps else 0.0
        for _ in range(steps):
            e1 = np.exp(drift * h)
            e2 = np.exp(drift * h / 2)
            n1 = apply(u)
            a = e2 * (u + 0.5 * h * n1)
            n2 = apply(a)
            b = e2 * u + 0.5 * h * n2
            n3 = apply(b)
            c = e1 * u + h * e2 * n3
            n4 = apply(c)
            u = e1 * u + h / 6 * (e1 * n1 + 2 * e2 * (n2 + n3) + n4)
            now += h
            if norm(u) > growth_limit * start_norm:
                raise ArithmeticError("grid solver unstable: norm grew beyond the limit")
        now = target
        out[k] = u
    return RBGridSolution(grid, beta, times, out)


def first_duhamel_iterate(phi0: Perturbation, x, v, t: float, beta: float,
                          n_t: int = 16, n_r: int = 48, n_psi: int = 64, n_theta: int = 24) -> float:
    """First collision term of the Duhamel series for phi at the phase point (x, v), d = 2.

    Integral over the collision time t1, partner velocity and deflection of
    M(v_c) <omega, v_c - v>_+ [phi0(free-flowed, v*) - phi0(free-flowed, v)],
    with phi0 transported freely between collisions. Computed by tensor Gauss
    rules in polar coordinates around v, where the integrand is smooth.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.shape != (2,) or v.shape != (2,):
        raise ContractError("first_duhamel_iterate is implemented for d = 2")
    s, ws = np.polynomial.legendre.leggauss(n_t)
    t1 = 0.5 * t * (s + 1)
    wt = 0.5 * t * ws
    radius = float(np.linalg.norm(v)) + 10 / math.sqrt(beta)
    R, P, T, W = _collision_quadrature(radius, n_r, n_psi, n_theta)
    u = R[:, None] * np.stack([np.cos(P), np.sin(P)], axis=-1)
    omega = np.stack([np.cos(P + T), np.sin(P + T)], axis=-1)
    v_star = v + (R * np.cos(T))[:, None] * omega
    base = W * maxwellian(v + u, beta)
    total = 0.0
    for tk, wk in zip(t1, wt):
        gain = phi0(wrap(x - (t - tk) * v - tk * v_star), v_star)
        loss = phi0(wrap(x - t * v), v)
        total += wk * float(np.sum(base * (gain - loss)))
    return total
