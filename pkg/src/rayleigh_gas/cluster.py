"""Exclusion cumulants, tree sums and cluster-expansion estimates of the partition function.

Vertices are numbered from 0. Two positions "overlap" when their torus
distance is at most epsilon; the exclusion indicator of a configuration is
the product over pairs of (1 - overlap).
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from scipy.stats import poisson

from .core import (ContractError, ScalingParams, ball_volume, exclusion_ok_batch, minimal_image,
                   sample_maxwellian, wrap)
from .ensemble import Perturbation, compute_c0

GRAPH_ORDER_CAP = 6
GRAPH_ORDER_OVERRIDE_CAP = 7
TREE_ORDER_CAP = 9
SERIES_ORDER_CAP = 10
SERIES_MU_CAP = 2.0
SERIES_LAM_CAP = 1.0
CUMULANT_ORDER_CAP = 5
# Declared reporting constant for the quotient bound, per dimension.
QUOTIENT_BASE = {2: 4.0, 3: 4.0}


@dataclass(frozen=True)
class LabeledGraph:
    k: int
    edges: frozenset

    def __post_init__(self):
        for i, j in self.edges:
            if i == j or not (0 <= i < self.k and 0 <= j < self.k):
                raise ContractError(f"bad edge ({i}, {j}) for {self.k} vertices")

    @classmethod
    def from_edges(cls, k: int, edges) -> "LabeledGraph":
        return cls(k, frozenset(tuple(sorted(e)) for e in edges))

    def is_connected(self) -> bool:
        return _count_components(self.k, self.edges) == 1

    def is_tree(self) -> bool:
        return len(self.edges) == self.k - 1 and self.is_connected()


def _count_components(k: int, edges) -> int:
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    comps = k
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            comps -= 1
    return comps


def vertex_pairs(k: int) -> list[tuple[int, int]]:
    """Pairs i < j in lexicographic order; bit b of an edge mask refers to pairs[b]."""
    return list(itertools.combinations(range(k), 2))


def _check_graph_order(k: int, override: bool):
    cap = GRAPH_ORDER_OVERRIDE_CAP if override else GRAPH_ORDER_CAP
    if not 1 <= k <= cap:
        raise ContractError(f"graph order must lie in [1, {cap}], got {k}")


@lru_cache(maxsize=None)
def _connected_masks(k: int) -> np.ndarray:
    pairs = vertex_pairs(k)
    out = []
    for mask in range(1 << len(pairs)):
        edges = [pairs[b] for b in range(len(pairs)) if mask >> b & 1]
        if _count_components(k, edges) == 1:
            out.append(mask)
    return np.array(out, dtype=np.int64)


def connected_graphs(k: int, override: bool = False) -> list[LabeledGraph]:
    """Every connected labeled graph on k vertices, found by filtering all edge subsets."""
    _check_graph_order(k, override)
    pairs = vertex_pairs(k)
    return [LabeledGraph(k, frozenset(pairs[b] for b in range(len(pairs)) if m >> b & 1))
            for m in _connected_masks(k).tolist()]


def prufer_decode(seq, k: int) -> list[tuple[int, int]]:
    """Edges of the labeled tree on k vertices encoded by a Prüfer sequence of length k - 2."""
    degree = [1] * k
    for a in seq:
        degree[a] += 1
    edges = []
    for a in seq:
        leaf = next(i for i in range(k) if degree[i] == 1)
        edges.append((min(leaf, a), max(leaf, a)))
        degree[leaf] -= 1
        degree[a] -= 1
    u, w = (i for i in range(k) if degree[i] == 1)
    edges.append((u, w))
    return edges


def iter_trees(k: int) -> Iterator[LabeledGraph]:
    if not 1 <= k <= TREE_ORDER_CAP:
        raise ContractError(f"tree order must lie in [1, {TREE_ORDER_CAP}], got {k}")
    if k == 1:
        yield LabeledGraph(1, frozenset())
        return
    for seq in itertools.product(range(k), repeat=k - 2):
        yield LabeledGraph(k, frozenset(prufer_decode(seq, k)))


def enumerate_trees(k: int) -> list[LabeledGraph]:
    """All labeled trees on k vertices (there are k**(k-2) of them)."""
    return list(iter_trees(k))


def overlap_matrix(positions, epsilon: float) -> np.ndarray:
    """Boolean (..., k, k) matrix of pairwise overlaps, False on the diagonal."""
    x = np.asarray(positions, dtype=float)
    d = np.linalg.norm(minimal_image(x[..., :, None, :] - x[..., None, :, :]), axis=-1)
    k = x.shape[-2]
    return (d <= epsilon) & ~np.eye(k, dtype=bool)


def overlap_mask(positions, epsilon: float) -> np.ndarray:
    """Edge mask (bit per pair in vertex_pairs order) of the overlap graph; batched over leading axes."""
    x = np.asarray(positions, dtype=float)
    k = x.shape[-2]
    pairs = vertex_pairs(k)
    if not pairs:
        return np.zeros(x.shape[:-2], dtype=np.int64)
    i, j = np.array(pairs).T
    d = np.linalg.norm(minimal_image(x[..., i, :] - x[..., j, :]), axis=-1)
    bits = (d <= epsilon).astype(np.int64)
    return bits @ (np.int64(1) << np.arange(len(pairs), dtype=np.int64))


def _superset_sum(values: np.ndarray, nbits: int) -> np.ndarray:
    """table[S] = sum of values[T] over all T contained in S (subset-sum transform)."""
    table = values.copy()
    for b in range(nbits):
        step = 1 << b
        view = table.reshape(-1, 2, step)
        view[:, 1, :] += view[:, 0, :]
    return table


@lru_cache(maxsize=None)
def cumulant_table(k: int) -> np.ndarray:
    """phi_k indexed by overlap mask: sum over connected subgraphs G of (-1)^{|G|}."""
    _check_graph_order(k, override=True)
    m = k * (k - 1) // 2
    signs = np.zeros(1 << m, dtype=np.int64)
    conn = _connected_masks(k)
    popcount = np.array([bin(c).count("1") for c in conn.tolist()], dtype=np.int64)
    signs[conn] = np.where(popcount % 2 == 0, 1, -1)
    return _superset_sum(signs, m)


def cumulant_phi(positions, epsilon: float, override: bool = False) -> np.ndarray:
    """Exclusion cumulant of k positions; accepts a batch of shape (..., k, dim)."""
    x = np.asarray(positions, dtype=float)
    k = x.shape[-2]
    _check_graph_order(k, override)
    out = cumulant_table(k)[overlap_mask(x, epsilon)]
    return out if out.ndim else int(out)


def cumulant_phi_by_graphs(positions, epsilon: float) -> int:
    """Direct sum over connected graphs; slow reference for cumulant_phi."""
    x = np.asarray(positions, dtype=float)
    adj = overlap_matrix(x, epsilon)
    total = 0
    for g in connected_graphs(x.shape[0]):
        term = 1
        for i, j in g.edges:
            term *= -int(adj[i, j])
        total += term
    return total


def tree_bound(positions, epsilon: float) -> np.ndarray:
    """Number of labeled trees all of whose edges overlap, via the matrix-tree theorem.

    Batched over leading axes; returns integers.
    """
    x = np.asarray(positions, dtype=float)
    k = x.shape[-2]
    if not 1 <= k <= TREE_ORDER_CAP:
        raise ContractError(f"tree order must lie in [1, {TREE_ORDER_CAP}], got {k}")
    if k == 1:
        out = np.ones(x.shape[:-2], dtype=np.int64)
        return out if out.ndim else int(out)
    adj = overlap_matrix(x, epsilon).astype(float)
    lap = np.eye(k) * adj.sum(axis=-1)[..., None] - adj
    out = np.rint(np.linalg.det(lap[..., 1:, 1:])).astype(np.int64)
    return out if out.ndim else int(out)


def tree_bound_by_enumeration(positions, epsilon: float) -> int:
    x = np.asarray(positions, dtype=float)
    adj = overlap_matrix(x, epsilon)
    return sum(all(adj[i, j] for i, j in t.edges) for t in iter_trees(x.shape[0]))


def set_partitions(items: list) -> Iterator[list[list]]:
    """All set partitions of ``items`` (Bell-number many)."""
    if not items:
        yield []
        return
    head, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[head]] + part
        for b in range(len(part)):
            yield part[:b] + [[head] + part[b]] + part[b + 1:]


def exclusion_from_cumulants(positions, epsilon: float) -> int:
    """Sum over set partitions of the product of block cumulants; equals the exclusion indicator."""
    x = np.asarray(positions, dtype=float)
    total = 0
    for part in set_partitions(list(range(x.shape[0]))):
        term = 1
        for block in part:
            term *= int(cumulant_phi(x[block], epsilon, override=True))
            if term == 0:
                break
        total += term
    return total


@dataclass
class CumulantTable:
    """Sampled configurations with their cumulant and tree-bound values."""

    k: int
    epsilon: float
    configurations: np.ndarray
    phi: np.ndarray
    bound: np.ndarray

    @property
    def violations(self) -> int:
        return int(np.sum(np.abs(self.phi) > self.bound))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            dim = self.configurations.shape[-1]
            coords = [f"x{a}_{c}" for a in range(self.k) for c in range(dim)]
            writer.writerow(coords + ["phi", "tree_bound"])
            for conf, p, b in zip(self.configurations, self.phi, self.bound):
                writer.writerow([repr(float(c)) for c in conf.ravel()] + [int(p), int(b)])
        return path


def clustered_configurations(k: int, epsilon: float, dim: int, samples: int, rng: np.random.Generator,
                             spread: float = 1.5) -> np.ndarray:
    """Random k-point configurations packed into a box of half-width spread*epsilon around a random centre,
    so that all overlap patterns occur with reasonable frequency."""
    centre = rng.random((samples, 1, dim))
    return wrap(centre + epsilon * spread * (2 * rng.random((samples, k, dim)) - 1))


def sample_cumulant_table(k: int, epsilon: float, dim: int, samples: int, rng: np.random.Generator) -> CumulantTable:
    x = clustered_configurations(k, epsilon, dim, samples, rng)
    return CumulantTable(k, epsilon, x, cumulant_phi(x, epsilon), tree_bound(x, epsilon))


def random_trees(k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform labeled trees as parent arrays in breadth-first order from vertex 0.

    Returns (order, parent) with order[s] a permutation starting at 0 and
    parent[s, order[s, a]] the parent of that vertex (unused for the root).
    """
    order = np.zeros((size, k), dtype=np.int64)
    parent = np.zeros((size, k), dtype=np.int64)
    for s in range(size):
        edges = prufer_decode(rng.integers(0, k, size=k - 2).tolist(), k) if k > 1 else []
        nbrs = [[] for _ in range(k)]
        for i, j in edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        seen = [0]
        head = 0
        visited = {0}
        while head < len(seen):
            a = seen[head]
            head += 1
            for b in nbrs[a]:
                if b not in visited:
                    visited.add(b)
                    parent[s, b] = a
                    seen.append(b)
        order[s] = seen
    return order, parent


def _uniform_ball(dim: int, radius: float, size, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=tuple(np.atleast_1d(size)) + (dim,))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    r = radius * rng.random(tuple(np.atleast_1d(size)))[..., None] ** (1 / dim)
    return g * r


def tree_chain_configurations(k: int, epsilon: float, dim: int, samples: int, rng: np.random.Generator):
    """Configurations drawn from the mixture over uniform trees of chained epsilon-balls.

    The first point is uniform on the torus and each further vertex is uniform
    in the ball around its tree parent. The proposal density is
    tree_bound(x) / (k**(k-2) |B_eps|**(k-1)), so the returned log-normalizer
    log(k**(k-2) |B_eps|**(k-1)) turns f / tree_bound into an unbiased weight.
    """
    if 2 * epsilon >= 1:
        raise ContractError("epsilon too large for chained balls on the unit torus")
    order, parent = random_trees(k, samples, rng)
    x = np.empty((samples, k, dim))
    x[:, 0] = rng.random((samples, dim))
    steps = _uniform_ball(dim, epsilon, (samples, k), rng)
    rows = np.arange(samples)
    for a in range(1, k):
        child = order[:, a]
        x[rows, child] = x[rows, parent[rows, child]] + steps[:, a]
    ball = ball_volume(dim) * epsilon**dim
    log_norm = (k - 2) * math.log(k) + (k - 1) * math.log(ball) if k > 1 else 0.0
    return wrap(x), log_norm


def integral_abs_cumulant(k: int, epsilon: float, dim: int, samples: int, rng: np.random.Generator,
                          method: str = "naive") -> tuple[float, float]:
    """Monte Carlo estimate of the integral of |phi_k| over k - 1 positions with the first pinned.

    ``naive`` samples the free points uniformly in the box of half-width
    (k - 1) epsilon around the pinned point (or the whole torus if that box
    covers it), outside of which phi_k vanishes. ``tree`` samples chained
    epsilon-balls along uniform random trees.
    """
    if not 1 <= k <= GRAPH_ORDER_CAP:
        raise ContractError(f"k must lie in [1, {GRAPH_ORDER_CAP}], got {k}")
    if samples < 2:
        raise ContractError("need at least two samples")
    if k == 1:
        return 1.0, 0.0
    if method == "naive":
        half = min((k - 1) * epsilon, 0.5)
        x = np.zeros((samples, k, dim))
        x[:, 1:] = half * (2 * rng.random((samples, k - 1, dim)) - 1)
        vals = np.abs(cumulant_phi(wrap(x), epsilon)) * (2 * half) ** (dim * (k - 1))
    elif method == "tree":
        x, log_norm = tree_chain_configurations(k, epsilon, dim, samples, rng)
        vals = np.abs(cumulant_phi(x, epsilon)) / tree_bound(x, epsilon) * math.exp(log_norm)
    else:
        raise ContractError(f"unknown method {method!r}")
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


def cumulant_bound(k: int, epsilon: float, dim: int) -> float:
    """Tree-count bound k^{k-2} (|B_d| eps^d)^{k-1} on the integral of |phi_k|."""
    if k == 1:
        return 1.0
    return float(k ** (k - 2) * (ball_volume(dim) * epsilon**dim) ** (k - 1))


def _tagged_weights(x: np.ndarray, phi0: Perturbation, beta: float, rng: np.random.Generator) -> np.ndarray:
    """Cumulative products over the first l points of phi0(x_j, v_j) with v_j ~ M_beta.

    Column l holds the weight for l tagged points; shape (S, k + 1).
    """
    samples, k, dim = x.shape
    v = sample_maxwellian(beta, dim, rng, size=(samples, k))
    w = np.asarray(phi0(x, v), dtype=float)
    return np.concatenate([np.ones((samples, 1)), np.cumprod(w, axis=1)], axis=1)


def _check_series(params: ScalingParams, p_max: int, samples: int):
    if params.mu > SERIES_MU_CAP or params.lam > SERIES_LAM_CAP:
        raise ContractError(f"series estimator needs mu <= {SERIES_MU_CAP:g} and lam <= {SERIES_LAM_CAP:g}, "
                            f"got mu={params.mu}, lam={params.lam}")
    if not 0 <= p_max <= SERIES_ORDER_CAP:
        raise ContractError(f"total order must lie in [0, {SERIES_ORDER_CAP}], got {p_max}")
    if samples < 2:
        raise ContractError("need at least two samples")


def series_tail_bound(params: ScalingParams, phi0: Perturbation, p_max: int) -> float:
    """Bound on the omitted terms p + q > p_max, using indicator <= 1 and phi0 <= B."""
    x = params.mu + params.lam * phi0.bound
    return float(math.exp(x) * poisson.sf(p_max, x))


def partition_function_series(params: ScalingParams, phi0: Perturbation, p_max: int, samples: int,
                              rng: np.random.Generator, exclusion: bool = True) -> tuple[float, float]:
    """Truncated double series over background count p and tagged count q with p + q <= p_max.

    Each order n = p + q uses its own batch of uniform positions and
    Maxwellian velocities, shared across the splittings of n.
    """
    _check_series(params, p_max, samples)
    mu, lam, beta, dim = params.mu, params.lam, params.beta, params.dim
    total, var = 1.0, 0.0
    for n in range(1, p_max + 1):
        x = rng.random((samples, n, dim))
        ok = exclusion_ok_batch(x, params.epsilon) if exclusion and params.epsilon > 0 else np.ones(samples, bool)
        w = _tagged_weights(x, phi0, beta, rng)
        q = np.arange(n + 1)
        coeff = np.array([lam**qq * mu ** (n - qq) / (math.factorial(qq) * math.factorial(n - qq)) for qq in q])
        vals = ok * (w[:, : n + 1] @ coeff)
        total += vals.mean()
        var += vals.var(ddof=1) / samples
    return float(total), float(math.sqrt(var))


def _check_cumulant(k_max: int, samples: int):
    if not 1 <= k_max <= CUMULANT_ORDER_CAP:
        raise ContractError(f"k_max must lie in [1, {CUMULANT_ORDER_CAP}], got {k_max}")
    if samples < 2:
        raise ContractError("need at least two samples")


def cumulant_tail_bound(params: ScalingParams, phi0: Perturbation, k_max: int, upto: int = 60) -> float:
    """Bound on the omitted orders r > k_max of the cumulant exponent via the tree-count bound."""
    x = params.mu + params.lam * phi0.bound
    ball = ball_volume(params.dim) * params.epsilon**params.dim
    return float(sum(math.exp(r * math.log(x) - math.lgamma(r + 1) + (r - 2) * math.log(r)
                              + (r - 1) * math.log(ball)) for r in range(k_max + 1, upto) if ball > 0))


def cumulant_exponent(params: ScalingParams, phi0: Perturbation, k_max: int, samples: int,
                      rng: np.random.Generator, tagged_weight=None) -> tuple[float, float]:
    """Truncated exponent sum over (k, l) with 2 <= k + l <= k_max plus the exact first-order terms.

    ``tagged_weight(l, w)`` maps the tagged product weights for l tagged
    points to the per-sample integrand factor (default: the weights themselves).
    """
    _check_cumulant(k_max, samples)
    mu, lam, beta, dim = params.mu, params.lam, params.beta, params.dim
    if tagged_weight is None:
        tagged_weight = lambda l, w: w  # noqa: E731
    first = mu + lam * float(tagged_weight(1, np.array([phi0.mass(beta, dim)]))[0])
    total, var = first, 0.0
    if params.epsilon == 0:
        return total, 0.0
    for r in range(2, k_max + 1):
        x, log_norm = tree_chain_configurations(r, params.epsilon, dim, samples, rng)
        ratio = cumulant_phi(x, params.epsilon) / tree_bound(x, params.epsilon) * math.exp(log_norm)
        w = _tagged_weights(x, phi0, beta, rng)
        vals = np.zeros(samples)
        for l in range(r + 1):
            coeff = mu ** (r - l) * lam**l / (math.factorial(r - l) * math.factorial(l))
            if coeff:
                vals += coeff * tagged_weight(l, w[:, l])
        vals *= ratio
        total += vals.mean()
        var += vals.var(ddof=1) / samples
    return float(total), float(math.sqrt(var))


def partition_function_cumulant(params: ScalingParams, phi0: Perturbation, k_max: int, samples: int,
                                rng: np.random.Generator) -> tuple[float, float]:
    """exp of the truncated cumulant sum; the error is propagated from the exponent."""
    expo, se = cumulant_exponent(params, phi0, k_max, samples, rng)
    value = math.exp(expo)
    return value, value * se


class QuotientEstimate(NamedTuple):
    value: float
    std_error: float
    log_value: float
    c0: float
    chain_bound: float
    declared_bound: float

    @property
    def within_chain_bound(self) -> bool:
        return self.value <= self.chain_bound


def quotient_estimate(params: ScalingParams, phi0: Perturbation, truncation: int, samples: int,
                      rng: np.random.Generator, c0: float | None = None) -> QuotientEstimate:
    """Ratio of the series with tagged weight lam*C0 (no velocities) to the partition function.

    Both sides share the cumulant structure, so the log-ratio is the truncated
    sum of mu^k lam^l/(k! l!) times the integral of phi_{k+l} [C0^l - (M phi0)^{l}],
    estimated on common samples.
    """
    if c0 is None:
        c0 = compute_c0(phi0, params.beta, params.dim).value
    if params.lam == 0:
        log_q, se = 0.0, 0.0
    else:
        log_q, se = cumulant_exponent(params, phi0, truncation, samples, rng,
                                      tagged_weight=lambda l, w: c0**l - w)
        log_q -= params.mu
    value = math.exp(log_q)
    return QuotientEstimate(value, value * se, log_q, c0, math.exp(8 * math.e * c0 * params.lam),
                            QUOTIENT_BASE[params.dim] ** (c0 * params.lam))


@dataclass
class EstimateRows:
    """Rows of (k, l, estimate, std_error, bound) for CSV export."""

    rows: list = field(default_factory=list)

    def add(self, k: int, l: int, estimate: float, std_error: float, bound: float = float("nan")):
        self.rows.append((k, l, estimate, std_error, bound))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "l", "estimate", "std_error", "bound"])
            for k, l, e, s, b in self.rows:
                writer.writerow([k, l, repr(float(e)), repr(float(s)), repr(float(b))])
        return path
