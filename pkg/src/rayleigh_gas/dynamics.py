"""Event-driven hard-sphere dynamics on the unit torus."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import (CapExceeded, ContractError, ParticleState, ScalingParams, SystemState, minimal_image,
                   scatter, wrap)

MAX_EVENTS = 10**7
# Predictions on the nearest image are trusted for a relative displacement of
# at most 0.25, which keeps every other periodic image farther than epsilon.
HORIZON = 0.25
GRAZING_TOL = 1e-14
OVERLAP_TOL = 1e-9


class CollisionEvent(NamedTuple):
    time: float
    i: int
    j: int
    stamp_i: int
    stamp_j: int


@dataclass
class EventLog:
    times: list[float] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    omegas: list[np.ndarray] = field(default_factory=list)

    def append(self, time: float, i: int, j: int, omega: np.ndarray):
        self.times.append(time)
        self.pairs.append((i, j))
        self.omegas.append(np.array(omega))

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self):
        return iter(zip(self.times, self.pairs, self.omegas))

    def to_csv(self, path) -> Path:
        path = Path(path)
        dim = len(self.omegas[0]) if self.omegas else 2
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time", "i", "j"] + [f"omega_{k}" for k in range(dim)])
            for t, (i, j), w in self:
                writer.writerow([repr(float(t)), i, j] + [repr(float(c)) for c in w])
        return path


def contact_times(dx: np.ndarray, dv: np.ndarray, epsilon: float) -> np.ndarray:
    """Earliest time at which |dx + t dv| = epsilon with the pair approaching; inf if none.

    Operates on the given displacement without any image search.
    """
    b = np.sum(dx * dv, axis=-1)
    vv = np.sum(dv * dv, axis=-1)
    rr = np.sum(dx * dx, axis=-1) - epsilon**2
    disc = b * b - vv * rr
    hit = (b < 0) & (disc > GRAZING_TOL * vv * epsilon**2)
    root = np.sqrt(np.where(hit, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = rr / (root - b)
    return np.where(hit, np.maximum(t, 0.0), np.inf)


def predict_collision(p_i: ParticleState, p_j: ParticleState, epsilon: float,
                      horizon: float | None = None) -> float | None:
    """Contact time of two free-flying discs on the nearest image.

    The nearest image is the only one that can reach distance epsilon before
    the relative displacement has moved by 1/2 - epsilon, so the answer is exact
    up to ``horizon`` (default (1/2 - epsilon)/|dv|). Returns None if the pair
    does not touch within the horizon.
    """
    dx = minimal_image(np.asarray(p_i.x, dtype=float) - np.asarray(p_j.x, dtype=float))
    dv = np.asarray(p_i.v, dtype=float) - np.asarray(p_j.v, dtype=float)
    if np.linalg.norm(dx) < epsilon * (1 - OVERLAP_TOL):
        raise ContractError("particles overlap")
    speed = float(np.linalg.norm(dv))
    if speed == 0.0:
        return None
    if horizon is None:
        horizon = (0.5 - epsilon) / speed
    t = float(contact_times(dx, dv, epsilon))
    return t if t <= horizon else None


def advance_free(state: SystemState, dt: float) -> SystemState:
    if dt < 0:
        raise ContractError("dt must be nonnegative")
    if dt == 0:
        return state
    return state.replace(time=state.time + dt, x=wrap(state.x + dt * state.v))


class _Scheduler:
    """Priority queue of candidate collisions with per-particle stamps.

    Positions are stored lazily as (reference position, reference time) per
    particle so that a particle's coordinates are only rounded when it collides.
    """

    def __init__(self, x: np.ndarray, v: np.ndarray, epsilon: float, now: float):
        self.x_ref = x
        self.t_ref = np.full(len(x), now)
        self.v = v
        self.eps = epsilon
        self.stamps = np.zeros(len(x), dtype=np.int64)
        self.heap: list[CollisionEvent] = []
        self.rebuild(now)

    def positions(self, now: float, idx=slice(None)) -> np.ndarray:
        return self.x_ref[idx] + (now - self.t_ref[idx])[..., None] * self.v[idx]

    def _push(self, now: float, rows: np.ndarray, cols: np.ndarray, times: np.ndarray):
        keep = np.flatnonzero(now + times <= self.rebuild_at)
        for k in keep:
            i, j = int(rows[k]), int(cols[k])
            if i > j:
                i, j = j, i
            heapq.heappush(self.heap, CollisionEvent(now + float(times[k]), i, j,
                                                     int(self.stamps[i]), int(self.stamps[j])))

    def rebuild(self, now: float):
        self.heap.clear()
        self.stamps += 1
        speed = float(np.max(np.linalg.norm(self.v, axis=1))) if len(self.v) else 0.0
        self.vmax = speed
        self.rebuild_at = now + HORIZON / (2 * speed) if speed > 0 else math.inf
        x = self.positions(now)
        n = len(x)
        chunk = max(1, 2_000_000 // max(n, 1))
        for start in range(0, n - 1, chunk):
            rows = np.arange(start, min(start + chunk, n - 1))
            ii, jj = np.nonzero(np.arange(n)[None, :] > rows[:, None])
            ii = rows[ii]
            dx = minimal_image(x[ii] - x[jj])
            t = contact_times(dx, self.v[ii] - self.v[jj], self.eps)
            self._push(now, ii, jj, t)

    def collide(self, ev: CollisionEvent) -> np.ndarray:
        i, j = ev.i, ev.j
        now = ev.time
        for k in (i, j):
            self.x_ref[k] = wrap(self.positions(now, k))
            self.t_ref[k] = now
        d = minimal_image(self.x_ref[i] - self.x_ref[j])
        omega = d / np.linalg.norm(d)
        self.v[i], self.v[j] = scatter(self.v[i], self.v[j], omega)
        self.stamps[i] += 1
        self.stamps[j] += 1
        speed = max(float(np.linalg.norm(self.v[i])), float(np.linalg.norm(self.v[j])))
        if speed > self.vmax:
            self.vmax = speed
            self.rebuild_at = min(self.rebuild_at, now + HORIZON / (2 * speed))
        mask = np.ones(len(self.v), dtype=bool)
        mask[[i, j]] = False
        others = np.flatnonzero(mask)
        if others.size:
            xo = self.positions(now, others)
            for k in (i, j):
                dx = minimal_image(self.x_ref[k] - xo)
                t = contact_times(dx, self.v[k] - self.v[others], self.eps)
                self._push(now, np.full(others.size, k), others, t)
        return omega

    def next_event(self) -> CollisionEvent | None:
        while self.heap:
            ev = self.heap[0]
            if ev.stamp_i == self.stamps[ev.i] and ev.stamp_j == self.stamps[ev.j]:
                return ev
            heapq.heappop(self.heap)
        return None


def evolve(state: SystemState, t_end: float, params: ScalingParams | float,
           max_events: int = MAX_EVENTS) -> tuple[SystemState, EventLog]:
    """Exact hard-sphere evolution of ``state`` up to absolute time ``t_end``."""
    epsilon = params.epsilon if isinstance(params, ScalingParams) else float(params)
    if t_end < state.time:
        raise ContractError("t_end precedes the state time")
    log = EventLog()
    if state.n < 2 or epsilon == 0:
        return advance_free(state, t_end - state.time), log
    sched = _Scheduler(state.x.copy(), state.v.copy(), epsilon, state.time)
    while True:
        ev = sched.next_event()
        t_next = ev.time if ev is not None else math.inf
        if sched.rebuild_at <= t_next and sched.rebuild_at < t_end:
            sched.rebuild(sched.rebuild_at)
            continue
        if t_next > t_end:
            break
        heapq.heappop(sched.heap)
        omega = sched.collide(ev)
        log.append(ev.time, ev.i, ev.j, omega)
        if len(log) > max_events:
            err = CapExceeded("dynamics", f"more than {max_events} collision events")
            err.log = log
            raise err
    return SystemState(t_end, wrap(sched.positions(t_end)), sched.v, state.tags), log
