"""
Dual paths: backward-in-time walks that may only jump at clock rings of the
site they occupy, and only within l-infinity distance rho.

A path is stored in original time. ``ring_times[k]`` is the ring at
``sites[k]`` that makes the path leave it for ``sites[k + 1]``, so the
backward jump times are ``s_{k+1} = t - ring_times[k]``. Keeping the ring
times themselves (rather than ``t - s``) makes validation an exact lookup in
the clock log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _kernels
from .family import UpdateFamily, Vector
from .harris import ClockLog, CoupledTrajectory, Geometry, Trajectory
from .streams import Purpose, as_generator

__all__ = [
    "DualPath",
    "Coding",
    "ConsistencyError",
    "GuardExceeded",
    "validate_dual_path",
    "construct_disagreement_path",
    "disagrees_along",
    "is_activated",
    "sample_dual_path",
    "coding_of",
    "event_G",
    "is_reasonable_coding",
    "count_reasonable_codings",
    "enumerate_reasonable_codings",
    "max_dual_jumps",
    "default_N",
    "compositions_count",
    "hockey_stick",
    "witness_experiment",
]


class ConsistencyError(RuntimeError):
    """The engine produced a disagreement that no rule can explain."""


class GuardExceeded(ValueError):
    pass


@dataclass(frozen=True)
class DualPath:
    start: Vector
    t: float
    length: float
    ring_times: tuple[float, ...]
    sites: tuple[Vector, ...]

    def __post_init__(self):
        if len(self.sites) != len(self.ring_times) + 1:
            raise ValueError("a path visits one more site than it has jumps")
        if tuple(self.sites[0]) != tuple(self.start):
            raise ValueError("the first visited site must be the start")

    @property
    def n_jumps(self) -> int:
        return len(self.ring_times)

    @property
    def jump_times(self) -> tuple[float, ...]:
        """Backward-time coordinates ``s_1 < ... < s_{n-1}``."""
        return tuple(self.t - r for r in self.ring_times)

    def segments(self):
        """``(site, lo, hi)`` in original time; the path sits at ``site`` on ``(lo, hi]``.

        The last segment is closed at ``lo = t - length``.
        """
        bounds = (self.t,) + tuple(self.ring_times) + (self.t - self.length,)
        for k, site in enumerate(self.sites):
            yield site, bounds[k + 1], bounds[k]

    def site_at(self, s: float) -> Vector:
        """Gamma(s), right-continuous in backward time."""
        if not 0 <= s <= self.length:
            raise ValueError(f"s={s} outside [0, {self.length}]")
        orig = self.t - s
        k = sum(1 for r in self.ring_times if r >= orig)
        return self.sites[k]

    def to_json(self) -> dict:
        return {
            "start": list(self.start),
            "t": self.t,
            "length": self.length,
            "steps": [[self.t - r, list(s)] for r, s in zip((self.t,) + self.ring_times, self.sites)],
            "ring_times": list(self.ring_times),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DualPath":
        sites = tuple(tuple(s) for _, s in obj["steps"])
        return cls(tuple(obj["start"]), float(obj["t"]), float(obj["length"]),
                   tuple(float(r) for r in obj["ring_times"]), sites)


def _ring_times_at(log: ClockLog, idx: int) -> np.ndarray:
    return log.times[log.rings_at(idx)]


def validate_dual_path(path: DualPath, log: ClockLog, rho: int) -> bool:
    geo = log.geometry
    t, length = path.t, path.length
    if not 0 <= length <= t <= log.horizon:
        return False
    lo = t - length
    prev = t
    for k, r in enumerate(path.ring_times):
        if not lo < r < prev:
            return False
        here, there = path.sites[k], path.sites[k + 1]
        if geo.wrap(here) is None or geo.wrap(there) is None:
            return False
        if not np.any(_ring_times_at(log, geo.index(here)) == r):
            return False
        if geo.distance(here, there) > rho:
            return False
        prev = r
    return geo.wrap(path.sites[-1]) is not None


# ---------------------------------------------------------------------------
# disagreement paths


def _event_times_between(traj: Trajectory, idx: int, lo: float, hi: float) -> np.ndarray:
    ev = traj.changes_at(idx)
    times = traj.log.times[ev]
    return times[(times > lo) & (times <= hi)]


def _check_times(coupled: CoupledTrajectory, idx: int, lo: float, hi: float) -> np.ndarray:
    """Times at which the pair of spins at ``idx`` takes every value it has on ``[lo, hi]``."""
    extra = np.concatenate([
        _event_times_between(coupled.a, idx, lo, hi),
        _event_times_between(coupled.b, idx, lo, hi),
    ])
    return np.unique(np.concatenate([[lo], extra]))


def is_activated(path: DualPath, coupled: CoupledTrajectory) -> bool:
    """Whether both processes are 0 at some point (t - s, Gamma(s)), s in [0, length]."""
    geo = coupled.geometry
    for site, lo, hi in path.segments():
        idx = geo.index(site)
        for tau in _check_times(coupled, idx, lo, hi):
            if coupled.a.value_at(idx, tau) == 0 and coupled.b.value_at(idx, tau) == 0:
                return True
    return False


def disagrees_along(path: DualPath, coupled: CoupledTrajectory) -> bool:
    """Whether the two processes differ at every point of the path."""
    geo = coupled.geometry
    for site, lo, hi in path.segments():
        idx = geo.index(site)
        for tau in _check_times(coupled, idx, lo, hi):
            if coupled.a.value_at(idx, tau) == coupled.b.value_at(idx, tau):
                return False
    return True


def _full_rule(cfg_value, nbr_row, rule_ptr) -> int | None:
    for r in range(len(rule_ptr) - 1):
        if all(cfg_value(j) == 0 for j in nbr_row[rule_ptr[r] : rule_ptr[r + 1]]):
            return r
    return None


def construct_disagreement_path(coupled: CoupledTrajectory, x, t: float, t_prime: float) -> DualPath | None:
    """Follow a disagreement backward in time from ``(x, t)``.

    Stay at the current site until, going backward, the two spins agree just
    before some ring. That ring was accepted in exactly one process, so one of
    its rules was all zero there and holds a site where the other process has a 1.
    Jump to that site and repeat.
    """
    if not 0 <= t_prime <= t <= coupled.horizon:
        raise ValueError("need 0 <= t' <= t <= horizon")
    geo, log = coupled.geometry, coupled.log
    start = geo.coords(geo.index(x))
    if not coupled.disagree(start, t):
        return None
    nbr, rule_ptr = geo.neighbor_table(coupled.a.family)
    a, b = coupled.a, coupled.b
    ghost_val = geo.ghost_value
    lo = t - t_prime
    cur = geo.index(start)
    sites, rings = [start], []
    hi = t
    while True:
        ev = log.rings_at(cur)
        times = log.times[ev]
        upper = times <= hi if not rings else times < hi
        ev = ev[(times > lo) & upper][::-1]
        jump = None
        for e in ev:
            if a.value_before_event(cur, e) == b.value_before_event(cur, e):
                jump = int(e)
                break
        if jump is None:
            break
        tau = float(log.times[jump])

        def val_a(j, e=jump):
            return ghost_val if j == geo.ghost else a.value_before_event(j, e)

        def val_b(j, e=jump):
            return ghost_val if j == geo.ghost else b.value_before_event(j, e)

        ra = _full_rule(val_a, nbr[cur], rule_ptr)
        rb = _full_rule(val_b, nbr[cur], rule_ptr)
        if (ra is None) == (rb is None):
            raise ConsistencyError(f"ring {jump} at site {geo.coords(cur)} accepted by both or neither process")
        rule, other = (ra, val_b) if ra is not None else (rb, val_a)
        target = None
        for j in nbr[cur][rule_ptr[rule] : rule_ptr[rule + 1]]:
            if j != geo.ghost and other(j) != 0:
                target = int(j)
                break
        if target is None:
            raise ConsistencyError(f"no disagreeing site in the witnessing rule at event {jump}")
        rings.append(tau)
        cur = target
        sites.append(geo.coords(cur))
        hi = tau
    return DualPath(start, float(t), float(t_prime), tuple(rings), tuple(sites))


def sample_dual_path(log: ClockLog, x, t: float, t_prime: float, rho: int, seed, p_jump: float = 0.5) -> DualPath:
    """A random valid dual path: at each ring of the occupied site, jump with probability ``p_jump``."""
    rng = as_generator(seed, Purpose.MISC)
    geo = log.geometry
    ball = geo.ball_table(rho)
    cur = geo.index(x)
    start = geo.coords(cur)
    lo = t - t_prime
    first = int(np.searchsorted(log.times, lo, side="right"))
    last = int(np.searchsorted(log.times, t, side="left"))
    sites, rings = [start], []
    for e in range(last - 1, first - 1, -1):
        if log.sites[e] == cur and rng.random() < p_jump:
            nb = ball[cur]
            nb = nb[nb >= 0]
            cur = int(nb[rng.integers(nb.size)])
            rings.append(float(log.times[e]))
            sites.append(geo.coords(cur))
    return DualPath(start, float(t), float(t_prime), tuple(rings), tuple(sites))


# ---------------------------------------------------------------------------
# codings


@dataclass(frozen=True)
class Coding:
    sites: tuple[Vector, ...]
    K: float
    t: float

    def __post_init__(self):
        if len(self.sites) != n_checkpoints(self.t, self.K) + 1:
            raise ValueError("a coding has floor(t/K^2) + 1 entries")

    def to_json(self) -> dict:
        return {"K": self.K, "t": self.t, "sites": [list(s) for s in self.sites]}


def n_checkpoints(t: float, K: float) -> int:
    return math.floor(t / (K * K))


def coding_of(path: DualPath, K: float) -> Coding:
    """Gamma(kK) for k = 0..floor(t/K^2)."""
    if K < 2:
        raise ValueError("K must be at least 2")
    n = n_checkpoints(path.t, K)
    if n * K > path.length:
        raise ValueError(f"path of length {path.length} is shorter than {n}*K")
    return Coding(tuple(path.site_at(k * K) for k in range(n + 1)), float(K), float(path.t))


def event_G(coding: Coding, coupled: CoupledTrajectory, K: float, t: float) -> bool:
    """Some checkpoint y_k has both processes at 0 at time t - kK."""
    if t < K:
        raise ValueError("need t >= K")
    geo = coupled.geometry
    for k, y in enumerate(coding.sites):
        idx = geo.index(y)
        tau = t - k * K
        if coupled.a.value_at(idx, tau) == 0 and coupled.b.value_at(idx, tau) == 0:
            return True
    return False


def _step_budget(t: float, K: float, N: float) -> int:
    return math.floor(N * t / K)


def _linf(a: Sequence[int], b: Sequence[int]) -> int:
    return max(abs(int(p) - int(q)) for p, q in zip(a, b))


def is_reasonable_coding(coding, x, t: float, K: float, N: float, rho: int,
                         geometry: Geometry | None = None) -> bool:
    """Membership in the reasonable-coding set via minimal chain lengths per leg.

    A leg from y to y' needs at least ceil(|y' - y|_inf / rho) steps and that many
    suffice; legs concatenate, so the coding is reachable iff the total fits
    within floor(N t / K). ``geometry`` switches to torus distances.
    """
    if t < K:
        raise ValueError("need t >= K")
    sites = coding.sites if isinstance(coding, Coding) else tuple(tuple(s) for s in coding)
    if len(sites) != n_checkpoints(t, K) + 1:
        return False
    x = tuple(x) if not isinstance(x, (int, np.integer)) else (int(x),)
    dist = geometry.distance if geometry is not None else _linf
    if geometry is not None:
        if dist(sites[0], x) != 0:
            return False
    elif tuple(sites[0]) != x:
        return False
    cost = sum(-(-dist(p, q) // rho) for p, q in zip(sites, sites[1:]))
    return cost <= _step_budget(t, K, N)


def _shell_size(c: int, rho: int, d: int) -> int:
    if c == 0:
        return 1
    return (2 * c * rho + 1) ** d - (2 * (c - 1) * rho + 1) ** d


def count_reasonable_codings(t: float, K: float, N: float, rho: int, d: int, guard: int = 10**8) -> int:
    """Exact number of reasonable codings started at a fixed site of Z^d.

    Legs are independent given their costs, and the number of displacements of
    cost exactly c is the size of an l-infinity shell, so the count is a
    convolution over the per-leg costs.
    """
    legs = n_checkpoints(t, K)
    budget = _step_budget(t, K, N)
    shell = [_shell_size(c, rho, d) for c in range(budget + 1)]
    ways = [1] + [0] * budget  # ways[b] = weighted sequences of total cost b
    for _ in range(legs):
        new = [0] * (budget + 1)
        for b, w in enumerate(ways):
            if w:
                for c in range(budget - b + 1):
                    new[b + c] += w * shell[c]
        ways = new
    total = sum(ways)
    if total > guard:
        raise GuardExceeded(f"{total} codings exceed the guard {guard}")
    return total


def enumerate_reasonable_codings(t: float, K: float, N: float, rho: int, d: int, limit: int = 10**5) -> set:
    """All reasonable codings of the origin, built from explicit site chains.

    A chain is walked one step at a time; at any moment the current site may
    be recorded as the next checkpoint. No distance shortcut is used.
    """
    legs = n_checkpoints(t, K)
    budget = _step_budget(t, K, N)
    moves = [m for m in np.ndindex(*(2 * rho + 1,) * d)]
    moves = [tuple(c - rho for c in m) for m in moves]

    @lru_cache(maxsize=None)
    def suffixes(remaining: int, steps: int) -> frozenset:
        if remaining == 0:
            return frozenset({()})
        out = {((0,) * d,) + s for s in suffixes(remaining - 1, steps)}
        if steps > 0:
            for m in moves:
                for s in suffixes(remaining, steps - 1):
                    out.add(tuple(tuple(a + b for a, b in zip(p, m)) for p in s))
                    if len(out) > limit:
                        raise GuardExceeded("enumeration limit reached")
        return frozenset(out)

    origin = (0,) * d
    return {(origin,) + s for s in suffixes(legs, budget)}


def default_N(rho: int) -> float:
    """Jump budget per unit of t/K used when none is given (measured, not proved, to suffice)."""
    return 4.0 * rho + 4.0


def max_dual_jumps(log: ClockLog, x, t: float, t_prime: float, rho: int) -> int:
    """Largest number of jumps of a dual path of length t' started at (x, t).

    Jumps use rings strictly inside (t - t', t).
    """
    if not 0 <= t_prime <= t <= log.horizon:
        raise ValueError("need 0 <= t' <= t <= horizon")
    geo = log.geometry
    lo = int(np.searchsorted(log.times, t - t_prime, side="right"))
    hi = int(np.searchsorted(log.times, t, side="left"))
    if hi <= lo:
        return 0
    return _kernels.max_jumps(geo.n_sites, geo.ball_table(rho), log.sites, geo.index(x), lo, hi)


# ---------------------------------------------------------------------------
# binomial identities


def compositions_count(parts: int, total: int) -> int:
    """Number of (j_1..j_I) in N^I summing to J."""
    if parts < 1 or total < 0:
        raise ValueError("need parts >= 1 and total >= 0")
    return math.comb(parts + total - 1, parts - 1)


def hockey_stick(I: int, J: int) -> int:
    """Closed form of sum_{j=0}^{J} C(I+j, I)."""
    if I < 0 or J < 0:
        raise ValueError("need I, J >= 0")
    return math.comb(I + J + 1, I + 1)


# ---------------------------------------------------------------------------
# repeated runs


def witness_experiment(family: UpdateFamily, geometry: Geometry, q: float, q_prime: float,
                       t: float, t_prime: float, runs: int, seed: int, sites=None) -> dict:
    """Build disagreement paths in many coupled runs and audit each one.

    Every run starts from independent Bernoulli(q') and Bernoulli(q) zeros and
    shares one clock log. Paths are started at each of ``sites`` (default: the
    whole box) where the two processes differ at time t.
    """
    from .harris import evolve_coupled, sample_bernoulli_config, sample_clock_log

    rho = family.range
    if sites is None:
        sites = [tuple(c) for c in geometry.all_coords.tolist()]
    paths = failures = 0
    bad = []
    for run in range(runs):
        key = (seed, run)
        log = sample_clock_log(geometry, q, t, key)
        a = sample_bernoulli_config(geometry, q_prime, key, Purpose.INIT_A)
        b = sample_bernoulli_config(geometry, q, key, Purpose.INIT_B)
        coupled = evolve_coupled(family, geometry, a, b, log, q_prime, q)
        for x in sites:
            path = construct_disagreement_path(coupled, x, t, t_prime)
            if path is None:
                continue
            paths += 1
            checks = {
                "valid": validate_dual_path(path, log, rho),
                "disagrees": disagrees_along(path, coupled),
                "not_activated": not is_activated(path, coupled),
            }
            if not all(checks.values()):
                failures += 1
                if len(bad) < 10:
                    bad.append({"run": run, "site": list(x), "checks": checks, "path": path.to_json()})
    return {"runs": runs, "paths": paths, "violations": failures, "examples": bad}
