"""
Harris graphical construction of a kinetically constrained model on a finite box.

Each site carries a rate-1 Poisson clock whose rings are labelled 0 with
probability q and 1 otherwise (equivalently two independent Poisson processes
of rates q and 1-q). At a label-e ring the site is set to e if some rule,
translated to the site, is entirely at zero just before the ring; otherwise
nothing happens. Two trajectories driven by the same clock log form the
standard coupling.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from math import prod
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels
from .family import UpdateFamily, Vector
from .streams import Purpose, as_generator

__all__ = [
    "Geometry",
    "ClockLog",
    "Trajectory",
    "CoupledTrajectory",
    "sample_clock_log",
    "sample_bernoulli_config",
    "evolve",
    "evolve_coupled",
    "state_at",
    "build_generator",
    "check_detailed_balance",
    "validate_trajectory",
    "write_records",
    "save_log",
    "load_log",
    "LOG_FORMAT_VERSION",
]

BOUNDARIES = ("torus", "frozen-zero", "frozen-one")
LOG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Geometry:
    """A box ``[0, L_1) x ... x [0, L_d)`` with a boundary mode.

    On the torus rule offsets wrap around; in the frozen modes sites outside
    the box are held at 0 or 1 forever.
    """

    shape: tuple[int, ...]
    boundary: str = "torus"

    def __post_init__(self):
        shape = tuple(int(s) for s in (self.shape if isinstance(self.shape, Iterable) else (self.shape,)))
        if len(shape) not in (1, 2) or min(shape) < 1:
            raise ValueError(f"bad box shape {shape}")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        object.__setattr__(self, "shape", shape)

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @property
    def n_sites(self) -> int:
        return prod(self.shape)

    @property
    def ghost(self) -> int:
        return self.n_sites

    @property
    def ghost_value(self) -> int:
        return 0 if self.boundary == "frozen-zero" else 1

    def wrap(self, site: Sequence[int]) -> Vector | None:
        """Box coordinates of a lattice site, or None if it lies outside a frozen box."""
        site = tuple(int(c) for c in site)
        if self.boundary == "torus":
            return tuple(c % L for c, L in zip(site, self.shape))
        if all(0 <= c < L for c, L in zip(site, self.shape)):
            return site
        return None

    def index(self, site) -> int:
        if isinstance(site, (int, np.integer)):
            site = (int(site),)
        w = self.wrap(site)
        if w is None:
            raise ValueError(f"site {tuple(site)} lies outside the box")
        return int(np.ravel_multi_index(w, self.shape))

    def coords(self, idx: int) -> Vector:
        return tuple(int(c) for c in np.unravel_index(int(idx), self.shape))

    @cached_property
    def all_coords(self) -> np.ndarray:
        grids = np.indices(self.shape).reshape(self.dimension, -1)
        return grids.T.astype(np.int64)

    def _translate(self, offsets: np.ndarray) -> np.ndarray:
        """``out[x, j]`` = index of ``x + offsets[j]``, ghost (or -1 via caller) outside."""
        pts = self.all_coords[:, None, :] + offsets[None, :, :]
        shape = np.asarray(self.shape)
        if self.boundary == "torus":
            pts = pts % shape
            inside = np.ones(pts.shape[:2], dtype=bool)
        else:
            inside = np.all((pts >= 0) & (pts < shape), axis=2)
            pts = np.where(inside[..., None], pts, 0)
        idx = np.ravel_multi_index(tuple(np.moveaxis(pts, 2, 0)), self.shape)
        return np.where(inside, idx, self.ghost).astype(np.int64)

    def neighbor_table(self, family: UpdateFamily) -> tuple[np.ndarray, np.ndarray]:
        if family.dimension != self.dimension:
            raise ValueError("family and geometry dimensions differ")
        offsets = np.asarray([x for rule in family.rules for x in rule], dtype=np.int64)
        rule_ptr = np.cumsum([0] + [len(r) for r in family.rules]).astype(np.int64)
        table = self._translate(offsets)
        if np.any(table == np.arange(self.n_sites)[:, None]):
            # a constraint that reads the updated site itself breaks the model
            raise ValueError(f"box {self.shape} is too small: a rule element wraps onto its own site")
        return table, rule_ptr

    def ball_table(self, rho: int) -> np.ndarray:
        """Indices of all sites within l-infinity distance rho; -1 pads missing ones."""
        offsets = np.asarray(list(itertools.product(range(-rho, rho + 1), repeat=self.dimension)))
        table = self._translate(offsets)
        table[table == self.ghost] = -1
        if self.boundary == "torus":
            # small tori see the same site through several offsets
            table = np.sort(table, axis=1)
            dup = np.zeros_like(table, dtype=bool)
            dup[:, 1:] = table[:, 1:] == table[:, :-1]
            table[dup] = -1
        return table

    def distance(self, a: Sequence[int], b: Sequence[int]) -> int:
        d = 0
        for x, y, L in zip(a, b, self.shape):
            delta = abs(int(x) - int(y))
            if self.boundary == "torus":
                delta %= L
                delta = min(delta, L - delta)
            d = max(d, delta)
        return d

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "boundary": self.boundary}

    @classmethod
    def from_json(cls, obj: dict) -> "Geometry":
        return cls(tuple(obj["shape"]), obj.get("boundary", "torus"))


# ---------------------------------------------------------------------------
# clock logs


@dataclass(frozen=True, eq=False)
class ClockLog:
    """All clock rings of a box up to ``horizon``, sorted by (time, site)."""

    geometry: Geometry
    horizon: float
    times: np.ndarray
    sites: np.ndarray
    labels: np.ndarray
    q: float = float("nan")
    seed: object = None

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @classmethod
    def from_events(cls, geometry: Geometry, horizon: float, events, q: float = float("nan")):
        """Build a log by hand from ``(site, time, label)`` triples."""
        events = list(events)
        sites = np.asarray([geometry.index(s) for s, _, _ in events], dtype=np.int64)
        times = np.asarray([t for _, t, _ in events], dtype=np.float64)
        labels = np.asarray([lab for _, _, lab in events], dtype=np.uint8)
        if np.any((times <= 0) | (times > horizon)):
            raise ValueError("ring times must lie in (0, horizon]")
        if np.any(labels > 1):
            raise ValueError("labels are 0 or 1")
        order = np.lexsort((sites, times))
        return cls(geometry, float(horizon), times[order], sites[order], labels[order], q)

    @cached_property
    def _by_site(self) -> tuple[np.ndarray, np.ndarray]:
        order = np.argsort(self.sites, kind="stable")
        ptr = np.searchsorted(self.sites[order], np.arange(self.geometry.n_sites + 1))
        return order, ptr

    def rings_at(self, idx: int) -> np.ndarray:
        """Event indices of the rings at a site, in increasing time."""
        order, ptr = self._by_site
        return order[ptr[idx] : ptr[idx + 1]]

    @cached_property
    def _label_times(self) -> dict:
        return {}

    def label_times(self, idx: int, label: int) -> np.ndarray:
        key = (int(idx), int(label))
        cache = self._label_times
        if key not in cache:
            ev = self.rings_at(idx)
            cache[key] = self.times[ev[self.labels[ev] == label]]
        return cache[key]

    def restrict(self, t_min: float, t_max: float) -> "ClockLog":
        """Rings with ``t_min < time <= t_max`` (the horizon is kept)."""
        keep = (self.times > t_min) & (self.times <= t_max)
        return ClockLog(self.geometry, self.horizon, self.times[keep], self.sites[keep],
                        self.labels[keep], self.q, self.seed)

    def upto(self, t: float) -> int:
        """Number of rings with time <= t."""
        return int(np.searchsorted(self.times, t, side="right"))


def sample_clock_log(geometry: Geometry, q: float, horizon: float, seed) -> ClockLog:
    """Rate-1 clocks on every site, each ring labelled 0 with probability q."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = as_generator(seed, Purpose.CLOCKS)
    n = geometry.n_sites
    counts = rng.poisson(horizon, n)
    total = int(counts.sum())
    times = horizon * (1.0 - rng.random(total))  # (0, horizon]
    labels = (rng.random(total) >= q).astype(np.uint8)
    sites = np.repeat(np.arange(n, dtype=np.int64), counts)
    order = np.lexsort((sites, times))
    return ClockLog(geometry, float(horizon), times[order], sites[order], labels[order], q, seed)


def sample_bernoulli_config(geometry: Geometry, p0: float, seed, purpose: int = Purpose.INIT_A) -> np.ndarray:
    """I.i.d. spins with P(spin = 0) = p0."""
    if not 0.0 <= p0 <= 1.0:
        raise ValueError("p0 must lie in [0, 1]")
    rng = as_generator(seed, purpose)
    return (rng.random(geometry.n_sites) >= p0).astype(np.uint8)


# ---------------------------------------------------------------------------
# trajectories


def _as_config(geometry: Geometry, config) -> np.ndarray:
    arr = np.asarray(config, dtype=np.uint8).reshape(-1)
    if arr.shape[0] != geometry.n_sites:
        raise ValueError("configuration does not cover the box")
    if np.any(arr > 1):
        raise ValueError("spins are 0 or 1")
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    family: UpdateFamily
    geometry: Geometry
    initial: np.ndarray
    log: ClockLog
    accepted: np.ndarray
    changed: np.ndarray

    @property
    def horizon(self) -> float:
        return self.log.horizon

    @cached_property
    def _changes(self) -> tuple[np.ndarray, np.ndarray]:
        ev = np.flatnonzero(self.changed)
        order = np.argsort(self.log.sites[ev], kind="stable")
        ev = ev[order]
        ptr = np.searchsorted(self.log.sites[ev], np.arange(self.geometry.n_sites + 1))
        return ev, ptr

    def changes_at(self, idx: int) -> np.ndarray:
        """Event indices at which the spin of site ``idx`` changed."""
        ev, ptr = self._changes
        return ev[ptr[idx] : ptr[idx + 1]]

    def value_at(self, idx: int, t: float) -> int:
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        ev = self.changes_at(idx)
        k = int(np.searchsorted(self.log.times[ev], t, side="right"))
        return int(self.initial[idx]) if k == 0 else int(self.log.labels[ev[k - 1]])

    def value_before_event(self, idx: int, e: int) -> int:
        """Spin of site ``idx`` after events ``0..e-1`` and before event ``e``."""
        ev = self.changes_at(idx)
        k = int(np.searchsorted(ev, e, side="left"))
        return int(self.initial[idx]) if k == 0 else int(self.log.labels[ev[k - 1]])

    def state_at(self, site, t: float) -> int:
        return self.value_at(self.geometry.index(site), t)

    def config_at(self, t: float) -> np.ndarray:
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        cfg = self.initial.copy()
        ev = np.flatnonzero(self.changed[: self.log.upto(t)])
        if ev.size:
            # last change per site wins
            sites = self.log.sites[ev][::-1]
            uniq, first = np.unique(sites, return_index=True)
            cfg[uniq] = self.log.labels[ev[::-1][first]]
        return cfg

    def flips(self, site) -> list[tuple[float, int]]:
        ev = self.changes_at(self.geometry.index(site))
        return [(float(self.log.times[e]), int(self.log.labels[e])) for e in ev]

    def records(self):
        """``(site, time, label, accepted)`` for every ring, in processing order."""
        coords = self.geometry.all_coords
        for e in range(len(self.log)):
            yield (
                [int(c) for c in coords[self.log.sites[e]]],
                float(self.log.times[e]),
                int(self.log.labels[e]),
                bool(self.accepted[e]),
            )


def state_at(trajectory: Trajectory, site, t: float) -> int:
    return trajectory.state_at(site, t)


def evolve(family: UpdateFamily, geometry: Geometry, initial, log: ClockLog) -> Trajectory:
    if log.geometry != geometry:
        raise ValueError("clock log was sampled on another geometry")
    init = _as_config(geometry, initial)
    nbr, rule_ptr = geometry.neighbor_table(family)
    cfg = np.empty(geometry.n_sites + 1, dtype=np.uint8)
    cfg[:-1] = init
    cfg[-1] = geometry.ghost_value
    accepted, changed = _kernels.run_events(cfg, nbr, rule_ptr, log.sites, log.labels)
    return Trajectory(family, geometry, init.copy(), log, accepted, changed)


@dataclass(frozen=True, eq=False)
class CoupledTrajectory:
    """Two trajectories driven by one clock log."""

    a: Trajectory
    b: Trajectory
    q_prime: float = float("nan")
    q: float = float("nan")

    @property
    def log(self) -> ClockLog:
        return self.a.log

    @property
    def geometry(self) -> Geometry:
        return self.a.geometry

    @property
    def horizon(self) -> float:
        return self.a.horizon

    def disagree(self, site, t: float) -> bool:
        return self.a.state_at(site, t) != self.b.state_at(site, t)


def evolve_coupled(family, geometry, init_a, init_b, log, q_prime=float("nan"), q=float("nan")) -> CoupledTrajectory:
    return CoupledTrajectory(
        evolve(family, geometry, init_a, log), evolve(family, geometry, init_b, log), q_prime, q
    )


def validate_trajectory(traj: Trajectory) -> int | None:
    """Independent replay; returns the first illegal event index or None.

    Re-derives every spin from scratch with plain Python sets, without the
    kernels, and checks that each recorded change had a rule fully at zero
    just before it and that every legal ring was applied.
    """
    geo, fam = traj.geometry, traj.family
    cfg = {i: int(v) for i, v in enumerate(traj.initial)}
    coords = geo.all_coords

    def spin(site):
        w = geo.wrap(site)
        return geo.ghost_value if w is None else cfg[geo.index(w)]

    for e in range(len(traj.log)):
        x = traj.log.sites[e]
        xc = coords[x]
        legal = any(all(spin(tuple(xc + np.asarray(v))) == 0 for v in rule) for rule in fam.rules)
        label = int(traj.log.labels[e])
        if legal != bool(traj.accepted[e]):
            return e
        new = label if legal else cfg[x]
        if (new != cfg[x]) != bool(traj.changed[e]):
            return e
        cfg[x] = new
    return None


# ---------------------------------------------------------------------------
# exact generator on tiny boxes

MAX_GENERATOR_SITES = 16


def build_generator(family: UpdateFamily, geometry: Geometry, q: float) -> sp.csr_matrix:
    """Rate matrix over {0,1}^box; bit i of a state index is the spin of site i."""
    n = geometry.n_sites
    if n > MAX_GENERATOR_SITES:
        raise ValueError(f"state space 2^{n} too large (limit 2^{MAX_GENERATOR_SITES})")
    nbr, rule_ptr = geometry.neighbor_table(family)
    states = np.arange(2**n, dtype=np.int64)
    bits = ((states[:, None] >> np.arange(n)) & 1).astype(np.uint8)
    bits = np.concatenate([bits, np.full((len(states), 1), geometry.ghost_value, np.uint8)], axis=1)
    rows, cols, vals = [], [], []
    for x in range(n):
        zero = bits[:, nbr[x]] == 0
        ok = np.zeros(len(states), dtype=bool)
        for r in range(len(rule_ptr) - 1):
            ok |= zero[:, rule_ptr[r] : rule_ptr[r + 1]].all(axis=1)
        rate = np.where(bits[:, x] == 1, q, 1.0 - q)
        keep = ok & (rate > 0)
        rows.append(states[keep])
        cols.append(states[keep] ^ (1 << x))
        vals.append(rate[keep])
    rows, cols, vals = (np.concatenate(a) for a in (rows, cols, vals))
    Q = sp.csr_matrix((vals, (rows, cols)), shape=(2**n, 2**n))
    out = Q - sp.diags(np.asarray(Q.sum(axis=1)).ravel())
    return sp.csr_matrix(out)


def equilibrium_weights(n_sites: int, q: float) -> np.ndarray:
    states = np.arange(2**n_sites, dtype=np.int64)
    ones = np.array([bin(s).count("1") for s in states])
    return q ** (n_sites - ones) * (1.0 - q) ** ones


def check_detailed_balance(Q, q: float) -> float:
    """max |pi(a) Q(a,b) - pi(b) Q(b,a)| for the product measure with P(0) = q."""
    Q = sp.csr_matrix(Q)
    m = Q.shape[0]
    n = m.bit_length() - 1
    if 2**n != m:
        raise ValueError("generator size is not a power of two")
    flux = sp.diags(equilibrium_weights(n, q)) @ Q
    diff = (flux - flux.T).tocoo()
    return float(np.max(np.abs(diff.data))) if diff.nnz else 0.0


# ---------------------------------------------------------------------------
# export


def write_records(traj: Trajectory, fh) -> None:
    """One JSON object per ring: site, time, label, accepted."""
    for site, t, label, acc in traj.records():
        fh.write(json.dumps({"site": site, "time": t, "label": label, "accepted": acc}) + "\n")


def save_log(log: ClockLog, path) -> None:
    np.savez(
        path,
        format_version=LOG_FORMAT_VERSION,
        shape=np.asarray(log.geometry.shape),
        boundary=np.asarray(log.geometry.boundary),
        horizon=log.horizon,
        q=log.q,
        times=log.times,
        sites=log.sites,
        labels=log.labels,
    )


def load_log(path) -> ClockLog:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != LOG_FORMAT_VERSION:
            raise ValueError(f"unsupported clock-log format version {version}")
        geo = Geometry(tuple(int(s) for s in data["shape"]), str(data["boundary"]))
        return ClockLog(geo, float(data["horizon"]), data["times"].copy(), data["sites"].copy(),
                        data["labels"].copy(), float(data["q"]))
