"""
Oriented percolation driven by clock rings.

For an anchor y and a level k, level n of the lattice looks at the time
window ``(t - (k+n)K, t - (k+n-1)K]``. The vertex (r, n) stands for the
rectangle ``y + ((r-n)/2) a1u + R``. Its vertical bond is open when that
rectangle sees no 1-ring in the window. Its diagonal bond is open when the
rectangle and the shifted certificate sites see no 1-ring, and the shifted
sites x_1..x_m ring 0 in that order. Occupation spreads from (0, 0) along
open bonds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._parallel import run_replicas
from .bootstrap import SpreadCertificate
from .dual import Coding
from .harris import ClockLog, Geometry, Trajectory, sample_clock_log
from .stats import verdict, wilson

__all__ = [
    "AuxParams",
    "OPLattice",
    "ZetaRun",
    "NotApplicable",
    "GeometryError",
    "q_threshold",
    "aux_geometry",
    "build_bonds",
    "run_zeta",
    "event_W",
    "check_transfer",
    "transfer_counterexample",
    "find_k_gamma",
    "bond_closed_prob_exact",
    "estimate_bond_closed_prob",
    "estimate_extinction_tail",
    "estimate_survival_smallX",
    "extinction_bound",
    "transfer_experiment",
]


class NotApplicable(ValueError):
    """The hypotheses of the transfer check do not hold."""


class GeometryError(ValueError):
    pass


def q_threshold(K: float, rectangle_size: int) -> float:
    """1 + ln(1 - e^{-K}) / (3 K |R|)."""
    if K <= 0 or rectangle_size < 1:
        raise ValueError("need K > 0 and |R| >= 1")
    return 1.0 + math.log1p(-math.exp(-K)) / (3.0 * K * rectangle_size)


@dataclass(frozen=True)
class AuxParams:
    certificate: SpreadCertificate
    K: float
    t: float
    q: float = 1.0
    q_prime: float = float("nan")

    def __post_init__(self):
        if self.K <= 0:
            raise ValueError("K must be positive")
        if self.t < self.K:
            raise ValueError("need t >= K")

    @property
    def levels(self) -> int:
        return math.floor(self.t / self.K)

    def depth(self, k: int) -> int:
        if not 0 <= k <= self.levels:
            raise ValueError(f"k must lie in 0..{self.levels}")
        return self.levels - k

    def base_time(self) -> float:
        """Time at which the lattice's last level starts: t - floor(t/K) K."""
        return self.t - self.levels * self.K

    def to_json(self) -> dict:
        return {"certificate": self.certificate.to_json(), "K": self.K, "t": self.t,
                "q": self.q, "q_prime": None if math.isnan(self.q_prime) else self.q_prime}


def _touched_offsets(cert: SpreadCertificate, depth: int) -> np.ndarray:
    base = np.asarray(list(cert.rectangle) + list(cert.sequence), dtype=np.int64)
    a1 = np.asarray(cert.a1_offset, dtype=np.int64)
    shifts = np.arange(-depth, 1)[:, None] * a1[None, :]
    return (shifts[:, None, :] + base[None, :, :]).reshape(-1, len(a1))


def aux_geometry(cert: SpreadCertificate, depth: int, boundary: str = "torus", margin: int = 1):
    """Smallest box holding every site a lattice of the given depth looks at.

    Returns ``(geometry, y)`` with y the anchor inside the box.
    """
    pts = _touched_offsets(cert, depth)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    shape = tuple(int(h - l + 1 + 2 * margin) for l, h in zip(lo, hi))
    y = tuple(int(margin - l) for l in lo)
    return Geometry(shape, boundary), y


@dataclass(frozen=True, eq=False)
class OPLattice:
    """Bond states of one lattice; arrays are indexed ``[n, r + depth]``.

    Row 0 is unused. ``vertical[n, r]`` is the bond (r-1, n-1) -> (r, n) and
    ``diagonal[n, r]`` the bond (r+1, n-1) -> (r, n).
    """

    y: tuple
    k: int
    depth: int
    K: float
    t: float
    vertical: np.ndarray
    diagonal: np.ndarray

    def bond(self, kind: str, r: int, n: int) -> bool:
        arr = self.vertical if kind == "vertical" else self.diagonal
        if not 1 <= n <= self.depth or abs(r) > n or (r + n) % 2:
            raise ValueError("no such bond")
        return bool(arr[n, r + self.depth])

    @cached_property
    def zeta(self) -> "ZetaRun":
        return run_zeta(self)


def _window(t: float, K: float, k: int, n: int) -> tuple[float, float]:
    return t - (k + n) * K, t - (k + n - 1) * K


def _site_indices(geo: Geometry, sites: np.ndarray) -> np.ndarray:
    out = np.empty(len(sites), dtype=np.int64)
    for j, s in enumerate(sites):
        w = geo.wrap(s)
        if w is None:
            raise GeometryError(f"site {tuple(int(c) for c in s)} lies outside the box")
        out[j] = geo.index(w)
    return out


def build_bonds(log: ClockLog, params: AuxParams, y, k: int) -> OPLattice:
    cert = params.certificate
    geo = log.geometry
    depth = params.depth(k)
    if params.t > log.horizon:
        raise ValueError("the log stops before t")
    y = np.asarray(y if not isinstance(y, (int, np.integer)) else (y,), dtype=np.int64)
    R = np.asarray(cert.rectangle, dtype=np.int64)
    X = np.asarray(cert.sequence, dtype=np.int64).reshape(-1, len(y))
    a1 = np.asarray(cert.a1_offset, dtype=np.int64)
    width = 2 * depth + 1
    vertical = np.zeros((depth + 1, width), dtype=bool)
    diagonal = np.zeros((depth + 1, width), dtype=bool)

    def quiet(idx: np.ndarray, lo: float, hi: float) -> bool:
        for i in idx:
            ts = log.label_times(i, 1)
            if np.searchsorted(ts, hi, side="right") > np.searchsorted(ts, lo, side="right"):
                return False
        return True

    def ordered_zero_rings(idx: np.ndarray, lo: float, hi: float) -> bool:
        cur = lo
        for i in idx:
            ts = log.label_times(i, 0)
            j = np.searchsorted(ts, cur, side="right")
            if j >= ts.size or ts[j] > hi:
                return False
            cur = ts[j]
        return True

    cache = {}
    for n in range(1, depth + 1):
        lo, hi = _window(params.t, params.K, k, n)
        for r in range(-n, n + 1, 2):
            shift = (r - n) // 2
            if shift not in cache:
                off = y + shift * a1
                cache[shift] = (_site_indices(geo, off + R), _site_indices(geo, off + X))
            r_idx, x_idx = cache[shift]
            v = quiet(r_idx, lo, hi)
            vertical[n, r + depth] = v
            diagonal[n, r + depth] = v and quiet(x_idx, lo, hi) and ordered_zero_rings(x_idx, lo, hi)
    return OPLattice(tuple(int(c) for c in y), int(k), depth, float(params.K), float(params.t),
                     vertical, diagonal)


@dataclass(frozen=True)
class ZetaRun:
    occupation: np.ndarray  # [n, r + depth]
    tau: float  # math.inf when the process survives every level
    X: tuple[int, ...]

    @property
    def survives(self) -> bool:
        return math.isinf(self.tau)


def run_zeta(lattice: OPLattice) -> ZetaRun:
    depth = lattice.depth
    occ = np.zeros((depth + 1, 2 * depth + 1), dtype=bool)
    occ[0, depth] = True
    tau = math.inf
    for n in range(1, depth + 1):
        prev = occ[n - 1]
        from_left = np.zeros_like(prev)
        from_right = np.zeros_like(prev)
        from_left[1:] = prev[:-1]  # parent r-1
        from_right[:-1] = prev[1:]  # parent r+1
        occ[n] = (from_left & lattice.vertical[n]) | (from_right & lattice.diagonal[n])
        if not occ[n].any():
            tau = n
            occ[n + 1 :] = False
            break
    half = depth // 2
    last = occ[depth]
    X = tuple(r for r in range(-half, half + 1) if last[r + depth])
    return ZetaRun(occ, float(tau), X)


# ---------------------------------------------------------------------------
# transfer of zeroes


def _rect_indices(geo: Geometry, cert: SpreadCertificate, y, shift: int) -> np.ndarray:
    y = np.asarray(y if not isinstance(y, (int, np.integer)) else (y,), dtype=np.int64)
    pts = y + shift * np.asarray(cert.a1_offset) + np.asarray(cert.rectangle)
    return _site_indices(geo, pts)


def _rect_zero(traj: Trajectory, idx: np.ndarray, time: float) -> bool:
    return all(traj.value_at(int(i), time) == 0 for i in idx)


def event_W(traj: Trajectory, params: AuxParams, y, k: int, r: int) -> bool:
    """The rectangle of (r, depth) is all zero at t - floor(t/K) K."""
    depth = params.depth(k)
    if abs(r) > depth // 2:
        raise ValueError(f"r must lie in [-{depth // 2}, {depth // 2}]")
    if (r - depth) % 2:
        return False
    idx = _rect_indices(traj.geometry, params.certificate, y, (r - depth) // 2)
    return _rect_zero(traj, idx, params.base_time())


def check_transfer(traj: Trajectory, params: AuxParams, y, k: int, r0: int,
                   lattice: OPLattice | None = None) -> bool:
    """If (r0, depth) is occupied and its rectangle is zero at the base time,
    report whether y + R is zero at t - kK.
    """
    depth = params.depth(k)
    if lattice is None:
        lattice = build_bonds(traj.log, params, y, k)
    if abs(r0) > depth or (r0 + depth) % 2 or not lattice.zeta.occupation[depth, r0 + depth]:
        raise NotApplicable(f"vertex ({r0}, {depth}) is not occupied")
    geo = traj.geometry
    src = _rect_indices(geo, params.certificate, y, (r0 - depth) // 2)
    if not _rect_zero(traj, src, params.base_time()):
        raise NotApplicable("starting rectangle is not all zero")
    dst = _rect_indices(geo, params.certificate, y, 0)
    return _rect_zero(traj, dst, params.t - k * params.K)


def transfer_counterexample(traj: Trajectory, params: AuxParams, y, k: int, r0: int) -> dict:
    """Everything needed to replay a failed transfer check."""
    log = traj.log
    return {
        "params": params.to_json(),
        "y": list(np.atleast_1d(y).tolist()),
        "k": k,
        "r0": r0,
        "family": traj.family.to_json(),
        "geometry": traj.geometry.to_json(),
        "initial": traj.initial.tolist(),
        "log": {"horizon": log.horizon, "times": log.times.tolist(),
                "sites": log.sites.tolist(), "labels": log.labels.tolist()},
    }


def find_k_gamma(coding: Coding, log: ClockLog, params: AuxParams):
    """Smallest k with a surviving lattice anchored at y_k, as ``(k, y_k)``; None if none."""
    for k, yk in enumerate(coding.sites):
        if k > params.levels:
            break
        if build_bonds(log, params, yk, k).zeta.survives:
            return k, tuple(yk)
    return None


# ---------------------------------------------------------------------------
# Monte Carlo estimators


def bond_closed_prob_exact(cert: SpreadCertificate, K: float, q: float) -> float:
    """Probability that a diagonal bond is closed.

    The 1-rings and 0-rings of a site are independent Poisson processes; the
    ordered 0-ring condition on m distinct sites holds iff m independent
    Exp(q) waits fit in a window of length K.
    """
    sites = set(cert.rectangle) | set(cert.sequence)
    p_quiet = math.exp(-len(sites) * (1.0 - q) * K)
    m = cert.m
    mu = q * K
    p_few = sum(math.exp(-mu) * mu**i / math.factorial(i) for i in range(m))
    return 1.0 - p_quiet * (1.0 - p_few)


def _record(params: dict, successes: int, trials: int, bound: float | None) -> dict:
    lo, hi = wilson(successes, trials)
    return {
        "params": params,
        "estimate": successes / trials,
        "ci_low": lo,
        "ci_high": hi,
        "bound": bound,
        "verdict": verdict(lo, hi, bound),
        "successes": successes,
        "replicas": trials,
    }


def estimate_bond_closed_prob(params: AuxParams, replicas: int, seed: int) -> dict:
    """Frequency of a closed diagonal bond over independent windows of length K."""
    one = AuxParams(params.certificate, params.K, params.K, params.q, params.q_prime)
    geo, y = aux_geometry(params.certificate, 1)

    def task(i, key):
        log = sample_clock_log(geo, params.q, params.K, key)
        return int(not build_bonds(log, one, y, 0).bond("diagonal", -1, 1))

    closed = sum(run_replicas(task, replicas, seed))
    info = {"K": params.K, "q": params.q, "R": params.certificate.size, "m": params.certificate.m,
            "exact": bond_closed_prob_exact(params.certificate, params.K, params.q)}
    return _record(info, closed, replicas, math.exp(-params.K / 4))


def extinction_bound(K: float, n: int) -> float:
    return 2.0 * 3.0 ** (2 * n) * math.exp(-K * n / 24.0)


def _zeta_replicas(params: AuxParams, replicas: int, seed: int, summarize):
    depth = params.levels
    geo, y = aux_geometry(params.certificate, depth)

    def task(i, key):
        log = sample_clock_log(geo, params.q, params.t, key)
        return summarize(build_bonds(log, params, y, 0).zeta)

    return run_replicas(task, replicas, seed)


def estimate_extinction_tail(params: AuxParams, n: int, replicas: int, seed: int) -> dict:
    """Frequency of n <= tau < infinity for the lattice of depth floor(t/K)."""
    if not 1 <= n <= params.levels:
        raise ValueError("n must lie in 1..floor(t/K)")
    hits = sum(_zeta_replicas(params, replicas, seed, lambda z: int(n <= z.tau < math.inf)))
    info = {"K": params.K, "q": params.q, "t": params.t, "depth": params.levels, "n": n}
    return _record(info, hits, replicas, extinction_bound(params.K, n))


def estimate_survival_smallX(params: AuxParams, alpha: float, replicas: int, seed: int) -> dict:
    """Frequency of survival with |X| <= (alpha/2) * depth."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    depth = params.levels
    cut = alpha / 2 * depth
    hits = sum(_zeta_replicas(params, replicas, seed, lambda z: int(z.survives and len(z.X) <= cut)))
    info = {"K": params.K, "q": params.q, "t": params.t, "depth": depth, "alpha": alpha}
    return _record(info, hits, replicas, None)


def transfer_experiment(family, params: AuxParams, geometry: Geometry, runs: int, seed: int,
                        y=None) -> dict:
    """Audit the transfer of zeroes on every applicable (k, r0) of many runs.

    Initial spins are Bernoulli(q') zeros (q' defaults to q); clocks use q.
    """
    from .harris import evolve, sample_bernoulli_config

    q0 = params.q if math.isnan(params.q_prime) else params.q_prime
    if y is None:
        y = tuple(L // 2 for L in geometry.shape)
    applicable_runs = checks = failures = 0
    bad = []
    for run in range(runs):
        key = (seed, run)
        log = sample_clock_log(geometry, params.q, params.t, key)
        traj = evolve(family, geometry, sample_bernoulli_config(geometry, q0, key), log)
        hit = False
        for k in range(params.levels + 1):
            lattice = build_bonds(log, params, y, k)
            depth = params.depth(k)
            for r0 in range(-depth, depth + 1, 2):
                try:
                    ok = check_transfer(traj, params, y, k, r0, lattice=lattice)
                except NotApplicable:
                    continue
                hit = True
                checks += 1
                if not ok:
                    failures += 1
                    if len(bad) < 3:
                        bad.append(transfer_counterexample(traj, params, y, k, r0))
        applicable_runs += hit
    return {"runs": runs, "applicable_runs": applicable_runs, "checks": checks,
            "violations": failures, "counterexamples": bad}
