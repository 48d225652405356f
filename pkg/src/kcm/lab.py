"""
Experiment harness: replica batches of the Harris dynamics observed at fixed
times, exponential fits, stationarity checks and result files.

Replicas are grouped in fixed-size batches. Replica i always draws from the
streams keyed by (seed, i), and batch results are merged in batch order, so
the output does not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as _st

from . import _kernels
from ._parallel import ReplicaError, run_replicas
from .family import UpdateFamily, load_family
from .harris import Geometry, sample_clock_log
from .stats import Verdict, mean_ci, wilson
from .streams import Purpose, as_generator

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ExperimentConfig",
    "Series",
    "DecayFit",
    "TooFewPoints",
    "BelowMeasurementFloor",
    "LocalFunction",
    "ReplicaError",
    "run_replicas",
    "run_disagreement_experiment",
    "fit_exponential",
    "run_theorem_experiment",
    "run_stationarity_check",
    "write_series_csv",
    "dump_json",
]

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class BelowMeasurementFloor(ValueError):
    pass


@dataclass
class ExperimentConfig:
    family: object
    geometry: Geometry
    q: float
    q_prime: float
    horizon: float
    obs_times: list
    obs_sites: list | None = None
    replicas: int = 1000
    seed: int = 0
    K: float | None = None
    N: float | None = None
    output: str | None = None
    coupled_initial: bool = False
    batch: int = 128
    fit_window: list | None = None
    r2_min: float = 0.95
    assert_decay: bool = False

    def __post_init__(self):
        if isinstance(self.geometry, dict):
            self.geometry = Geometry.from_json(self.geometry)
        for name in ("q", "q_prime"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if int(self.replicas) < 1:
            raise ConfigError("replicas must be at least 1")
        if int(self.batch) < 1:
            raise ConfigError("batch must be at least 1")
        self.replicas, self.batch, self.seed = int(self.replicas), int(self.batch), int(self.seed)
        self.obs_times = [float(t) for t in self.obs_times]
        if not self.obs_times or any(not 0 <= t <= self.horizon for t in self.obs_times):
            raise ConfigError("observation times must lie in [0, horizon]")
        if sorted(self.obs_times) != self.obs_times:
            raise ConfigError("observation times must be increasing")
        d = self.geometry.dimension
        if self.obs_sites is None:
            self.obs_sites = [[0] * d]
        self.obs_sites = [list(np.atleast_1d(s).astype(int).tolist()) for s in self.obs_sites]
        if any(len(s) != d for s in self.obs_sites):
            raise ConfigError("observation sites must match the geometry dimension")
        try:
            fam = self.load_family()
        except (ValueError, KeyError, OSError) as exc:
            raise ConfigError(f"bad family: {exc}") from exc
        if fam.dimension != d:
            raise ConfigError("family and geometry dimensions differ")

    def load_family(self) -> UpdateFamily:
        return load_family(self.family)

    @classmethod
    def from_json(cls, obj) -> "ExperimentConfig":
        if isinstance(obj, (str, Path)):
            path = Path(obj)
            obj = json.loads(path.read_text())
            fam = obj.get("family")
            if isinstance(fam, str) and fam.endswith(".json") and not Path(fam).is_absolute():
                obj["family"] = str(path.parent / fam)
        obj = dict(obj)
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("family", "geometry", "q", "q_prime", "horizon", "obs_times") if k not in obj]
        if missing:
            raise ConfigError(f"missing config keys: {missing}")
        return cls(**obj)

    def to_json(self) -> dict:
        out = asdict(self)
        out["geometry"] = self.geometry.to_json()
        fam = self.family
        out["family"] = fam.to_json() if isinstance(fam, UpdateFamily) else fam
        return out


# ---------------------------------------------------------------------------
# batched simulation


def _pad_logs(logs, cuts_times):
    n = len(logs)
    width = max(1, max(len(l) for l in logs))
    sites = np.zeros((n, width), dtype=np.int64)
    labels = np.zeros((n, width), dtype=np.uint8)
    counts = np.zeros(n, dtype=np.int64)
    cuts = np.zeros((n, len(cuts_times)), dtype=np.int64)
    for i, log in enumerate(logs):
        m = len(log)
        sites[i, :m] = log.sites
        labels[i, :m] = log.labels
        counts[i] = m
        cuts[i] = np.searchsorted(log.times, cuts_times, side="right")
    return sites, labels, counts, cuts


def _init_pair(cfg: ExperimentConfig, key, n: int):
    """Initial configurations distributed as Bernoulli(q') and Bernoulli(q) zeros."""
    if cfg.coupled_initial:
        u = as_generator(key, Purpose.INIT_SHARED).random(n)
        return (u >= cfg.q_prime).astype(np.uint8), (u >= cfg.q).astype(np.uint8)
    a = (as_generator(key, Purpose.INIT_A).random(n) >= cfg.q_prime).astype(np.uint8)
    b = (as_generator(key, Purpose.INIT_B).random(n) >= cfg.q).astype(np.uint8)
    return a, b


def _simulate(cfg: ExperimentConfig, init):
    """Observe every replica; returns ``obs[replica, copy, time, site]`` in replica order.

    ``init(key, n)`` returns one initial configuration per copy.
    """
    fam = cfg.load_family()
    geo = cfg.geometry
    nbr, rule_ptr = geo.neighbor_table(fam)
    obs_idx = np.asarray([geo.index(s) for s in cfg.obs_sites], dtype=np.int64)
    times = np.asarray(cfg.obs_times)
    n_batches = -(-cfg.replicas // cfg.batch)
    n = geo.n_sites

    def task(b, _key):
        reps = range(b * cfg.batch, min((b + 1) * cfg.batch, cfg.replicas))
        logs, cfgs = [], []
        for i in reps:
            key = (cfg.seed, i)
            logs.append(sample_clock_log(geo, cfg.q, cfg.horizon, key))
            cfgs.append(init(key, n))
        sites, labels, counts, cuts = _pad_logs(logs, times)
        arr = np.empty((len(logs), len(cfgs[0]), n + 1), dtype=np.uint8)
        for r, pair in enumerate(cfgs):
            for c, conf in enumerate(pair):
                arr[r, c, :n] = conf
        arr[:, :, n] = geo.ghost_value
        return _kernels.observe_batch(arr, nbr, rule_ptr, sites, labels, counts, cuts, obs_idx)

    parts = run_replicas(task, n_batches, cfg.seed)
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# series and fits


@dataclass
class Series:
    times: list
    estimate: list
    ci_low: list
    ci_high: list
    n_replicas: int
    successes: list | None = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        for j, t in enumerate(self.times):
            yield t, self.estimate[j], self.ci_low[j], self.ci_high[j], self.n_replicas

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


def _proportion_series(hits: np.ndarray, times, n_sites: int) -> Series:
    """``hits[replica, time, site]`` booleans to estimates with intervals.

    One observed site gives Wilson intervals. With several sites, per-replica
    fractions are averaged and the interval comes from their spread, since
    sites of one replica are dependent.
    """
    R = hits.shape[0]
    per_rep = hits.sum(axis=2).astype(np.int64)  # [replica, time]
    k = per_rep.sum(axis=0)
    est, lo, hi = [], [], []
    for j in range(len(times)):
        kj = int(k[j])
        if n_sites == 1 or kj == 0:
            a, b = wilson(kj, R)
        else:
            sq = int((per_rep[:, j] ** 2).sum())
            a, b = mean_ci(kj / n_sites, sq / n_sites**2, R)
            a, b = max(a, 0.0), min(b, 1.0)
        est.append(kj / (R * n_sites))
        lo.append(a)
        hi.append(b)
    return Series(list(times), est, lo, hi, R, [int(x) for x in k])


def run_disagreement_experiment(cfg: ExperimentConfig) -> Series:
    """Frequency of eta_t(x) != eta~_t(x) for the coupled pair started from (q', q)."""
    obs = _simulate(cfg, lambda key, n: _init_pair(cfg, key, n))
    hits = obs[:, 0] != obs[:, 1]
    s = _proportion_series(hits, cfg.obs_times, len(cfg.obs_sites))
    s.meta = {"q": cfg.q, "q_prime": cfg.q_prime, "seed": cfg.seed, "sites": cfg.obs_sites}
    return s


@dataclass
class DecayFit:
    rate: float
    amplitude: float
    r2: float
    window: tuple
    rate_ci: tuple
    slope: float
    used: int
    dropped: list

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}


def fit_exponential(times: Sequence[float], estimates: Sequence[float], window=None,
                    level: float = 0.95) -> DecayFit:
    """Least squares line through (t, log p) over the positive points of the window.

    The decay rate is ``max(0, -slope)``; its interval comes from the slope's
    standard error.
    """
    t = np.asarray(times, dtype=float)
    p = np.asarray(estimates, dtype=float)
    if window is not None:
        keep = (t >= window[0]) & (t <= window[1])
        t, p = t[keep], p[keep]
    win = (float(t.min()), float(t.max())) if t.size else (math.nan, math.nan)
    zero = p <= 0
    if t.size and zero.sum() * 2 > t.size:
        raise BelowMeasurementFloor(f"{int(zero.sum())} of {t.size} estimates are zero")
    dropped = [float(x) for x in t[zero]]
    t, p = t[~zero], p[~zero]
    if t.size < 3:
        raise TooFewPoints("need at least 3 positive estimates")
    y = np.log(p)
    tm, ym = t.mean(), y.mean()
    sxx = float(((t - tm) ** 2).sum())
    slope = float(((t - tm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * tm)
    resid = y - (intercept + slope * t)
    ss_res = float((resid**2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    dof = t.size - 2
    if dof > 0:
        se = math.sqrt(ss_res / dof / sxx)
        half = float(_st.t.ppf(0.5 + level / 2, dof)) * se
    else:
        half = math.inf
    ci = (-slope - half, -slope + half)
    return DecayFit(max(0.0, -slope), math.exp(intercept), r2, win, ci, slope, int(t.size), dropped)


# ---------------------------------------------------------------------------
# local functions


@dataclass(frozen=True)
class LocalFunction:
    """f(eta) = table[sum_i eta(support_i) 2^i]."""

    support: tuple
    table: tuple

    MAX_SUPPORT = 16

    def __post_init__(self):
        if len(self.support) > self.MAX_SUPPORT:
            raise ValueError(f"support larger than {self.MAX_SUPPORT} sites")
        if len(self.table) != 2 ** len(self.support):
            raise ValueError("the table needs one value per configuration of the support")

    @classmethod
    def from_json(cls, obj) -> "LocalFunction":
        if isinstance(obj, (str, Path)):
            obj = json.loads(Path(obj).read_text())
        return cls(tuple(tuple(np.atleast_1d(s).tolist()) for s in obj["support"]),
                   tuple(float(v) for v in obj["table"]))

    @classmethod
    def zero_indicator(cls, site) -> "LocalFunction":
        return cls((tuple(np.atleast_1d(site).tolist()),), (1.0, 0.0))

    def mean_under(self, q: float) -> float:
        """Expectation under i.i.d. spins with P(0) = q."""
        total = 0.0
        for idx, v in enumerate(self.table):
            ones = bin(idx).count("1")
            total += v * q ** (len(self.support) - ones) * (1 - q) ** ones
        return total

    def evaluate(self, spins: np.ndarray) -> np.ndarray:
        """``spins[..., i]`` is the spin at support site i."""
        weights = 1 << np.arange(len(self.support))
        return np.asarray(self.table)[(spins.astype(np.int64) * weights).sum(axis=-1)]


def run_theorem_experiment(cfg: ExperimentConfig, f: LocalFunction) -> Series:
    """|E f(eta_t) - nu_q(f)| for the process started from Bernoulli(q')."""
    sub = ExperimentConfig(**{**cfg.__dict__, "obs_sites": [list(s) for s in f.support]})

    def init(key, n):
        return ((as_generator(key, Purpose.INIT_A).random(n) >= cfg.q_prime).astype(np.uint8),)

    obs = _simulate(sub, init)[:, 0]  # [replica, time, site]
    vals = f.evaluate(obs)  # [replica, time]
    target = f.mean_under(cfg.q)
    R = vals.shape[0]
    binary = set(f.table) <= {0.0, 1.0}
    est, lo, hi = [], [], []
    for j in range(vals.shape[1]):
        col = vals[:, j]
        m = float(col.sum()) / R
        if binary:
            a, b = wilson(int(col.sum()), R)
        else:
            a, b = mean_ci(float(col.sum()), float((col**2).sum()), R)
        diff = abs(m - target)
        low = 0.0 if a <= target <= b else min(abs(a - target), abs(b - target))
        est.append(diff)
        lo.append(low)
        hi.append(max(abs(a - target), abs(b - target)))
    return Series(list(cfg.obs_times), est, lo, hi, R,
                  meta={"target": target, "q": cfg.q, "q_prime": cfg.q_prime, "seed": cfg.seed})


def run_stationarity_check(cfg: ExperimentConfig, n_se: float = 4.0) -> dict:
    """Start from Bernoulli(q) and compare the zero density with q at every time."""

    def init(key, n):
        return ((as_generator(key, Purpose.INIT_A).random(n) >= cfg.q).astype(np.uint8),)

    obs = _simulate(cfg, init)[:, 0]  # [replica, time, site]
    R, _, S = obs.shape
    zeros = (obs == 0).sum(axis=2).astype(np.int64)  # [replica, time]
    rows = []
    ok = True
    for j, t in enumerate(cfg.obs_times):
        k = int(zeros[:, j].sum())
        density = k / (R * S)
        if S == 1:
            se = math.sqrt(cfg.q * (1 - cfg.q) / R)
        else:
            frac = zeros[:, j] / S
            se = float(frac.std(ddof=1) / math.sqrt(R)) if R > 1 else math.inf
        passed = abs(density - cfg.q) <= n_se * se
        ok &= passed
        rows.append({"t": t, "density": density, "se": se, "pass": bool(passed)})
    return {
        "schema_version": SCHEMA_VERSION,
        "q": cfg.q,
        "replicas": R,
        "sites": cfg.obs_sites,
        "n_se": n_se,
        "rows": rows,
        "verdict": Verdict.SATISFIED if ok else Verdict.VIOLATED,
    }


# ---------------------------------------------------------------------------
# output


def series_csv(series: Series) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "estimate", "ci_low", "ci_high", "n_replicas"])
    for row in series.rows():
        w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_series_csv(series: Series, path) -> None:
    Path(path).write_text(series_csv(series))


def dump_json(obj, path=None) -> str:
    """Strict JSON; infinite and NaN floats become the strings "inf", "-inf" and "nan"."""
    text = json.dumps(_finite(obj), sort_keys=True, indent=2, default=_json_default,
                      allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _finite(o):
    if isinstance(o, (float, np.floating)):
        o = float(o)
        return o if math.isfinite(o) else repr(o)
    if isinstance(o, dict):
        return {k: _finite(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_finite(v) for v in o]
    if isinstance(o, np.ndarray):
        return _finite(o.tolist())
    return o


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")
