"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_backends.py [--repeat 3] [--quick]

Each kernel runs on identical inputs under both backends; the outputs are
compared before any timing is reported. The first numba call (compilation)
is excluded.
"""

import argparse
import time

import numpy as np

from kcm import _backend, _kernels
from kcm.family import BUILTIN_FAMILIES
from kcm.harris import Geometry, sample_bernoulli_config, sample_clock_log


def _events_case(L, horizon):
    g = Geometry((L,))
    nbr, ptr = g.neighbor_table(BUILTIN_FAMILIES["fa1f"])
    log = sample_clock_log(g, 0.8, horizon, 1)
    init = np.concatenate([sample_bernoulli_config(g, 0.5, 1), [g.ghost_value]]).astype(np.uint8)

    def run():
        cfg = init.copy()
        return _kernels.run_events(cfg, nbr, ptr, log.sites, log.labels), cfg

    return f"run_events fa1f L={L} ({len(log)} rings)", run


def _batch_case(L, horizon, reps):
    g = Geometry((L,))
    nbr, ptr = g.neighbor_table(BUILTIN_FAMILIES["fa1f"])
    logs = [sample_clock_log(g, 0.9, horizon, (2, i)) for i in range(reps)]
    width = max(len(l) for l in logs)
    sites = np.zeros((reps, width), np.int64)
    labels = np.zeros((reps, width), np.uint8)
    for i, l in enumerate(logs):
        sites[i, : len(l)] = l.sites
        labels[i, : len(l)] = l.labels
    counts = np.array([len(l) for l in logs], np.int64)
    times = np.linspace(0, horizon, 11)
    cuts = np.stack([np.searchsorted(l.times, times, side="right") for l in logs])
    obs = np.arange(L, dtype=np.int64)
    base = np.zeros((reps, 2, L + 1), np.uint8)
    for i in range(reps):
        base[i, 0, :L] = sample_bernoulli_config(g, 0.5, (2, i), 2)
        base[i, 1, :L] = sample_bernoulli_config(g, 0.9, (2, i), 3)

    def run():
        return _kernels.observe_batch(base.copy(), nbr, ptr, sites, labels, counts, cuts, obs)

    return f"observe_batch fa1f L={L} x {reps} replicas", run


def _jumps_case(side, horizon):
    g = Geometry((side, side))
    log = sample_clock_log(g, 0.5, horizon, 3)
    ball = g.ball_table(1)

    def run():
        return _kernels.max_jumps(g.n_sites, ball, log.sites, g.index((side // 2, side // 2)), 0, len(log))

    return f"max_jumps {side}x{side} ({len(log)} rings)", run


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small inputs, for smoke testing")
    args = ap.parse_args(argv)
    scale = 1 if args.quick else 8
    cases = [
        _events_case(256 * scale, 20.0),
        _batch_case(64 * scale, 10.0, 16 * scale),
        _jumps_case(8 * scale, 4.0),
    ]
    old = _backend.BACKEND
    print(f"{'kernel':<44} {'numba s':>10} {'numpy s':>10} {'speed-up':>9}")
    try:
        for name, fn in cases:
            _backend.set_backend("numba")
            fn()  # compile
            t_nb, out_nb = _time(fn, args.repeat)
            _backend.set_backend("numpy")
            t_np, out_np = _time(fn, args.repeat)
            if not _same(out_nb, out_np):
                raise SystemExit(f"{name}: backends disagree")
            print(f"{name:<44} {t_nb:>10.4f} {t_np:>10.4f} {t_np / t_nb:>8.1f}x")
    finally:
        _backend.set_backend(old)


if __name__ == "__main__":
    main()
