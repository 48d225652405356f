"""Command line entry point: ``kcm <group> <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import auxperc, bootstrap, dual, family as fam_mod, harris, lab
from .stats import Verdict

OK, FAILED, ERROR = 0, 1, 2


def _emit(obj, out: str | None) -> None:
    text = lab.dump_json(obj)
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _geometry(args) -> harris.Geometry:
    return harris.Geometry(tuple(args.shape), args.boundary)


def _add_geometry(p, shape=(64,)):
    p.add_argument("--shape", type=int, nargs="+", default=list(shape))
    p.add_argument("--boundary", default="torus", choices=harris.BOUNDARIES)


def _site(values, d: int):
    site = tuple(values) if values else (0,) * d
    if len(site) != d:
        raise SystemExit(f"site needs {d} coordinates")
    return site


# ---------------------------------------------------------------------------
# family


def cmd_family_classify(args) -> int:
    f = fam_mod.load_family(args.family)
    _emit({"family": f.to_json(), "range": f.range, **fam_mod.classify(f).to_json()}, args.out)
    return OK


def cmd_family_stable_set(args) -> int:
    f = fam_mod.load_family(args.family)
    if f.dimension != 2:
        raise SystemExit("stable sets are computed for planar families")
    S = fam_mod.stable_set_2d(f)
    report = {"family": f.to_json(), "stable_set": S.to_json()}
    if args.check:
        rng = np.random.default_rng(args.seed)
        dirs = rng.integers(-args.check_scale, args.check_scale + 1, size=(args.check, 2))
        dirs = dirs[np.any(dirs != 0, axis=1)]
        agree = S.contains_many(dirs) == fam_mod._is_stable_many(f, dirs)
        report["check"] = {"directions": int(len(dirs)), "disagreements": int((~agree).sum())}
        _emit(report, args.out)
        return OK if agree.all() else FAILED
    _emit(report, args.out)
    return OK


# ---------------------------------------------------------------------------
# bootstrap


def cmd_bootstrap_closure(args) -> int:
    f = fam_mod.load_family(args.family)
    spec = json.loads(Path(args.sites_file).read_text())
    if isinstance(spec, list):
        spec = {"infected": spec}
    infected = [tuple(np.atleast_1d(s).tolist()) for s in spec["infected"]]
    region_spec = spec.get("region")
    if region_spec is None:
        pts = np.asarray(infected) if infected else np.zeros((1, f.dimension), dtype=int)
        region = bootstrap.Region.box(pts.min(axis=0).tolist(), pts.max(axis=0).tolist())
    elif "sites" in region_spec:
        region = bootstrap.Region.of_sites(region_spec["sites"])
    else:
        region = bootstrap.Region.box(region_spec["lower"], region_spec["upper"])
    final = bootstrap.closure(f, bootstrap.initial_state(region, infected))
    rounds = sorted(final.rounds.items(), key=lambda kv: (kv[1], kv[0]))
    _emit({"infected": [list(s) for s, _ in rounds], "rounds": [r for _, r in rounds],
           "steps": final.time}, args.out)
    return OK


def cmd_bootstrap_certificate(args) -> int:
    f = fam_mod.load_family(args.family)
    try:
        cert = bootstrap.find_spread_certificate(f, args.max_a1, args.max_a2)
    except (fam_mod.NotSupercritical, bootstrap.BudgetExhausted) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)}, args.out)
        return FAILED
    check = bootstrap.validate_certificate(f, cert)
    _emit({"certificate": cert.to_json(), "valid": bool(check), "size": cert.size, "m": cert.m},
          args.out)
    return OK if check else FAILED


# ---------------------------------------------------------------------------
# sim


def cmd_sim_run(args) -> int:
    f = fam_mod.load_family(args.family)
    geo = _geometry(args)
    log = harris.sample_clock_log(geo, args.q, args.horizon, args.seed)
    p0 = args.q if args.p0 is None else args.p0
    init = harris.sample_bernoulli_config(geo, p0, args.seed)
    traj = harris.evolve(f, geo, init, log)
    bad = harris.validate_trajectory(traj) if args.validate else None
    fh = open(args.out, "w") if args.out else sys.stdout
    try:
        fh.write(json.dumps({"family": f.to_json(), "geometry": geo.to_json(), "q": args.q,
                             "horizon": args.horizon, "seed": args.seed,
                             "initial": traj.initial.tolist()}, sort_keys=True) + "\n")
        harris.write_records(traj, fh)
    finally:
        if args.out:
            fh.close()
    return FAILED if bad is not None else OK


def cmd_sim_generator(args) -> int:
    f = fam_mod.load_family(args.family)
    geo = _geometry(args)
    Q = harris.build_generator(f, geo, args.q)
    report = {"states": int(Q.shape[0]), "nonzeros": int(Q.nnz),
              "max_row_sum": float(np.abs(np.asarray(Q.sum(axis=1))).max())}
    status = OK
    if args.check_reversibility:
        v = harris.check_detailed_balance(Q, args.q)
        report["detailed_balance_violation"] = v
        status = OK if v < args.tol else FAILED
    _emit(report, args.out)
    return status


# ---------------------------------------------------------------------------
# dual


def cmd_dual_witness(args) -> int:
    f = fam_mod.load_family(args.family)
    geo = _geometry(args)
    sites = None if args.all_sites else [_site(args.site, geo.dimension)]
    rep = dual.witness_experiment(f, geo, args.q, args.q_prime, args.t, args.t_prime,
                                  args.runs, args.seed, sites)
    _emit(rep, args.out)
    return OK if rep["violations"] == 0 else FAILED


def cmd_dual_max_jumps(args) -> int:
    f = fam_mod.load_family(args.family)
    geo = _geometry(args)
    rho = f.range
    N = dual.default_N(rho) if args.N is None else args.N
    budget = None if args.K is None else N * args.t / args.K
    values = []
    for run in range(args.runs):
        log = harris.sample_clock_log(geo, args.q, args.t, (args.seed, run))
        values.append(dual.max_dual_jumps(log, _site(args.site, geo.dimension), args.t, args.t_prime, rho))
    rep = {"runs": args.runs, "max_jumps": values, "mean": float(np.mean(values))}
    if budget is not None:
        rep["N"] = N
        rep["budget"] = budget
        rep["exceedances"] = int(sum(v > budget for v in values))
    _emit(rep, args.out)
    return OK


def cmd_dual_count_codings(args) -> int:
    count = dual.count_reasonable_codings(args.t, args.K, args.N, args.rho, args.d)
    rep = {"t": args.t, "K": args.K, "N": args.N, "rho": args.rho, "d": args.d, "count": count}
    status = OK
    if args.brute:
        brute = len(dual.enumerate_reasonable_codings(args.t, args.K, args.N, args.rho, args.d))
        rep["brute_force"] = brute
        status = OK if brute == count else FAILED
    _emit(rep, args.out)
    return status


# ---------------------------------------------------------------------------
# aux


def _aux_params(args, t=None) -> auxperc.AuxParams:
    f = fam_mod.load_family(args.family)
    cert = bootstrap.find_spread_certificate(f)
    q = auxperc.q_threshold(args.K, cert.size) if args.q is None else args.q
    qp = float("nan") if getattr(args, "q_prime", None) is None else args.q_prime
    return auxperc.AuxParams(cert, args.K, args.t if t is None else t, q, qp)


def _verdict_status(rec) -> int:
    return OK if rec["verdict"] in Verdict.PASSING else FAILED


def cmd_aux_bonds(args) -> int:
    params = _aux_params(args)
    depth = params.depth(args.k)
    geo, y = auxperc.aux_geometry(params.certificate, params.levels)
    log = harris.sample_clock_log(geo, params.q, params.t, args.seed)
    lat = auxperc.build_bonds(log, params, y, args.k)
    z = lat.zeta
    rows = []
    for n in range(1, depth + 1):
        for r in range(-n, n + 1, 2):
            rows.append({"n": n, "r": r, "vertical": lat.bond("vertical", r, n),
                         "diagonal": lat.bond("diagonal", r, n)})
    _emit({"params": params.to_json(), "k": args.k, "depth": depth, "bonds": rows,
           "tau": z.tau, "X": list(z.X)}, args.out)
    return OK


def cmd_aux_bond_prob(args) -> int:
    rec = auxperc.estimate_bond_closed_prob(_aux_params(args, t=args.K), args.replicas, args.seed)
    _emit(rec, args.out)
    return _verdict_status(rec)


def cmd_aux_extinction(args) -> int:
    rec = auxperc.estimate_extinction_tail(_aux_params(args), args.n, args.replicas, args.seed)
    _emit(rec, args.out)
    return _verdict_status(rec)


def cmd_aux_survival(args) -> int:
    rec = auxperc.estimate_survival_smallX(_aux_params(args), args.alpha, args.replicas, args.seed)
    _emit(rec, args.out)
    return _verdict_status(rec)


def cmd_aux_transfer_check(args) -> int:
    f = fam_mod.load_family(args.family)
    params = _aux_params(args)
    geo = _geometry(args)
    rep = auxperc.transfer_experiment(f, params, geo, args.runs, args.seed)
    _emit(rep, args.out)
    return OK if rep["violations"] == 0 else FAILED


# ---------------------------------------------------------------------------
# lab


def _write_series(series, out_dir, stem):
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        lab.write_series_csv(series, path / f"{stem}.csv")
    else:
        sys.stdout.write(lab.series_csv(series))


def _out_dir(args, cfg):
    return args.out if args.out else cfg.output


def cmd_lab_disagreement(args) -> int:
    cfg = lab.ExperimentConfig.from_json(args.config)
    series = lab.run_disagreement_experiment(cfg)
    out = _out_dir(args, cfg)
    _write_series(series, out, "disagreement")
    times = [t for t in series.times if t > 0]
    est = [e for t, e in zip(series.times, series.estimate) if t > 0]
    try:
        fit = lab.fit_exponential(times, est, cfg.fit_window)
        fit_json = fit.to_json()
        passed = fit.rate > 0 and fit.rate_ci[0] > 0 and fit.r2 >= cfg.r2_min
    except (lab.TooFewPoints, lab.BelowMeasurementFloor) as exc:
        fit_json = {"schema_version": lab.SCHEMA_VERSION, "error": type(exc).__name__, "message": str(exc)}
        passed = False
    fit_json["verdict"] = Verdict.SATISFIED if passed else Verdict.VIOLATED
    if out:
        lab.dump_json(fit_json, Path(out) / "fit.json")
    else:
        sys.stdout.write(lab.dump_json(fit_json))
    return OK if passed or not cfg.assert_decay else FAILED


def cmd_lab_theorem(args) -> int:
    cfg = lab.ExperimentConfig.from_json(args.config)
    f = lab.LocalFunction.from_json(args.f)
    series = lab.run_theorem_experiment(cfg, f)
    _write_series(series, _out_dir(args, cfg), "theorem")
    return OK


def cmd_lab_stationarity(args) -> int:
    cfg = lab.ExperimentConfig.from_json(args.config)
    rep = lab.run_stationarity_check(cfg)
    out = _out_dir(args, cfg)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        lab.dump_json(rep, Path(out) / "stationarity.json")
    else:
        sys.stdout.write(lab.dump_json(rep))
    return OK if rep["verdict"] == Verdict.SATISFIED else FAILED


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kcm", description="Kinetically constrained models toolkit")
    groups = parser.add_subparsers(dest="group", required=True)

    def command(group, name, func, help_text):
        p = group.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", default=None, help="output file or directory (default: stdout)")
        return p

    g = groups.add_parser("family", help="update families").add_subparsers(dest="cmd", required=True)
    p = command(g, "classify", cmd_family_classify, "universality class and witness direction")
    p.add_argument("family")
    p = command(g, "stable-set", cmd_family_stable_set, "exact stable set as closed arcs")
    p.add_argument("family")
    p.add_argument("--check", type=int, default=0, help="compare with the direct test at this many directions")
    p.add_argument("--check-scale", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)

    g = groups.add_parser("bootstrap", help="bootstrap percolation").add_subparsers(dest="cmd", required=True)
    p = command(g, "closure", cmd_bootstrap_closure, "closure of an infected set")
    p.add_argument("family")
    p.add_argument("sites_file")
    p = command(g, "certificate", cmd_bootstrap_certificate, "search a local spread certificate")
    p.add_argument("family")
    p.add_argument("--max-a1", type=int, default=30)
    p.add_argument("--max-a2", type=int, default=30)

    g = groups.add_parser("sim", help="Harris dynamics").add_subparsers(dest="cmd", required=True)
    p = command(g, "run", cmd_sim_run, "simulate one trajectory and print ring records")
    p.add_argument("family")
    _add_geometry(p)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--p0", type=float, default=None, help="initial zero density (default q)")
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validate", action="store_true")
    p = command(g, "generator", cmd_sim_generator, "exact generator on a tiny box")
    p.add_argument("family")
    _add_geometry(p, shape=(3,))
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--check-reversibility", action="store_true")
    p.add_argument("--tol", type=float, default=1e-12)

    g = groups.add_parser("dual", help="dual paths and codings").add_subparsers(dest="cmd", required=True)
    p = command(g, "witness", cmd_dual_witness, "build and audit disagreement paths")
    p.add_argument("family")
    _add_geometry(p)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--q-prime", type=float, required=True)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--t-prime", type=float, required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--site", type=int, nargs="+", default=None)
    p.add_argument("--all-sites", action="store_true")
    p = command(g, "max-jumps", cmd_dual_max_jumps, "largest jump count of a dual path")
    p.add_argument("family")
    _add_geometry(p)
    p.add_argument("--q", type=float, default=0.5)
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--t-prime", type=float, required=True)
    p.add_argument("--K", type=float, default=None)
    p.add_argument("--N", type=float, default=None, help="jump budget factor (default 4*rho + 4)")
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--site", type=int, nargs="+", default=None)
    p = command(g, "count-codings", cmd_dual_count_codings, "number of reasonable codings")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--K", type=float, required=True)
    p.add_argument("--N", type=float, required=True)
    p.add_argument("--rho", type=int, default=1)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--brute", action="store_true", help="cross-check by explicit chain enumeration")

    g = groups.add_parser("aux", help="auxiliary oriented percolation").add_subparsers(dest="cmd", required=True)

    def aux_common(p, t_required=True):
        p.add_argument("family")
        p.add_argument("--K", type=float, required=True)
        if t_required:
            p.add_argument("--t", type=float, required=True)
        p.add_argument("--q", type=float, default=None, help="clock zero rate (default: threshold)")
        p.add_argument("--seed", type=int, default=0)

    p = command(g, "bonds", cmd_aux_bonds, "sample one lattice and run it")
    aux_common(p)
    p.add_argument("--k", type=int, default=0)
    p = command(g, "bond-prob", cmd_aux_bond_prob, "closed diagonal bond frequency")
    aux_common(p, t_required=False)
    p.add_argument("--replicas", type=int, default=10000)
    p = command(g, "extinction", cmd_aux_extinction, "frequency of late finite death")
    aux_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--replicas", type=int, default=10000)
    p = command(g, "survival", cmd_aux_survival, "survival with a small surviving set")
    aux_common(p)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--replicas", type=int, default=1000)
    p = command(g, "transfer-check", cmd_aux_transfer_check, "audit the transfer of zeroes")
    aux_common(p)
    _add_geometry(p, shape=(32,))
    p.add_argument("--q-prime", type=float, default=None)
    p.add_argument("--runs", type=int, default=100)

    g = groups.add_parser("lab", help="experiments from config files").add_subparsers(dest="cmd", required=True)
    p = command(g, "disagreement", cmd_lab_disagreement, "disagreement frequency and decay fit")
    p.add_argument("config")
    p = command(g, "theorem", cmd_lab_theorem, "distance of E f(eta_t) from equilibrium")
    p.add_argument("config")
    p.add_argument("--f", required=True, help="local function JSON")
    p = command(g, "stationarity", cmd_lab_stationarity, "invariance of the product measure")
    p.add_argument("config")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"kcm: {type(exc).__name__}: {exc}\n")
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
