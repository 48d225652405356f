import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kcm.auxperc import (
    AuxParams,
    GeometryError,
    NotApplicable,
    OPLattice,
    aux_geometry,
    bond_closed_prob_exact,
    build_bonds,
    check_transfer,
    estimate_bond_closed_prob,
    estimate_extinction_tail,
    estimate_survival_smallX,
    event_W,
    extinction_bound,
    find_k_gamma,
    q_threshold,
    run_zeta,
    transfer_experiment,
)
from kcm.bootstrap import find_spread_certificate
from kcm.dual import Coding, event_G
from kcm.family import BUILTIN_FAMILIES
from kcm.harris import ClockLog, Geometry, evolve, evolve_coupled, sample_bernoulli_config, sample_clock_log
from kcm.stats import Verdict

F = BUILTIN_FAMILIES
CERT = find_spread_certificate(F["fa1f"])
CERT_2D = find_spread_certificate(F["fa1f-2d"])


def _dense_zero_log(geo, params, extra=()):
    """Evenly spaced 0-rings on every site in every window of length K, plus ``extra`` events."""
    events = list(extra)
    count = params.certificate.m + 1
    for n in range(1, params.levels + 1):
        lo = params.t - n * params.K
        for j in range(count):
            for c in geo.all_coords.tolist():
                events.append((tuple(c), lo + params.K * (j + 1) / (count + 1), 0))
    return ClockLog.from_events(geo, params.t, events, q=1.0)


def _zeta_oracle(lattice):
    """Occupied vertices by explicit recursion over (r, n)."""
    occ = {(0, 0)}
    for n in range(1, lattice.depth + 1):
        for r in range(-n, n + 1, 2):
            if (r - 1, n - 1) in occ and lattice.bond("vertical", r, n):
                occ.add((r, n))
            elif (r + 1, n - 1) in occ and lattice.bond("diagonal", r, n):
                occ.add((r, n))
    return occ


def _expected_X_size(n):
    h = n // 2
    return h + 1 if (h - n) % 2 == 0 else h


# ---------------------------------------------------------------------------
# threshold


def test_q_threshold():
    assert q_threshold(2, 1) == pytest.approx(1 + np.log(1 - np.exp(-2.0)) / 6.0, rel=1e-15)
    assert q_threshold(2, 1) == pytest.approx(0.975783, abs=1e-4)
    for K in (0.1, 1, 2, 8, 16):
        assert q_threshold(K, 1) < 1
        # 1 - q_K is about e^{-K} / (3K) once K is large
    assert 1 - q_threshold(16, 1) == pytest.approx(math.exp(-16) / 48, rel=1e-3)
    # beyond double precision the threshold is 1 itself
    assert q_threshold(96, 1) == 1.0
    assert q_threshold(2, 2) > q_threshold(2, 1)
    with pytest.raises(ValueError):
        q_threshold(0, 1)


def test_aux_params():
    p = AuxParams(CERT, 8, 35)
    assert p.levels == 4 and p.depth(1) == 3 and p.base_time() == 3
    with pytest.raises(ValueError):
        p.depth(5)
    with pytest.raises(ValueError):
        AuxParams(CERT, 8, 7)
    assert p.to_json()["q_prime"] is None


def test_aux_geometry_holds_every_rectangle():
    for cert in (CERT, CERT_2D):
        for depth in (1, 3, 6):
            geo, y = aux_geometry(cert, depth, boundary="frozen-zero")
            params = AuxParams(cert, 1.0, float(depth), 1.0)
            log = sample_clock_log(geo, 0.9, params.t, 0)
            build_bonds(log, params, y, 0)  # raises if anything falls outside


def test_small_box_is_an_error():
    geo = Geometry((2,), "frozen-zero")
    params = AuxParams(CERT, 1.0, 4.0)
    with pytest.raises(GeometryError):
        build_bonds(sample_clock_log(geo, 0.5, 4.0, 0), params, (1,), 0)


# ---------------------------------------------------------------------------
# bonds and the process


@pytest.mark.parametrize("cert", [CERT, CERT_2D])
def test_all_bonds_open_with_dense_zero_rings(cert):
    params = AuxParams(cert, 2.0, 12.0)
    geo, y = aux_geometry(cert, params.levels)
    lat = build_bonds(_dense_zero_log(geo, params), params, y, 0)
    assert lat.vertical[1:].sum() == lat.diagonal[1:].sum()
    for n in range(1, lat.depth + 1):
        for r in range(-n, n + 1, 2):
            assert lat.bond("vertical", r, n) and lat.bond("diagonal", r, n)
    z = lat.zeta
    assert z.survives
    for n in range(lat.depth + 1):
        for r in range(-n, n + 1):
            assert z.occupation[n, r + lat.depth] == ((r + n) % 2 == 0)
    assert len(z.X) == _expected_X_size(lat.depth)


def test_X_size_under_open_bonds():
    for depth in range(0, 9):
        v = np.ones((depth + 1, 2 * depth + 1), bool)
        z = run_zeta(OPLattice((0,), 0, depth, 1.0, float(depth), v, v))
        assert len(z.X) == _expected_X_size(depth)
    assert [_expected_X_size(n) for n in range(1, 5)] == [0, 1, 2, 3]


def test_one_ring_closes_both_bonds_into_a_vertex():
    params = AuxParams(CERT, 2.0, 8.0)
    geo, y = aux_geometry(CERT, params.levels)
    # rectangle of (r, n) = (0, 2) is y + (-1) a1 + R; its window is (t - 2K, t - K]
    site = (y[0] - 1,)
    log = _dense_zero_log(geo, params, extra=[(site, 5.3, 1)])
    lat = build_bonds(log, params, y, 0)
    assert not lat.bond("vertical", 0, 2) and not lat.bond("diagonal", 0, 2)
    # the same site is the spreading site of (-2, 2): only its diagonal bond closes
    assert lat.bond("vertical", -2, 2) and not lat.bond("diagonal", -2, 2)
    assert lat.bond("vertical", 2, 2) and lat.bond("diagonal", 2, 2)
    assert lat.bond("vertical", 0, 4) and lat.bond("diagonal", 0, 4)


def test_all_bonds_into_level_one_closed():
    depth = 3
    v = np.ones((depth + 1, 2 * depth + 1), bool)
    v[1] = False
    z = run_zeta(OPLattice((0,), 0, depth, 1.0, 3.0, v.copy(), v.copy()))
    assert z.tau == 1 and z.X == () and not z.occupation[1:].any()


def test_every_bond_closed_with_one_rings_everywhere():
    params = AuxParams(CERT, 2.0, 10.0, q=0.5)
    geo, y = aux_geometry(CERT, params.levels)
    events = []
    for n in range(1, params.levels + 1):
        for c in geo.all_coords.tolist():
            events.append((tuple(c), params.t - (n - 0.5) * params.K, 1))
    log = ClockLog.from_events(geo, params.t, events)
    code = Coding(((y[0],),) * 3, 2.0, 10.0)
    assert find_k_gamma(code, log, params) is None
    assert build_bonds(log, params, y, 0).zeta.tau == 1


def _random_lattices(count, q=0.85, K=1.5, t=9.0, cert=CERT):
    params = AuxParams(cert, K, t, q)
    geo, y = aux_geometry(cert, params.levels)
    for s in range(count):
        log = sample_clock_log(geo, q, t, s)
        yield params, log, y, build_bonds(log, params, y, 0)


def test_closed_vertical_implies_closed_diagonal():
    for cert in (CERT, CERT_2D):
        for _, _, _, lat in _random_lattices(500, cert=cert):
            assert not np.any(~lat.vertical[1:] & lat.diagonal[1:])


def test_zeta_matches_recursive_oracle_and_basic_facts():
    for _, _, _, lat in _random_lattices(300):
        z = lat.zeta
        occ = {(r, n) for n in range(lat.depth + 1) for r in range(-n, n + 1)
               if z.occupation[n, r + lat.depth]}
        assert occ == _zeta_oracle(lat)
        assert z.tau >= 1
        if z.survives:
            assert z.occupation[lat.depth].any()
            assert all(z.occupation[lat.depth, r + lat.depth] for r in z.X)
        else:
            assert not z.occupation[int(z.tau)].any() and z.X == ()
            assert z.occupation[int(z.tau) - 1].any()
        # parity: odd r + n never occupied
        for n in range(lat.depth + 1):
            for r in range(-n, n + 1):
                if (r + n) % 2:
                    assert not z.occupation[n, r + lat.depth]


@given(st.integers(0, 10**6), st.integers(1, 6), st.floats(0.0, 1.0))
def test_opening_bonds_never_removes_occupation(seed, depth, density):
    rng = np.random.default_rng(seed)
    shape = (depth + 1, 2 * depth + 1)
    v = rng.random(shape) < density
    d = v & (rng.random(shape) < density)
    base = run_zeta(OPLattice((0,), 0, depth, 1.0, float(depth), v, d))
    v2 = v | (rng.random(shape) < 0.2)
    d2 = d | (rng.random(shape) < 0.2)
    more = run_zeta(OPLattice((0,), 0, depth, 1.0, float(depth), v2, d2))
    assert np.all(more.occupation >= base.occupation)
    assert more.tau >= base.tau


# ---------------------------------------------------------------------------
# transfer of zeroes and the W events


def test_transfer_trivial_level_and_not_applicable():
    params = AuxParams(CERT, 4.0, 12.0, 0.8)
    geo = Geometry((24,))
    log = sample_clock_log(geo, 0.8, 12.0, 5)
    zeros = evolve(F["fa1f"], geo, np.zeros(24, np.uint8), log)
    y = (12,)
    k = params.levels
    # depth 0 at base time 0: the check reduces to the initial spin
    assert check_transfer(zeros, params, y, k, 0)
    ones = evolve(F["fa1f"], geo, np.ones(24, np.uint8), log)
    with pytest.raises(NotApplicable):
        check_transfer(ones, params, y, k, 0)
    with pytest.raises(NotApplicable):
        check_transfer(zeros, params, y, k, 1)


def test_transfer_holds_on_many_runs():
    params = AuxParams(CERT, 3.0, 15.0, 0.8, 0.6)
    rep = transfer_experiment(F["fa1f"], params, Geometry((24,)), 150, 3)
    assert rep["violations"] == 0
    assert rep["checks"] > 150


def test_transfer_holds_in_two_dimensions():
    params = AuxParams(CERT_2D, 1.5, 6.0, 0.8, 0.6)
    rep = transfer_experiment(F["fa1f-2d"], params, Geometry((14, 14)), 60, 4)
    assert rep["violations"] == 0 and rep["checks"] > 0


def test_event_W_examples():
    params = AuxParams(CERT, 4.0, 10.0)
    geo = Geometry((16,))
    # no rings before the base time t - floor(t/K) K = 2
    log = ClockLog.from_events(geo, 10.0, [((3,), 5.0, 1)])
    zeros = evolve(F["fa1f"], geo, np.zeros(16, np.uint8), log)
    ones = evolve(F["fa1f"], geo, np.ones(16, np.uint8), log)
    assert event_W(zeros, params, (8,), 0, 0)
    assert not event_W(ones, params, (8,), 0, 0)
    with pytest.raises(ValueError):
        event_W(zeros, params, (8,), 0, 2)


def test_measurability_split():
    params = AuxParams(CERT, 2.0, 11.0, 0.85)
    geo = Geometry((30,))
    base = params.base_time()
    for s in range(20):
        log = sample_clock_log(geo, 0.85, 11.0, s)
        late = log.restrict(base, params.t)
        early = log.restrict(0.0, base)
        for k in range(params.levels + 1):
            a = build_bonds(log, params, (15,), k)
            b = build_bonds(late, params, (15,), k)
            assert np.array_equal(a.vertical, b.vertical) and np.array_equal(a.diagonal, b.diagonal)
        init = sample_bernoulli_config(geo, 0.5, s)
        full = evolve(F["fa1f"], geo, init, log)
        cut = evolve(F["fa1f"], geo, init, early)
        depth = params.depth(0)
        for r in range(-(depth // 2), depth // 2 + 1):
            assert event_W(full, params, (15,), 0, r) == event_W(cut, params, (15,), 0, r)


def test_find_k_gamma():
    params = AuxParams(CERT, 2.0, 12.0)
    geo, y = aux_geometry(CERT, params.levels, margin=4)
    log = _dense_zero_log(geo, params)
    code = Coding(((y[0],), (y[0] + 1,), (y[0] + 2,), (y[0] + 2,)), 2.0, 12.0)
    assert find_k_gamma(code, log, params) == (0, (y[0],))
    params = AuxParams(CERT, 1.0, 9.0, 0.7)
    geo = Geometry((40,))
    for s in range(30):
        log = sample_clock_log(geo, 0.7, 9.0, s)
        code = Coding(tuple((20 + (k % 3),) for k in range(10)), 1.0, 9.0)
        res = find_k_gamma(code, log, params)
        stop = params.levels + 1 if res is None else res[0]
        for j in range(stop):
            assert not build_bonds(log, params, code.sites[j], j).zeta.survives
        if res is not None:
            assert res[1] == code.sites[res[0]]


def test_surviving_lattice_and_W_give_activation():
    # W for both copies at an occupied (r, depth) forces both copies to 0 at y(gamma) at t - kK
    params = AuxParams(CERT, 1.0, 6.0, 0.85)
    geo = Geometry((32,))
    hits = 0
    for s in range(200):
        log = sample_clock_log(geo, 0.85, 6.0, s)
        a = sample_bernoulli_config(geo, 0.5, s, 2)
        b = sample_bernoulli_config(geo, 0.85, s, 3)
        c = evolve_coupled(F["fa1f"], geo, a, b, log)
        code = Coding(tuple((16,) for _ in range(7)), 1.0, 6.0)
        res = find_k_gamma(code, log, params)
        if res is None:
            continue
        k, yk = res
        lat = build_bonds(log, params, yk, k)
        depth = params.depth(k)
        for r in range(-(depth // 2), depth // 2 + 1):
            if (r + depth) % 2 or not lat.zeta.occupation[depth, r + depth]:
                continue
            if event_W(c.a, params, yk, k, r) and event_W(c.b, params, yk, k, r):
                hits += 1
                assert check_transfer(c.a, params, yk, k, r, lattice=lat)
                assert check_transfer(c.b, params, yk, k, r, lattice=lat)
                assert event_G(code, c, 1.0, 6.0)
    assert hits > 0


# ---------------------------------------------------------------------------
# estimators


def test_bond_probability_matches_closed_form():
    params = AuxParams(CERT, 4.0, 4.0, 0.7)
    rec = estimate_bond_closed_prob(params, 4000, 1)
    exact = bond_closed_prob_exact(CERT, 4.0, 0.7)
    sd = math.sqrt(exact * (1 - exact) / 4000)
    assert abs(rec["estimate"] - exact) < 4 * sd
    assert rec["params"]["exact"] == exact
    # q = 1: closed iff no 0-ring in the window
    assert bond_closed_prob_exact(CERT, 3.0, 1.0) == pytest.approx(math.exp(-3.0))
    assert bond_closed_prob_exact(CERT, 3.0, 0.0) == 1.0


def test_bond_probability_decreases_with_q():
    prev_hi = 1.0
    for q in (0.6, 0.75, 0.9, 0.99):
        rec = estimate_bond_closed_prob(AuxParams(CERT, 4.0, 4.0, q), 3000, 2)
        assert rec["ci_low"] <= prev_hi
        prev_hi = rec["ci_high"]
    est = [bond_closed_prob_exact(CERT, 4.0, q) for q in np.linspace(0.5, 1.0, 11)]
    assert np.all(np.diff(est) <= 0)


def test_extinction_estimates():
    params = AuxParams(CERT, 30.0, 120.0, 1.0)
    rec = estimate_extinction_tail(params, 1, 200, 0)
    assert rec["estimate"] == 0.0
    params = AuxParams(CERT, 1.0, 8.0, 0.8)
    ests = [estimate_extinction_tail(params, n, 400, 5)["successes"] for n in range(1, 9)]
    assert all(a >= b for a, b in zip(ests, ests[1:]))
    assert extinction_bound(96, 2) == pytest.approx(2 * 81 * math.exp(-8))
    assert estimate_extinction_tail(params, 2, 50, 0)["verdict"] == Verdict.VACUOUS
    with pytest.raises(ValueError):
        estimate_extinction_tail(params, 9, 10, 0)


def test_survival_small_X():
    params = AuxParams(CERT, 30.0, 240.0, 1.0)
    rec = estimate_survival_smallX(params, 0.5, 100, 0)
    assert rec["estimate"] == 0.0 and rec["verdict"] == Verdict.NO_BOUND
    with pytest.raises(ValueError):
        estimate_survival_smallX(params, 1.0, 10, 0)


def test_bond_probability_at_q_one_is_a_poisson_tail():
    cert = CERT_2D
    K = 2.0
    rec = estimate_bond_closed_prob(AuxParams(cert, K, K, 1.0), 3000, 4)
    m = cert.m
    exact = sum(math.exp(-K) * K**i / math.factorial(i) for i in range(m))
    assert rec["ci_low"] <= exact <= rec["ci_high"]
    assert bond_closed_prob_exact(cert, K, 1.0) == pytest.approx(exact)


def test_survival_trend_at_large_K():
    est = []
    for depth in (8, 16, 32):
        params = AuxParams(CERT, 64.0, 64.0 * depth, q_threshold(64, 1))
        est.append(estimate_survival_smallX(params, 0.5, 200, depth))
    for a, b in zip(est, est[1:]):
        assert b["ci_low"] <= a["ci_high"]


def test_dying_replicas_never_count_as_small_survivors():
    # extinction from level 1 on counts exactly the dying replicas of the same logs
    for q in (0.5, 0.8, 0.95):
        params = AuxParams(CERT, 1.0, 8.0, q)
        dead = estimate_extinction_tail(params, 1, 300, 11)["successes"]
        small = estimate_survival_smallX(params, 0.9, 300, 11)["successes"]
        assert dead + small <= 300
