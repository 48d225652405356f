import io
import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from kcm.family import BUILTIN_FAMILIES
from kcm.harris import (
    ClockLog,
    Geometry,
    build_generator,
    check_detailed_balance,
    evolve,
    evolve_coupled,
    load_log,
    sample_bernoulli_config,
    sample_clock_log,
    save_log,
    state_at,
    validate_trajectory,
    write_records,
)

F = BUILTIN_FAMILIES


def _naive_replay(family, geo, initial, log, t):
    """Spins at time t by applying rings one at a time with dictionaries."""
    spins = {tuple(c): int(v) for c, v in zip(geo.all_coords.tolist(), initial)}

    def spin(site):
        w = geo.wrap(site)
        return geo.ghost_value if w is None else spins[w]

    for time, idx, lab in zip(log.times, log.sites, log.labels):
        if time > t:
            break
        x = geo.coords(idx)
        if any(all(spin(tuple(a + b for a, b in zip(x, v))) == 0 for v in rule) for rule in family.rules):
            spins[x] = int(lab)
    return np.array([spins[tuple(c)] for c in geo.all_coords.tolist()], dtype=np.uint8)


def test_geometry_basics():
    g = Geometry((4, 3))
    assert g.n_sites == 12 and g.dimension == 2
    assert g.coords(g.index((5, -1))) == (1, 2)
    assert g.distance((0, 0), (3, 2)) == 1
    frozen = Geometry((4,), "frozen-one")
    assert frozen.wrap((4,)) is None and frozen.ghost_value == 1
    assert Geometry((4,), "frozen-zero").ghost_value == 0
    with pytest.raises(ValueError):
        frozen.index((7,))
    with pytest.raises(ValueError):
        Geometry((0,))
    with pytest.raises(ValueError):
        Geometry((3,), "mirror")
    assert Geometry.from_json(g.to_json()) == g


def test_ball_table_has_no_duplicates_on_small_tori():
    g = Geometry((3,))
    ball = g.ball_table(2)
    for row in ball:
        vals = row[row >= 0]
        assert sorted(vals.tolist()) == [0, 1, 2]


def test_clock_log_examples():
    g = Geometry((50,))
    assert len(sample_clock_log(g, 0.5, 0.0, 1)) == 0
    log = sample_clock_log(g, 1.0, 20.0, 2)
    assert not log.labels.any()
    log = sample_clock_log(g, 0.7, 100.0, 3)
    assert abs(len(log) - 5000) <= 5 * math.sqrt(5000)
    assert np.all(np.diff(log.times) >= 0)
    assert np.all((log.times > 0) & (log.times <= 100.0))
    zero_frac = 1 - log.labels.mean()
    assert abs(zero_frac - 0.7) <= 5 * math.sqrt(0.21 / len(log))
    with pytest.raises(ValueError):
        sample_clock_log(g, 1.5, 1.0, 0)
    with pytest.raises(ValueError):
        sample_clock_log(g, 0.5, -1.0, 0)


def test_clock_log_per_site_times_increase():
    log = sample_clock_log(Geometry((6, 5)), 0.4, 30.0, 9)
    for i in range(30):
        ts = log.times[log.rings_at(i)]
        assert np.all(np.diff(ts) > 0)
        z = log.label_times(i, 0)
        o = log.label_times(i, 1)
        assert len(z) + len(o) == len(ts)


def test_clock_log_is_deterministic():
    g = Geometry((20,))
    a = sample_clock_log(g, 0.3, 10.0, (5, 7))
    b = sample_clock_log(g, 0.3, 10.0, (5, 7))
    c = sample_clock_log(g, 0.3, 10.0, (5, 8))
    assert np.array_equal(a.times, b.times) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.times, c.times)


def test_bernoulli_config():
    g = Geometry((10_000,))
    assert not sample_bernoulli_config(g, 1.0, 0).any()
    assert sample_bernoulli_config(g, 0.0, 0).all()
    c = sample_bernoulli_config(g, 0.3, 4)
    assert abs((c == 0).mean() - 0.3) <= 5 * math.sqrt(0.21 / 10_000)
    with pytest.raises(ValueError):
        sample_bernoulli_config(g, -0.1, 0)


def test_evolve_examples(backend):
    g = Geometry((3,))
    log = ClockLog.from_events(g, 2.0, [((1,), 1.0, 0)])
    traj = evolve(F["fa1f"], g, [0, 1, 1], log)
    assert traj.config_at(0.5).tolist() == [0, 1, 1]
    assert traj.config_at(1.0).tolist() == [0, 0, 1]  # right-continuous
    assert traj.config_at(2.0).tolist() == [0, 0, 1]
    assert state_at(traj, (1,), 1.0) == 0 and traj.state_at((1,), 0.999) == 1
    with pytest.raises(ValueError):
        traj.state_at((1,), 2.5)

    empty = ClockLog.from_events(g, 5.0, [])
    traj = evolve(F["fa1f"], g, [1, 0, 1], empty)
    assert traj.config_at(5.0).tolist() == [1, 0, 1]

    one = Geometry((1,), "frozen-one")
    log = sample_clock_log(one, 0.5, 50.0, 1)
    for start in ([0], [1]):
        traj = evolve(F["east"], one, start, log)
        assert not traj.changed.any() and not traj.accepted.any()


def test_evolve_rejects_bad_inputs():
    g = Geometry((3,))
    log = ClockLog.from_events(g, 1.0, [])
    with pytest.raises(ValueError):
        evolve(F["fa1f"], g, [0, 1], log)
    with pytest.raises(ValueError):
        evolve(F["fa1f"], g, [0, 2, 1], log)
    with pytest.raises(ValueError):
        evolve(F["fa1f"], Geometry((4,)), [0, 1, 1, 1], log)
    with pytest.raises(ValueError):
        ClockLog.from_events(g, 1.0, [((0,), 2.0, 0)])


@pytest.mark.parametrize("name,shape,boundary", [
    ("fa1f", (40,), "torus"),
    ("east", (40,), "frozen-zero"),
    ("fa1f-2d", (6, 5), "torus"),
    ("two-neighbour", (6, 6), "frozen-zero"),
    ("north-east", (5, 6), "frozen-one"),
])
def test_trajectories_match_naive_replay(backend, name, shape, boundary):
    f = F[name]
    g = Geometry(shape, boundary)
    rng = np.random.default_rng(11)
    for seed in range(3):
        log = sample_clock_log(g, 0.6, 8.0, seed)
        init = sample_bernoulli_config(g, 0.5, seed)
        traj = evolve(f, g, init, log)
        assert validate_trajectory(traj) is None
        for t in np.concatenate([rng.uniform(0, 8, 3), log.times[:: max(1, len(log) // 4)]]):
            expected = _naive_replay(f, g, init, log, t)
            assert np.array_equal(traj.config_at(t), expected)
            i = int(rng.integers(g.n_sites))
            assert traj.value_at(i, t) == expected[i]


def test_validator_catches_tampering():
    g = Geometry((10,))
    log = sample_clock_log(g, 0.5, 5.0, 1)
    traj = evolve(F["fa1f"], g, sample_bernoulli_config(g, 0.5, 1), log)
    e = int(np.flatnonzero(traj.accepted)[0])
    traj.accepted[e] = False
    assert validate_trajectory(traj) == e


def test_coupling_examples():
    g = Geometry((30,))
    log = sample_clock_log(g, 0.5, 10.0, 3)
    init = sample_bernoulli_config(g, 0.4, 3)
    c = evolve_coupled(F["fa1f"], g, init, init.copy(), log)
    for t in (0.0, 3.3, 10.0):
        assert np.array_equal(c.a.config_at(t), c.b.config_at(t))
    other = sample_bernoulli_config(g, 0.8, 4)
    c = evolve_coupled(F["fa1f"], g, init, other, log)
    single = evolve(F["fa1f"], g, init, log)
    assert np.array_equal(c.a.changed, single.changed)
    assert c.log is log
    # a site with no rings after t keeps its value in both copies
    for i in range(g.n_sites):
        rings = log.times[log.rings_at(i)]
        last = rings[-1] if rings.size else 0.0
        assert c.a.value_at(i, last) == c.a.value_at(i, 10.0)
        assert c.b.value_at(i, last) == c.b.value_at(i, 10.0)


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_coupled_marginals_are_legal(seed, q):
    g = Geometry((12,))
    log = sample_clock_log(g, q, 4.0, seed)
    a = sample_bernoulli_config(g, q, seed, 2)
    b = sample_bernoulli_config(g, 1 - q, seed, 3)
    c = evolve_coupled(F["fa1f"], g, a, b, log)
    assert validate_trajectory(c.a) is None and validate_trajectory(c.b) is None


# ---------------------------------------------------------------------------
# exact generator


def test_generator_examples():
    one = Geometry((1,), "frozen-one")
    Q = build_generator(F["east"], one, 0.3)
    assert Q.nnz == 0
    assert check_detailed_balance(Q, 0.3) == 0.0

    two = Geometry((2,))
    q = 0.35
    Q = build_generator(F["fa1f"], two, q).toarray()
    # state index: bit i is the spin of site i; (0, 1) is 0b10
    assert Q[0b10, 0b00] == pytest.approx(q)
    assert Q[0b00, 0b10] == pytest.approx(1 - q)
    assert Q[0b11].tolist() == [0, 0, 0, 0]
    assert np.allclose(Q.sum(axis=1), 0)
    with pytest.raises(ValueError):
        build_generator(F["fa1f"], Geometry((17,)), 0.5)


@pytest.mark.parametrize("name", sorted(F))
@pytest.mark.parametrize("q", [0.3, 0.7])
def test_detailed_balance_for_all_builtins(name, q):
    f = F[name]
    shapes = [(2,), (3,), (4,)] if f.dimension == 1 else [(2, 2), (2, 3)]
    for shape in shapes:
        for boundary in ("torus", "frozen-zero"):
            Q = build_generator(f, Geometry(shape, boundary), q)
            assert np.allclose(np.asarray(Q.sum(axis=1)).ravel(), 0.0)
            assert check_detailed_balance(Q, q) < 1e-12


def test_box_smaller_than_a_rule_is_rejected():
    with pytest.raises(ValueError):
        Geometry((1, 3)).neighbor_table(F["fa1f-2d"])
    with pytest.raises(ValueError):
        Geometry((1,)).neighbor_table(F["east"])
    Geometry((1,), "frozen-one").neighbor_table(F["east"])


def test_detailed_balance_detects_irreversible_matrix():
    Q = sp.csr_matrix(np.array([[-1.0, 1.0], [0.0, 0.0]]))
    assert check_detailed_balance(Q, 0.5) > 0.1


def test_generator_matches_simulated_jump_rates():
    # empirical rate of leaving the all-zero state on a 2-site FA-1f torus
    g = Geometry((2,))
    q = 0.4
    Q = build_generator(F["fa1f"], g, q).toarray()
    exits = 0
    time = 0.0
    for seed in range(400):
        log = sample_clock_log(g, q, 5.0, seed)
        traj = evolve(F["fa1f"], g, [0, 0], log)
        ch = np.flatnonzero(traj.changed)
        if ch.size:
            exits += 1
            time += float(log.times[ch[0]])
        else:
            time += 5.0
    rate = exits / time
    assert abs(rate - (-Q[0, 0])) < 5 * math.sqrt(rate / time)


# ---------------------------------------------------------------------------
# export


def test_records_and_log_round_trip(tmp_path):
    g = Geometry((3, 2))
    log = sample_clock_log(g, 0.5, 3.0, 8)
    traj = evolve(F["fa1f-2d"], g, sample_bernoulli_config(g, 0.5, 8), log)
    buf = io.StringIO()
    write_records(traj, buf)
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert len(rows) == len(log)
    assert rows[0].keys() == {"site", "time", "label", "accepted"}
    assert [r["accepted"] for r in rows] == traj.accepted.tolist()

    path = tmp_path / "log.npz"
    save_log(log, path)
    back = load_log(path)
    assert back.geometry == g and back.horizon == log.horizon
    assert np.array_equal(back.times, log.times) and np.array_equal(back.labels, log.labels)
    assert np.array_equal(evolve(F["fa1f-2d"], g, traj.initial, back).changed, traj.changed)


def test_restrict_splits_the_log():
    log = sample_clock_log(Geometry((10,)), 0.5, 10.0, 1)
    early, late = log.restrict(0.0, 4.0), log.restrict(4.0, 10.0)
    assert len(early) + len(late) == len(log)
    assert early.times.max() <= 4.0 < late.times.min()
    assert log.upto(4.0) == len(early)


def test_stationarity_small_scale():
    # product measure with P(0) = q is invariant
    g = Geometry((64,))
    q = 0.6
    zeros = 0
    reps = 200
    for seed in range(reps):
        log = sample_clock_log(g, q, 10.0, seed)
        traj = evolve(F["east"], g, sample_bernoulli_config(g, q, seed), log)
        zeros += int((traj.config_at(10.0) == 0).sum())
    n = reps * g.n_sites
    # the law at time 10 is again the product measure, so sites are independent
    assert abs(zeros / n - q) < 5 * math.sqrt(q * (1 - q) / n)
