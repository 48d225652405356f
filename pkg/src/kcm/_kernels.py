"""
Inner loops of the Harris dynamics and of the dual-path dynamic program.

Each kernel comes in two flavours with identical results: a numba ``@njit``
loop and a numpy implementation. ``kcm._backend`` decides which one the
public wrappers call.

Conventions shared by all kernels:

* a configuration is a ``uint8`` array of length ``n_sites + 1``; the last
  entry is a ghost cell holding the frozen boundary value;
* ``nbr[x, j]`` is the index (possibly the ghost) of the j-th rule element
  translated to site x, and rule ``r`` owns columns ``rule_ptr[r]:rule_ptr[r+1]``.
"""

import numpy as np

from . import _backend
from ._backend import njit


# ---------------------------------------------------------------------------
# single trajectory


@njit(cache=True, nogil=True)
def _constraint_nb(cfg, nbr, rule_ptr, x):
    for r in range(rule_ptr.shape[0] - 1):
        ok = True
        for j in range(rule_ptr[r], rule_ptr[r + 1]):
            if cfg[nbr[x, j]] != 0:
                ok = False
                break
        if ok:
            return True
    return False


@njit(cache=True, nogil=True)
def _run_events_nb(cfg, nbr, rule_ptr, sites, labels, accepted, changed):
    for e in range(sites.shape[0]):
        x = sites[e]
        if _constraint_nb(cfg, nbr, rule_ptr, x):
            accepted[e] = True
            v = labels[e]
            if cfg[x] != v:
                cfg[x] = v
                changed[e] = True


def _constraint_np(cfg, nbr, rule_ptr, x):
    zero = cfg[nbr[x]] == 0
    return any(zero[rule_ptr[r] : rule_ptr[r + 1]].all() for r in range(len(rule_ptr) - 1))


def _run_events_np(cfg, nbr, rule_ptr, sites, labels, accepted, changed):
    # the event loop is inherently sequential; the constraint test is vectorised
    for e in range(sites.shape[0]):
        x = sites[e]
        if _constraint_np(cfg, nbr, rule_ptr, x):
            accepted[e] = True
            if cfg[x] != labels[e]:
                cfg[x] = labels[e]
                changed[e] = True


def run_events(cfg, nbr, rule_ptr, sites, labels):
    """Apply a time-sorted event list to ``cfg`` in place.

    Returns ``(accepted, changed)``: whether the constraint held at each ring
    and whether the ring changed the spin.
    """
    accepted = np.zeros(sites.shape[0], dtype=np.bool_)
    changed = np.zeros(sites.shape[0], dtype=np.bool_)
    fn = _run_events_nb if _backend.use_numba() else _run_events_np
    fn(cfg, nbr, rule_ptr, sites, labels, accepted, changed)
    return accepted, changed


# ---------------------------------------------------------------------------
# batches of replicas, observed at fixed times


@njit(cache=True, nogil=True)
def _observe_batch_nb(cfgs, nbr, rule_ptr, sites, labels, counts, cuts, obs_sites, out):
    n_rep, n_copy = cfgs.shape[0], cfgs.shape[1]
    n_obs = cuts.shape[1]
    for r in range(n_rep):
        j = 0
        for e in range(counts[r] + 1):
            while j < n_obs and cuts[r, j] == e:
                for c in range(n_copy):
                    for s in range(obs_sites.shape[0]):
                        out[r, c, j, s] = cfgs[r, c, obs_sites[s]]
                j += 1
            if e == counts[r]:
                break
            x = sites[r, e]
            v = labels[r, e]
            for c in range(n_copy):
                if _constraint_nb(cfgs[r, c], nbr, rule_ptr, x):
                    cfgs[r, c, x] = v


def _observe_batch_np(cfgs, nbr, rule_ptr, sites, labels, counts, cuts, obs_sites, out):
    n_rep, n_copy = cfgs.shape[0], cfgs.shape[1]
    n_obs = cuts.shape[1]
    rows = np.arange(n_rep)
    copies = np.arange(n_copy)
    # every (replica, observation) pair, sorted by the event index it precedes
    flat = cuts.ravel()
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    bounds = np.searchsorted(flat_sorted, np.arange(sites.shape[1] + 2))
    spans = [(rule_ptr[i], rule_ptr[i + 1]) for i in range(len(rule_ptr) - 1)]

    def record(e):
        sel = order[bounds[e] : bounds[e + 1]]
        if sel.size:
            rr, jj = np.divmod(sel, n_obs)
            out[rr, :, jj, :] = cfgs[rr[:, None, None], copies[None, :, None], obs_sites[None, None, :]]

    for e in range(sites.shape[1]):
        record(e)
        live = rows[counts > e]
        if live.size == 0:
            break
        x = sites[live, e]
        zero = cfgs[live[:, None, None], copies[None, :, None], nbr[x][:, None, :]] == 0
        ok = np.zeros(zero.shape[:2], dtype=bool)
        for lo, hi in spans:
            ok |= zero[:, :, lo:hi].all(axis=2)
        cur = cfgs[live[:, None], copies[None, :], x[:, None]]
        new = np.where(ok, labels[live, e][:, None], cur)
        cfgs[live[:, None], copies[None, :], x[:, None]] = new
    record(sites.shape[1])


def observe_batch(cfgs, nbr, rule_ptr, sites, labels, counts, cuts, obs_sites):
    """Evolve ``cfgs[r, c]`` under the event list of replica r; record observations.

    ``cuts[r, j]`` is the number of events of replica r with time <= the j-th
    observation time, so observation j is taken before event ``cuts[r, j]``
    is processed. Returns ``out[r, c, j, s]`` = spin at ``obs_sites[s]``.
    ``cfgs`` is modified in place.
    """
    n_rep, n_copy = cfgs.shape[:2]
    out = np.zeros((n_rep, n_copy, cuts.shape[1], obs_sites.shape[0]), dtype=np.uint8)
    fn = _observe_batch_nb if _backend.use_numba() else _observe_batch_np
    fn(cfgs, nbr, rule_ptr, sites, labels, counts, cuts, obs_sites, out)
    return out


# ---------------------------------------------------------------------------
# longest dual path


@njit(cache=True, nogil=True)
def _max_jumps_nb(n_sites, ball, sites, start, lo, hi):
    best = np.full(n_sites, -1, dtype=np.int64)
    best[start] = 0
    for e in range(hi - 1, lo - 1, -1):
        y = sites[e]
        if best[y] < 0:
            continue
        v = best[y] + 1
        for j in range(ball.shape[1]):
            z = ball[y, j]
            if z >= 0 and best[z] < v:
                best[z] = v
    return best.max()


def _max_jumps_np(n_sites, ball, sites, start, lo, hi):
    best = np.full(n_sites, -1, dtype=np.int64)
    best[start] = 0
    for e in range(hi - 1, lo - 1, -1):
        y = sites[e]
        if best[y] < 0:
            continue
        nb = ball[y]
        nb = nb[nb >= 0]
        best[nb] = np.maximum(best[nb], best[y] + 1)
    return int(best.max())


def max_jumps(n_sites, ball, sites, start, lo, hi):
    """Longest jump count of a backward path from ``start`` using events ``lo..hi-1``.

    Events are visited from the latest to the earliest; a path sitting at the
    ringing site may jump anywhere in its ball (including onto itself).
    """
    fn = _max_jumps_nb if _backend.use_numba() else _max_jumps_np
    return int(fn(n_sites, ball, sites, int(start), int(lo), int(hi)))
