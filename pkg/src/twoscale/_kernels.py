"""Compiled event loops for affine models.

Both loops consume random numbers in exactly the same order as the pure
Python loop in :mod:`twoscale.simulator`: one uniform for the waiting time,
one for the event choice.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _rates(counts, env, N, sbase, scoef, fbase, fcoef, ssrc, fsrc, out):
    nx = counts.shape[0]
    nes = ssrc.shape[0]
    nef = fsrc.shape[0]
    total = 0.0
    for e in range(nes):
        c = counts[ssrc[e]]
        if c == 0:
            out[e] = 0.0
            continue
        r = sbase[e, env]
        for x in range(nx):
            r += scoef[e, env, x] * (counts[x] / N)
        r *= c
        out[e] = r
        total += r
    for e in range(nef):
        if fsrc[e] != env:
            out[nes + e] = 0.0
            continue
        r = fbase[e]
        for x in range(nx):
            r += fcoef[e, x] * (counts[x] / N)
        r *= N
        out[nes + e] = r
        total += r
    return total


@njit(cache=True, nogil=True)
def _choose(rates, u):
    acc = 0.0
    last = -1
    for k in range(rates.shape[0]):
        if rates[k] > 0.0:
            last = k
            acc += rates[k]
            if acc > u:
                return k
    return last


@njit(cache=True, nogil=True)
def simulate_affine(rng, counts0, env0, N, T, sbase, scoef, fbase, fcoef, ssrc, sdst, fsrc, fdst):
    """Direct-method simulation; returns (times, counts, env, absorbed, bad_rate)."""
    nx = counts0.shape[0]
    nes = ssrc.shape[0]
    cap = 1024
    times = np.empty(cap)
    hist = np.empty((cap + 1, nx), dtype=np.int64)
    envs = np.empty(cap + 1, dtype=np.int64)
    counts = counts0.copy()
    env = env0
    hist[0] = counts
    envs[0] = env
    rates = np.empty(nes + fsrc.shape[0])
    n = 0
    t = 0.0
    absorbed = False
    bad = False
    while True:
        R = _rates(counts, env, N, sbase, scoef, fbase, fcoef, ssrc, fsrc, rates)
        if not np.isfinite(R) or R < 0.0:
            bad = True
            break
        if R == 0.0:
            absorbed = True
            break
        t += -np.log(1.0 - rng.random()) / R
        if t > T:
            break
        k = _choose(rates, rng.random() * R)
        if k < nes:
            counts[ssrc[k]] -= 1
            counts[sdst[k]] += 1
        else:
            env = fdst[k - nes]
        if n == cap:
            cap *= 2
            t2 = np.empty(cap)
            t2[:n] = times[:n]
            times = t2
            h2 = np.empty((cap + 1, nx), dtype=np.int64)
            h2[: n + 1] = hist[: n + 1]
            hist = h2
            e2 = np.empty(cap + 1, dtype=np.int64)
            e2[: n + 1] = envs[: n + 1]
            envs = e2
        times[n] = t
        n += 1
        hist[n] = counts
        envs[n] = env
    return times[:n].copy(), hist[: n + 1].copy(), envs[: n + 1].copy(), absorbed, bad


@njit(cache=True, nogil=True)
def tube_hit_affine(
    rng, counts0, env0, N, T, sbase, scoef, fbase, fcoef, ssrc, sdst, fsrc, fdst, grid, target, delta
):
    """Simulate until the empirical measure leaves the sup-norm tube.

    ``target[k]`` is the reference measure at ``grid[k]`` (increasing, within
    ``[0, T]``). Returns True when every grid check passes.
    """
    nx = counts0.shape[0]
    nes = ssrc.shape[0]
    counts = counts0.copy()
    env = env0
    rates = np.empty(nes + fsrc.shape[0])
    t = 0.0
    k = 0
    ng = grid.shape[0]
    while True:
        R = _rates(counts, env, N, sbase, scoef, fbase, fcoef, ssrc, fsrc, rates)
        if R > 0.0:
            t_next = t - np.log(1.0 - rng.random()) / R
        else:
            t_next = np.inf
        # state is constant on [t, t_next): check grid points in there
        while k < ng and grid[k] < t_next:
            for x in range(nx):
                if abs(counts[x] / N - target[k, x]) > delta:
                    return False
            k += 1
        if k == ng or t_next > T:
            return True
        t = t_next
        j = _choose(rates, rng.random() * R)
        if j < nes:
            counts[ssrc[j]] -= 1
            counts[sdst[j]] += 1
        else:
            env = fdst[j - nes]
