"""Exact event-driven simulation of the particle system and its environment.

Particles jump along slow edges at rate ``lambda_{x,x'}(mu_N, y)`` each; the
environment jumps at rate ``N * gamma_{y,y'}(mu_N)``. Only particle counts are
kept. Affine models run through a compiled loop; any other model through an
equivalent pure Python loop.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import AffineModel, ModelSpec

logger = logging.getLogger(__name__)

__all__ = [
    "SystemState",
    "SimulationPath",
    "OccupationMeasure",
    "TiltSpec",
    "SimulationError",
    "make_rng",
    "initial_state",
    "simulate",
    "empirical_path",
    "occupation",
    "path_functionals_UV",
    "tilted_model",
    "ensemble",
    "EnsembleStats",
]


class SimulationError(RuntimeError):
    """A model produced a non-finite or negative rate during simulation."""


def make_rng(seed):
    """PCG64 generator seeded through :class:`numpy.random.SeedSequence`.

    ``seed`` may be an int or a tuple of ints; ``(seed, replica)`` tuples give
    independent replica streams.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class SystemState:
    counts: np.ndarray
    env: int
    t: float = 0.0

    @property
    def N(self):
        return int(self.counts.sum())


def initial_state(model, N, nu, env=0):
    """Counts closest to ``N * nu`` (largest-remainder rounding) and an
    environment index (or label)."""
    nu = np.asarray(nu, dtype=float)
    raw = N * nu
    counts = np.floor(raw).astype(np.int64)
    short = N - counts.sum()
    if short:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    if not isinstance(env, (int, np.integer)):
        env = model.fast_graph.index[env]
    return SystemState(counts=counts, env=int(env))


@dataclass(frozen=True)
class SimulationPath:
    """Jump record of one run on ``[0, T]``.

    ``counts[k]`` and ``env[k]`` hold the state after the ``k``-th jump, with
    ``k = 0`` the initial state; ``jump_times`` has one entry fewer.
    """

    jump_times: np.ndarray
    counts: np.ndarray
    env: np.ndarray
    N: int
    T: float
    seed: object = None
    absorbed: bool = False

    @property
    def n_jumps(self):
        return len(self.jump_times)

    def state(self, k):
        t = 0.0 if k == 0 else float(self.jump_times[k - 1])
        return SystemState(self.counts[k].copy(), int(self.env[k]), t)

    def segment_bounds(self):
        """Start and end times of the constant pieces of the path on ``[0, T]``."""
        starts = np.concatenate(([0.0], self.jump_times))
        ends = np.concatenate((self.jump_times, [self.T]))
        return starts, ends

    def slow_jumps(self):
        """Boolean mask over jumps: True where a particle moved."""
        return np.any(self.counts[1:] != self.counts[:-1], axis=1)

    def to_csv(self, path, slow_labels, fast_labels):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"count_{x}" for x in slow_labels] + ["env"])
            starts, _ = self.segment_bounds()
            for k in range(len(starts)):
                w.writerow([repr(float(starts[k]))] + [int(c) for c in self.counts[k]] + [fast_labels[self.env[k]]])


def _simulate_python(model, N, counts, env, T, rng):
    g, f = model.slow_graph, model.fast_graph
    nes = g.n_edges
    counts = counts.copy()
    times, hist, envs = [], [counts.copy()], [env]
    t = 0.0
    absorbed = False
    while True:
        xi = counts / N
        slow = counts[g.src] * model.slow_table(xi)[:, env]
        fast = np.where(f.src == env, N * model.fast_vector(xi), 0.0)
        rates = np.concatenate((slow, fast))
        R = rates.sum()
        if not np.isfinite(R) or np.any(rates < 0):
            raise SimulationError(f"invalid rates at t={t}: {rates}")
        if R == 0.0:
            absorbed = True
            break
        t += -math.log(1.0 - rng.random()) / R
        if t > T:
            break
        u = rng.random() * R
        pos = np.nonzero(rates > 0)[0]
        k = pos[min(np.searchsorted(np.cumsum(rates[pos]), u, side="right"), len(pos) - 1)]
        if k < nes:
            counts[g.src[k]] -= 1
            counts[g.dst[k]] += 1
        else:
            env = int(f.dst[k - nes])
        times.append(t)
        hist.append(counts.copy())
        envs.append(env)
    return np.array(times), np.array(hist, dtype=np.int64), np.array(envs, dtype=np.int64), absorbed


def _affine_args(model):
    g, f = model.slow_graph, model.fast_graph
    return (model.slow_base, model.slow_coef, model.fast_base, model.fast_coef, g.src, g.dst, f.src, f.dst)


def simulate(model, N, initial, T, seed):
    """Simulate the joint process up to time ``T``.

    Parameters
    ----------
    initial : SystemState
        Starting counts (summing to ``N``) and environment index.
    seed : int or tuple of ints

    Returns
    -------
    SimulationPath
        If the total rate vanishes the path is held constant up to ``T`` and
        ``absorbed`` is set.
    """
    if N < 1:
        raise ValueError("N must be positive")
    counts = np.asarray(initial.counts, dtype=np.int64)
    if counts.sum() != N or counts.min() < 0 or counts.size != model.nx:
        raise ValueError("initial counts must be nonnegative and sum to N")
    if not 0 <= initial.env < model.ny:
        raise ValueError("initial environment index out of range")
    rng = make_rng(seed)
    if isinstance(model, AffineModel):
        times, hist, envs, absorbed, bad = _kernels.simulate_affine(
            rng, counts, int(initial.env), float(N), float(T), *_affine_args(model)
        )
        if bad:
            raise SimulationError("affine model produced a negative or non-finite rate")
    else:
        times, hist, envs, absorbed = _simulate_python(model, N, counts, int(initial.env), T, rng)
    if absorbed:
        logger.debug("absorbing state reached; path held constant to T=%g", T)
    return SimulationPath(times, hist, envs, int(N), float(T), seed, bool(absorbed))


def tube_hit(model, N, initial, T, seed, grid, target, delta):
    """Whether one run stays within sup-distance ``delta`` of ``target`` at
    every time in ``grid``. Requires an affine model."""
    if not isinstance(model, AffineModel):
        raise TypeError("tube probes need an AffineModel")
    return bool(
        _kernels.tube_hit_affine(
            make_rng(seed),
            np.asarray(initial.counts, dtype=np.int64),
            int(initial.env),
            float(N),
            float(T),
            *_affine_args(model),
            np.ascontiguousarray(grid, dtype=float),
            np.ascontiguousarray(target, dtype=float),
            float(delta),
        )
    )


def empirical_path(path, grid_step):
    """Empirical measure sampled on ``0, grid_step, ...`` up to ``T``.

    Right-continuous: at a jump time the post-jump value is used.
    Returns ``(grid, mu)`` with ``mu`` of shape ``(len(grid), |X|)``.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    grid = np.arange(0.0, path.T + 0.5 * grid_step, grid_step)
    grid = grid[grid <= path.T * (1 + 1e-12)]
    idx = np.searchsorted(path.jump_times, grid, side="right")
    return grid, path.counts[idx] / path.N


@dataclass(frozen=True)
class OccupationMeasure:
    """Cumulative time spent by the environment in each state, on a grid."""

    grid: np.ndarray
    mass: np.ndarray

    def to_csv(self, path, fast_labels):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"theta_{y}" for y in fast_labels])
            for k in range(len(self.grid)):
                w.writerow([repr(float(self.grid[k]))] + [repr(float(v)) for v in self.mass[k]])


def occupation(path, grid_step, ny=None):
    """Occupation measure of the environment sampled on a regular grid.

    The mass at each grid time is accumulated exactly from the sojourns.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    ny = ny or int(path.env.max()) + 1
    grid = np.arange(0.0, path.T + 0.5 * grid_step, grid_step)
    grid = grid[grid <= path.T * (1 + 1e-12)]
    starts, ends = path.segment_bounds()
    # cumulative occupation at each jump time
    cum = np.zeros((len(starts) + 1, ny))
    np.add.at(cum[1:], (np.arange(len(starts)), path.env), ends - starts)
    cum = np.cumsum(cum, axis=0)
    seg = np.searchsorted(path.jump_times, grid, side="right")
    mass = cum[seg].copy()
    mass[np.arange(len(grid)), path.env[seg]] += grid - starts[seg]
    return OccupationMeasure(grid, mass)


@dataclass(frozen=True)
class TiltSpec:
    """Constant exponential tilt: slow edges get ``exp(alpha[x'] - alpha[x])``
    and environment edges ``exp(g[y'] - g[y])``.

    Both vectors are shifted on construction so their first entry is zero.
    """

    alpha: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        g = np.asarray(self.g, dtype=float)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise ValueError("tilt must be finite")
        object.__setattr__(self, "alpha", a - a[0])
        object.__setattr__(self, "g", g - g[0])

    @classmethod
    def zero(cls, model):
        return cls(np.zeros(model.nx), np.zeros(model.ny))

    def slow_factor(self, model):
        g = model.slow_graph
        return np.exp(self.alpha[g.dst] - self.alpha[g.src])

    def fast_factor(self, model):
        f = model.fast_graph
        return np.exp(self.g[f.dst] - self.g[f.src])

    def sup_norm(self):
        return max(np.abs(self.alpha).max(), np.abs(self.g).max())


class _TiltedModel(ModelSpec):
    def __init__(self, base, tilt):
        self.base = base
        self._sf = tilt.slow_factor(base)
        self._ff = tilt.fast_factor(base)
        sidx = {e: i for i, e in enumerate(base.slow_graph.edges)}
        fidx = {e: i for i, e in enumerate(base.fast_graph.edges)}
        super().__init__(
            base.slow_graph,
            base.fast_graph,
            lambda e, xi, y: base.slow_rate(e, xi, y) * self._sf[sidx[tuple(e)]],
            lambda e, xi: base.fast_rate(e, xi) * self._ff[fidx[tuple(e)]],
            name=f"tilted({base.name})",
        )

    def slow_table(self, xi):
        return self.base.slow_table(xi) * self._sf[:, None]

    def fast_vector(self, xi):
        return self.base.fast_vector(xi) * self._ff


def tilted_model(model, tilt):
    """Model with every rate multiplied by its exponential tilt factor."""
    if isinstance(model, AffineModel):
        return model.scaled(tilt.slow_factor(model), tilt.fast_factor(model), name=f"tilted({model.name})")
    return _TiltedModel(model, tilt)


def _tables_along(model, xis):
    if isinstance(model, AffineModel):
        slow = model.slow_base[None] + np.einsum("eyx,kx->key", model.slow_coef, xis)
        fast = model.fast_base[None] + xis @ model.fast_coef.T
        return slow, fast
    slow = np.array([model.slow_table(x) for x in xis])
    fast = np.array([model.fast_vector(x) for x in xis])
    return slow, fast


def path_functionals_UV(model, path, tilt, compensator="full"):
    """Stochastic-exponential functionals ``(U_T, V_T)`` of a path.

    For a constant tilt, ``N * U_T + V_T`` is the log-likelihood ratio of the
    tilted against the original dynamics, so ``exp(N U_T + V_T)`` has mean 1.
    ``V_T`` reduces to ``g(Y_T) - g(Y_0)``.

    ``compensator="no_tau"`` drops the ``tau`` terms (a deliberately wrong
    compensator, used as a negative control).
    """
    if compensator not in ("full", "no_tau"):
        raise ValueError("compensator must be 'full' or 'no_tau'")
    g, f = model.slow_graph, model.fast_graph
    N = path.N
    Da = tilt.alpha[g.dst] - tilt.alpha[g.src]
    Dg = tilt.g[f.dst] - tilt.g[f.src]
    ka = np.expm1(Da) if compensator == "full" else Da
    kg = np.expm1(Dg) if compensator == "full" else Dg

    starts, ends = path.segment_bounds()
    dt = ends - starts
    xis = path.counts / N
    slow, fast = _tables_along(model, xis)
    y = path.env
    # per-segment compensator densities (already multiplied by N)
    lam_y = slow[np.arange(len(y)), :, y]
    slow_comp = (path.counts[:, g.src] * lam_y) @ ka
    fast_comp = N * ((fast * (f.src[None, :] == y[:, None])) @ kg)
    integral_slow = np.dot(slow_comp, dt)
    integral_fast = np.dot(fast_comp, dt)

    dmu = np.diff(path.counts, axis=0)
    jump_sum = float(np.sum(dmu @ tilt.alpha))
    U = (jump_sum - integral_slow - integral_fast) / N
    V = float(tilt.g[y[-1]] - tilt.g[y[0]])
    if not (np.isfinite(U) and np.isfinite(V)):
        raise SimulationError("non-finite stochastic exponential")
    return float(U), V


@dataclass
class EnsembleStats:
    replicas: int
    mean: float
    var: float
    ci95: tuple
    values: np.ndarray = field(repr=False)
    failures: list = field(default_factory=list)

    @property
    def stderr(self):
        n = len(self.values)
        return math.sqrt(self.var / n) if n > 1 else float("nan")

    @property
    def frequency(self):
        """Alias of the mean, for boolean functionals."""
        return self.mean

    def to_dict(self):
        return {
            "replicas": self.replicas,
            "mean": self.mean,
            "var": self.var,
            "ci95": list(self.ci95),
            "failures": list(self.failures),
        }


def ensemble(model, N, initial, T, replicas, seed, functional, threads=1):
    """Run independent replicas and summarise ``functional(path)``.

    Replica ``r`` uses seed ``(seed, r)``. A failing replica is recorded in
    ``failures`` and excluded from the statistics.
    """
    if replicas < 1:
        raise ValueError("replicas must be >= 1")

    def one(r):
        try:
            return float(functional(simulate(model, N, initial, T, (seed, r))))
        except (SimulationError, FloatingPointError) as exc:
            logger.warning("replica %d failed: %s", r, exc)
            return None

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(replicas)))
    else:
        results = [one(r) for r in range(replicas)]
    failures = [r for r, v in enumerate(results) if v is None]
    vals = np.array([v for v in results if v is not None])
    return summarize(vals, replicas, failures)


def summarize(vals, replicas=None, failures=()):
    n = len(vals)
    mean = float(vals.mean()) if n else float("nan")
    var = float(vals.var(ddof=1)) if n > 1 else 0.0
    half = 1.96 * math.sqrt(var / n) if n > 1 else 0.0
    return EnsembleStats(replicas or n, mean, var, (mean - half, mean + half), vals, list(failures))
