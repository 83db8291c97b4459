"""Monte Carlo diagnostics: averaging, occupation concentration, the
exponential martingale identity and tube-probability exponents."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .averaging import invariant_measure, mckean_vlasov_flow, slow_drift
from .ratefn import path_rate, tilt_cost_density
from .simulator import (
    TiltSpec,
    empirical_path,
    initial_state,
    occupation,
    path_functionals_UV,
    simulate,
    tilted_model,
    tube_hit,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AveragingReport",
    "OccupationReport",
    "MartingaleReport",
    "ExponentProbe",
    "averaging_check",
    "occupation_check",
    "martingale_battery",
    "exponent_probe",
]


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _grid(T, step):
    n = int(round(T / step))
    if not math.isclose(n * step, T, rel_tol=1e-9):
        raise ValueError(f"grid step {step} does not divide T={T}")
    return np.linspace(0.0, T, n + 1)


# ---------------------------------------------------------------------------
# averaging principle


@dataclass(frozen=True)
class AveragingReport:
    Ns: tuple
    T: float
    deviations: dict  # N -> array of per-replica sup-norm deviations

    def median(self, N):
        return float(np.median(self.deviations[N]))

    def q90(self, N):
        return float(np.quantile(self.deviations[N], 0.9))

    def to_dict(self):
        return {
            "Ns": list(self.Ns),
            "T": self.T,
            "deviations": {str(N): {"median": self.median(N), "q90": self.q90(N)} for N in self.Ns},
        }


def averaging_check(
    model, nu, Ns, T, replicas, seed, grid_step=0.01, environment_law="invariant", threads=1
):
    """Sup-norm distance between simulated empirical measures and the
    McKean-Vlasov flow.

    ``environment_law="uniform"`` replaces ``pi_xi`` by the uniform law in
    the reference flow; it serves as a negative control.
    """
    Ns = tuple(int(n) for n in Ns)
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise ValueError("Ns must be increasing")
    if replicas < 10:
        raise ValueError("averaging_check needs at least 10 replicas")
    grid = _grid(T, grid_step)
    if environment_law == "invariant":
        field_ = None
    elif environment_law == "uniform":
        unif = np.full(model.ny, 1.0 / model.ny)
        field_ = lambda xi: slow_drift(model, xi, unif)  # noqa: E731
    else:
        raise ValueError("environment_law must be 'invariant' or 'uniform'")
    sub = max(1, int(round(grid_step / 1e-3)))
    flow = mckean_vlasov_flow(model, nu, T, grid_step / sub, field=field_)
    ref = flow.mu[::sub]
    devs = {}
    for N in Ns:
        init = initial_state(model, N, nu)

        def one(r, N=N, init=init):
            path = simulate(model, N, init, T, (seed, N, r))
            _, mu = empirical_path(path, grid_step)
            return np.abs(mu - ref).max()

        devs[N] = np.array(_map(one, range(replicas), threads))
        logger.info("averaging N=%d median deviation %.4g", N, np.median(devs[N]))
    return AveragingReport(Ns, float(T), devs)


# ---------------------------------------------------------------------------
# occupation measure concentration


@dataclass(frozen=True)
class OccupationReport:
    N: int
    window: float
    distances: np.ndarray  # per replica, sup over windows of the TV distance
    sparse_windows: int

    @property
    def median(self):
        return float(np.median(self.distances))

    def to_dict(self):
        return {
            "N": self.N,
            "window": self.window,
            "median": self.median,
            "q90": float(np.quantile(self.distances, 0.9)),
            "sparse_windows": self.sparse_windows,
        }


def occupation_check(model, nu, N, T, window, replicas, seed, substeps=10, threads=1):
    """Compare windowed occupation densities of the environment with the
    average of ``pi_{mu_N(t)}`` over the same window.

    The distance per replica is the largest total-variation distance over
    all windows. Windows seeing fewer than 10 environment jumps are counted
    in ``sparse_windows`` and logged.
    """
    if window < 10.0 / N:
        raise ValueError("window must be at least 10/N")
    edges = _grid(T, window)
    fine = window / substeps
    init = initial_state(model, N, nu)

    def one(r):
        path = simulate(model, N, init, T, (seed, r))
        occ = occupation(path, window, model.ny)
        dens = np.diff(occ.mass, axis=0) / window
        _, mu = empirical_path(path, fine)
        pis = np.array([invariant_measure(model, x) for x in mu[:-1]])
        pi_win = pis.reshape(len(edges) - 1, substeps, model.ny).mean(axis=1)
        tv = 0.5 * np.abs(dens - pi_win).sum(axis=1)
        env_jump_times = path.jump_times[np.diff(path.env) != 0]
        counts = np.histogram(env_jump_times, bins=edges)[0]
        return tv.max(), int(np.sum(counts < 10))

    out = _map(one, range(replicas), threads)
    sparse = sum(s for _, s in out)
    if sparse:
        logger.warning("%d windows saw fewer than 10 environment jumps", sparse)
    return OccupationReport(int(N), float(window), np.array([d for d, _ in out]), sparse)


# ---------------------------------------------------------------------------
# exponential martingale


@dataclass(frozen=True)
class MartingaleReport:
    N: int
    T: float
    replicas: int
    means: np.ndarray
    stderrs: np.ndarray
    z: np.ndarray
    overflow: np.ndarray

    @property
    def pass_fraction(self):
        return float(np.mean(np.abs(self.z) <= 3.0))

    def passes(self):
        return self.pass_fraction >= 0.95 and not self.overflow.any()

    def to_dict(self):
        return {
            "N": self.N,
            "T": self.T,
            "replicas": self.replicas,
            "tilts": [
                {"mean": float(m), "stderr": float(s), "z": float(z), "variance_overflow": bool(o)}
                for m, s, z, o in zip(self.means, self.stderrs, self.z, self.overflow)
            ],
            "pass_fraction": self.pass_fraction,
            "passes": self.passes(),
        }


def martingale_battery(
    model, N, T, tilts, replicas, seed, nu=None, compensator="full", variance_cap=100.0, threads=1
):
    """Sample means of ``exp(N U_T + V_T)`` for several constant tilts.

    Every tilt is evaluated on the same simulated paths. ``z`` is
    ``(mean - 1) / stderr``; a tilt whose sample variance exceeds
    ``variance_cap`` is flagged as overflowing (too aggressive for this
    ``N * T``).
    """
    for tl in tilts:
        if tl.sup_norm() > 0.5 + 1e-12:
            raise ValueError("tilts must have sup-norm at most 0.5")
    if replicas < 10_000:
        logger.warning("martingale battery with %d < 10^4 replicas", replicas)
    nu = np.full(model.nx, 1.0 / model.nx) if nu is None else nu
    init = initial_state(model, N, nu)

    def one(r):
        path = simulate(model, N, init, T, (seed, r))
        return [
            math.exp(N * u + v) for u, v in (path_functionals_UV(model, path, tl, compensator) for tl in tilts)
        ]

    vals = np.array(_map(one, range(replicas), threads)).reshape(replicas, len(tilts))
    means = vals.mean(axis=0)
    var = vals.var(axis=0, ddof=1) if replicas > 1 else np.zeros(len(tilts))
    se = np.sqrt(var / replicas)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (means - 1.0) / se, np.where(np.isclose(means, 1.0, rtol=0, atol=1e-12), 0.0, np.inf))
    return MartingaleReport(int(N), float(T), int(replicas), means, se, z, var > variance_cap)


# ---------------------------------------------------------------------------
# tube-probability exponents


@dataclass
class ExponentProbe:
    tilt: TiltSpec
    target_path: object
    delta: float
    Ns: tuple
    replicas: int
    hits: dict
    estimates: dict
    lower_bound: dict
    predicted: float
    predicted_direct: float
    grid: np.ndarray = field(repr=False)

    def relative_gap(self, N):
        if self.predicted == 0:
            return math.inf if self.estimates[N] else 0.0
        return (self.estimates[N] - self.predicted) / self.predicted

    def to_dict(self):
        return {
            "tilt": {"alpha": self.tilt.alpha.tolist(), "g": self.tilt.g.tolist()},
            "delta": self.delta,
            "T": float(self.target_path.t[-1]),
            "replicas": self.replicas,
            "predicted": self.predicted,
            "predicted_direct": self.predicted_direct,
            "per_N": [
                {
                    "N": N,
                    "hits": self.hits[N],
                    "estimate": self.estimates[N],
                    "lower_bound": self.lower_bound[N],
                    "relative_gap": self.relative_gap(N),
                }
                for N in self.Ns
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def hits_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["N", "replicas", "hits", "estimate", "lower_bound"])
            for N in self.Ns:
                w.writerow([N, self.replicas, self.hits[N], self.estimates[N], int(self.lower_bound[N])])


def exponent_probe(
    model, nu, tilt, delta, Ns, replicas, seed, T, step=1e-3, grid_step=0.01, threads=1
):
    """Estimate ``-(1/N) log P(mu_N stays within delta of the tilted flow)``.

    The target is the McKean-Vlasov flow of the tilted model started at
    ``nu``. The prediction is the rate functional of that path, with the
    invariant law of the tilted environment as occupation density, under the
    original model; it is computed both by :func:`path_rate` and directly
    from the tilt. When no replica stays in the tube the estimate is the
    lower bound ``log(replicas) / N``.
    """
    Ns = tuple(int(n) for n in Ns)
    tm = tilted_model(model, tilt)
    target = mckean_vlasov_flow(tm, nu, T, step)
    report = path_rate(model, target.mu, target.pi, target.step)
    direct = np.array([sum(tilt_cost_density(model, x, p, tilt.alpha, tilt.g)) for x, p in zip(target.mu, target.pi)])
    w = np.full(len(direct), target.step)
    w[0] = w[-1] = 0.5 * target.step
    predicted_direct = float(w @ direct)
    if abs(predicted_direct - report.J_total) > 1e-4:
        logger.warning("predicted exponents disagree: %.6g vs %.6g", report.J_total, predicted_direct)
    sub = int(round(grid_step / target.step))
    if sub < 1 or not math.isclose(sub * target.step, grid_step, rel_tol=1e-6):
        raise ValueError("grid_step must be a multiple of the flow step")
    grid = target.t[::sub]
    ref = target.mu[::sub]
    hits, est, lb = {}, {}, {}
    for N in Ns:
        init = initial_state(model, N, nu)
        flags = _map(
            lambda r, N=N, init=init: tube_hit(model, N, init, T, (seed, N, r), grid, ref, delta),
            range(replicas),
            threads,
        )
        hits[N] = int(sum(flags))
        lb[N] = hits[N] == 0
        est[N] = -math.log(max(hits[N], 1) / replicas) / N
        logger.info("tube probe N=%d hits %d/%d estimate %.5g", N, hits[N], replicas, est[N])
    return ExponentProbe(
        tilt, target, float(delta), Ns, int(replicas), hits, est, lb, float(report.J_total), predicted_direct, grid
    )
