"""Numerical evaluation of the path-space large-deviations rate functional.

At every time the functional is a sum of two concave maximisations:

* slow part, over potentials ``alpha`` on X::

      <alpha, mu_dot - Lbar* mu> - sum_e tau(alpha[x'] - alpha[x]) lbar_e mu[x]

* fast part, over potentials ``g`` on Y::

      sum_e m[y] gamma_e (1 - exp(g[y'] - g[y]))

Both objectives have the form ``<a, v> - sum_e w_e tau(a[dst_e] - a[src_e])``
and are solved by the same gauge-fixed damped Newton iteration. The optimal
edge multipliers ``h = exp(D a) - 1`` give the equivalent value
``sum_e tau_star(h_e) w_e``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import rel_entr

from .averaging import averaged_rates, invariant_measure, slow_drift
from .core import ToleranceConfig, project_to_simplex, tau, tau_star

logger = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "SlowRate",
    "FastRate",
    "LocalRateInput",
    "LocalRateSolution",
    "PathRateReport",
    "local_slow_rate",
    "local_fast_rate",
    "local_rate",
    "path_rate",
    "marginal_local_rate",
    "nonvariational_identity",
    "InitialLaw",
    "initial_rate",
    "tilt_cost_density",
]

# sup-norm cap on potentials; beyond it the optimiser is declared at infinity
NORM_CAP = 50.0
# gap between condensation levels used to represent infinite potential jumps
_LEVEL_GAP = 60.0


class SolverError(RuntimeError):
    """Newton iteration neither converged nor diverged within its budget."""


class SlowRate(NamedTuple):
    value: float
    alpha_hat: np.ndarray
    h: np.ndarray
    residual: float
    diverged: bool


class FastRate(NamedTuple):
    value: float
    g_hat: np.ndarray
    h: np.ndarray
    residual: float
    diverged: bool


@dataclass(frozen=True)
class LocalRateInput:
    mu: np.ndarray
    mu_dot: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        if abs(np.sum(self.mu_dot)) > 1e-10:
            raise ValueError("mu_dot must sum to zero")


@dataclass(frozen=True)
class LocalRateSolution:
    slow_value: float
    fast_value: float
    alpha_hat: np.ndarray
    g_hat: np.ndarray
    h_slow: np.ndarray
    h_fast: np.ndarray
    residual_slow: float
    residual_fast: float
    diverged_slow: bool
    diverged_fast: bool

    @property
    def value(self):
        return self.slow_value + self.fast_value


# ---------------------------------------------------------------------------
# the shared concave problem


def _objective(a, v, src, dst, w):
    pos = w > 0
    return float(a @ v - np.sum(w[pos] * tau(a[dst[pos]] - a[src[pos]])))


def _gradient(a, v, src, dst, w, n):
    flux = w * np.expm1(a[dst] - a[src])
    grad = v.copy()
    np.subtract.at(grad, dst, flux)
    np.add.at(grad, src, flux)
    return grad


def _neg_hessian(a, src, dst, w, n):
    c = w * np.exp(a[dst] - a[src])
    H = np.zeros((n, n))
    np.add.at(H, (src, src), c)
    np.add.at(H, (dst, dst), c)
    np.subtract.at(H, (src, dst), c)
    np.subtract.at(H, (dst, src), c)
    return H


def _newton(v, src, dst, w, n, pinned, a0, tol):
    """Maximise ``<a, v> - sum w tau(D a)`` over ``a`` with ``a[pinned] = 0``.

    Returns ``(a, residual, diverged)``; ``diverged`` means the iterates left
    the ``NORM_CAP`` ball.
    """
    free = np.setdiff1d(np.arange(n), pinned)
    a = np.zeros(n) if a0 is None else np.array(a0, dtype=float)
    a[pinned] = 0.0
    if np.abs(a).max(initial=0.0) > NORM_CAP:
        a[:] = 0.0
    if free.size == 0:
        return a, float(np.abs(_gradient(a, v, src, dst, w, n)).max(initial=0.0)), False
    f = _objective(a, v, src, dst, w)
    for _ in range(tol.max_newton_iters):
        grad = _gradient(a, v, src, dst, w, n)
        gf = grad[free]
        res = np.abs(gf).max()
        if res <= tol.solver_grad_tol:
            return a, res, False
        H = _neg_hessian(a, src, dst, w, n)[np.ix_(free, free)]
        try:
            d = np.linalg.solve(H, gf)
        except np.linalg.LinAlgError:
            d = gf / max(np.abs(np.diag(H)).max(), 1.0)
        step = 1.0
        slope = gf @ d
        while True:
            trial = a.copy()
            trial[free] += step * d
            ft = _objective(trial, v, src, dst, w)
            if np.isfinite(ft) and ft >= f + 1e-4 * step * slope - 1e-15 * abs(f):
                break
            step *= 0.5
            if step < 1e-12:
                break
        a, f = trial, ft
        if np.abs(a).max() > NORM_CAP:
            return a, res, True
    grad = _gradient(a, v, src, dst, w, n)
    res = np.abs(grad[free]).max()
    if res <= 10 * tol.solver_grad_tol:
        return a, res, False
    raise SolverError(f"Newton did not converge in {tol.max_newton_iters} iterations (residual {res:.3g})")


def _components(n, src, dst, w, connection):
    active = w > 0
    adj = csr_matrix((np.ones(active.sum()), (src[active], dst[active])), shape=(n, n))
    return connected_components(adj, directed=True, connection=connection)


def _first_of_each(labels):
    _, first = np.unique(labels, return_index=True)
    return first


# ---------------------------------------------------------------------------
# local rates


def local_slow_rate(model, mu, mu_dot, m, tol=None, alpha0=None):
    """Slow part of the local rate at ``(mu, mu_dot, m)``.

    Maximises over ``alpha`` with ``alpha[0] = 0``. States not connected to
    the rest through edges of positive averaged flux are pinned separately;
    if the required velocity puts net mass into such an isolated group the
    value is ``+inf``. Iterates escaping the norm cap also give ``+inf``.
    """
    tol = tol or ToleranceConfig()
    mu = np.asarray(mu, dtype=float)
    g = model.slow_graph
    lbar = averaged_rates(model, mu, m)
    w = lbar * mu[g.src]
    v = np.asarray(mu_dot, dtype=float) - slow_drift(model, mu, m)
    n = g.n
    _, labels = _components(n, g.src, g.dst, w, "weak")
    pinned = _first_of_each(labels)
    if 0 not in pinned:
        pinned[labels[pinned] == labels[0]] = 0
    for c in np.unique(labels):
        if abs(v[labels == c].sum()) > tol.solver_grad_tol:
            return SlowRate(np.inf, np.zeros(n), np.full(g.n_edges, np.nan), np.inf, True)
    a, res, diverged = _newton(v, g.src, g.dst, w, n, pinned, alpha0, tol)
    if diverged:
        return SlowRate(np.inf, a, np.full(g.n_edges, np.nan), res, True)
    value = max(_objective(a, v, g.src, g.dst, w), 0.0)
    h = np.expm1(a[g.dst] - a[g.src])
    return SlowRate(value, a, h, float(np.abs(_gradient(a, v, g.src, g.dst, w, n)).max()), False)


def local_fast_rate(model, mu, m, tol=None, g0=None):
    """Fast (occupation) part of the local rate at ``(mu, m)``.

    Environment edges leaving states of positive mass are grouped into
    strongly connected classes of positive flux. Edges between classes are
    suppressed completely at the optimum (the potential drops to ``-inf``
    along them) and contribute their full flux ``m[y] gamma_e``; within each
    class the maximiser is finite and found by Newton. ``diverged`` flags the
    presence of such infinite drops.
    """
    tol = tol or ToleranceConfig()
    f = model.fast_graph
    n = f.n
    m = np.asarray(m, dtype=float)
    w = m[f.src] * model.fast_vector(mu)
    ncomp, labels = _components(n, f.src, f.dst, w, "strong")
    cross = (labels[f.src] != labels[f.dst]) & (w > 0)
    inner = ~cross
    # sum w (1 - e^{Dg}) = <g, v> - sum w tau(Dg) with <g, v> = -sum w Dg
    v = np.zeros(n)
    np.subtract.at(v, f.dst[inner], w[inner])
    np.add.at(v, f.src[inner], w[inner])
    pinned = _first_of_each(labels)
    a, res, diverged = _newton(v, f.src[inner], f.dst[inner], w[inner], n, pinned, g0, tol)
    if diverged:
        raise SolverError("fast problem diverged inside a strongly connected class")
    value = float(np.sum(w[inner] * -np.expm1(a[f.dst[inner]] - a[f.src[inner]])) + w[cross].sum())
    value = max(value, 0.0)
    diverged = bool(cross.any())
    if diverged:
        a = a + _condensation_offsets(ncomp, labels, f.src[cross], f.dst[cross])
    a = a - a[0]
    h = np.expm1(a[f.dst] - a[f.src])
    h[cross] = -1.0
    return FastRate(value, a, h, res, diverged)


def _condensation_offsets(ncomp, labels, csrc, cdst):
    # longest-path level of each class in the condensation DAG
    level = np.zeros(ncomp)
    for _ in range(ncomp):
        changed = False
        for s, d in zip(labels[csrc], labels[cdst]):
            if level[d] < level[s] + 1:
                level[d] = level[s] + 1
                changed = True
        if not changed:
            break
    return -_LEVEL_GAP * level[labels]


def local_rate(model, mu, mu_dot, m, tol=None, alpha0=None, g0=None):
    """Both parts of the local rate as a :class:`LocalRateSolution`."""
    s = local_slow_rate(model, mu, mu_dot, m, tol, alpha0)
    f = local_fast_rate(model, mu, m, tol, g0)
    return LocalRateSolution(
        s.value, f.value, s.alpha_hat, f.g_hat, s.h, f.h, s.residual, f.residual, s.diverged, f.diverged
    )


def nonvariational_identity(model, inp, sol):
    """Gaps between the variational values and ``sum tau_star(h) * weight``."""
    mu = np.asarray(inp.mu, dtype=float)
    g, f = model.slow_graph, model.fast_graph
    w_slow = averaged_rates(model, mu, inp.m) * mu[g.src]
    w_fast = np.asarray(inp.m)[f.src] * model.fast_vector(mu)
    with np.errstate(invalid="ignore"):
        slow = np.sum(np.where(w_slow > 0, tau_star(sol.h_slow) * w_slow, 0.0))
        fast = np.sum(np.where(w_fast > 0, tau_star(sol.h_fast) * w_fast, 0.0))
    return abs(sol.slow_value - slow), abs(sol.fast_value - fast)


def tilt_cost_density(model, mu, m, alpha, g):
    """``sum tau_star(exp(D alpha) - 1) lbar mu + sum tau_star(exp(D g) - 1) gamma m``.

    The local rate of the typical path of the tilted model, computed directly
    from the tilt (no optimisation).
    """
    sg, fg = model.slow_graph, model.fast_graph
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    g = np.asarray(g, dtype=float)
    slow = tau_star(np.expm1(alpha[sg.dst] - alpha[sg.src])) * averaged_rates(model, mu, m) * mu[sg.src]
    fast = tau_star(np.expm1(g[fg.dst] - g[fg.src])) * model.fast_vector(mu) * np.asarray(m)[fg.src]
    return float(slow.sum()), float(fast.sum())


# ---------------------------------------------------------------------------
# path quadrature


@dataclass
class PathRateReport:
    J_total: float
    slow_part: float
    fast_part: float
    per_step: list
    quadrature_step: float
    solutions: list = field(default_factory=list, repr=False)

    def to_dict(self):
        def num(x):
            return x if np.isfinite(x) else "inf"

        return {
            "J_total": num(self.J_total),
            "slow_part": num(self.slow_part),
            "fast_part": num(self.fast_part),
            "quadrature_step": self.quadrature_step,
            "steps": [
                {"t": t, "slow": num(s), "fast": num(f), "diverged": [ds, df]}
                for t, s, f, ds, df in self.per_step
            ],
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def optimizers_to_csv(self, path, slow_labels, fast_labels):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"alpha_{x}" for x in slow_labels] + [f"g_{y}" for y in fast_labels])
            for (t, *_), sol in zip(self.per_step, self.solutions):
                w.writerow([t, *sol.alpha_hat, *sol.g_hat])


def velocity(mu_path, step):
    """Central differences inside, second-order one-sided at the ends."""
    mu_path = np.asarray(mu_path, dtype=float)
    if len(mu_path) < 3:
        return np.gradient(mu_path, step, axis=0, edge_order=1)
    return np.gradient(mu_path, step, axis=0, edge_order=2)


def path_rate(model, mu_path, theta_density, step, tol=None):
    """Trapezoidal quadrature of the local rate along a discretised path.

    Parameters
    ----------
    mu_path : array (n, |X|)
        Empirical-measure path on a uniform grid of spacing ``step``.
    theta_density : array (n, |Y|)
        Occupation density ``m_t`` on the same grid.

    Any step with infinite local rate makes ``J_total`` infinite. Newton
    solves are warm-started from the previous grid point.
    """
    tol = tol or ToleranceConfig()
    mu_path = np.asarray(mu_path, dtype=float)
    dens = np.asarray(theta_density, dtype=float)
    if mu_path.shape[0] != dens.shape[0]:
        raise ValueError("mu_path and theta_density must share the time grid")
    if mu_path.shape[1] != model.nx or dens.shape[1] != model.ny:
        raise ValueError("path dimensions do not match the model")
    n = len(mu_path)
    vel = velocity(mu_path, step)
    vel -= vel.mean(axis=1, keepdims=True)  # remove rounding drift off the tangent space
    slow = np.empty(n)
    fast = np.empty(n)
    steps, sols = [], []
    a0 = g0 = None
    for k in range(n):
        sol = local_rate(model, mu_path[k], vel[k], dens[k], tol, a0, g0)
        slow[k], fast[k] = sol.slow_value, sol.fast_value
        if not sol.diverged_slow:
            a0 = sol.alpha_hat
        if not sol.diverged_fast:
            g0 = sol.g_hat
        steps.append((k * step, slow[k], fast[k], sol.diverged_slow, sol.diverged_fast))
        sols.append(sol)
    wts = np.full(n, step)
    wts[0] = wts[-1] = 0.5 * step
    with np.errstate(invalid="ignore"):
        sp = float(wts @ slow)
        fp = float(wts @ fast)
    return PathRateReport(sp + fp, sp, fp, steps, step, sols)


# ---------------------------------------------------------------------------
# marginal (contracted) local rate


def _marginal_objective(model, mu, mu_dot, m, tol, state):
    s = local_slow_rate(model, mu, mu_dot, m, tol, state.get("a"))
    if not np.isfinite(s.value):
        return np.inf, None
    f = local_fast_rate(model, mu, m, tol, state.get("g"))
    state["a"], state["g"] = s.alpha_hat, f.g_hat
    sg, fg = model.slow_graph, model.fast_graph
    table = model.slow_table(mu)
    # envelope gradients: both parts are suprema of functions affine in m
    grad = -(np.expm1(s.alpha_hat[sg.dst] - s.alpha_hat[sg.src]) * mu[sg.src]) @ table
    with np.errstate(over="ignore"):
        ef = np.exp(np.minimum(f.g_hat[fg.dst] - f.g_hat[fg.src], 50.0))
    contrib = model.fast_vector(mu) * (1.0 - ef)
    fgrad = np.zeros(model.ny)
    np.add.at(fgrad, fg.src, contrib)
    return s.value + f.value, grad + fgrad


def marginal_local_rate(model, mu, mu_dot, tol=None, max_iter=500, starts=None):
    """Infimum over environment laws ``m`` of the summed local rate.

    Projected gradient descent with Armijo backtracking on the simplex, run
    from the uniform law, ``pi_mu`` and every vertex. The objective is convex
    in ``m``. Returns ``(value, m_star)``; ``m_star`` is ``None`` when the
    value is infinite for every start.
    """
    tol = tol or ToleranceConfig()
    mu = np.asarray(mu, dtype=float)
    ny = model.ny
    if starts is None:
        starts = [np.full(ny, 1.0 / ny), invariant_measure(model, mu)] + list(np.eye(ny))
    best_val, best_m = np.inf, None
    for m0 in starts:
        state = {}
        m = np.asarray(m0, dtype=float)
        val, grad = _marginal_objective(model, mu, mu_dot, m, tol, state)
        if not np.isfinite(val):
            continue
        lr = 1.0
        for _ in range(max_iter):
            moved = False
            while lr > 1e-14:
                # scale-free step: potentials at infinity give huge gradients
                cand = project_to_simplex(m - lr * grad / max(1.0, np.abs(grad).max()))
                cval, cgrad = _marginal_objective(model, mu, mu_dot, cand, tol, dict(state))
                if np.isfinite(cval) and cval <= val - 1e-4 * (grad @ (m - cand)) / max(1.0, np.abs(grad).max()):
                    moved = np.abs(cand - m).max() > 1e-13
                    m, val, grad = cand, cval, cgrad
                    break
                lr *= 0.5
            if not moved:
                break
            lr *= 2.0
        if val < best_val:
            best_val, best_m = val, m
    return best_val, best_m


# ---------------------------------------------------------------------------
# initial condition


@dataclass(frozen=True)
class InitialLaw:
    """Large-deviation behaviour of the initial empirical measure.

    ``kind="deterministic"``: the initial measure is ``ref`` (rate 0 there,
    ``+inf`` elsewhere). ``kind="sanov"``: particles are sampled i.i.d. from
    ``ref``, giving the relative entropy.
    """

    kind: str
    ref: np.ndarray

    def __post_init__(self):
        if self.kind not in ("deterministic", "sanov"):
            raise ValueError(f"unknown initial law {self.kind!r}")


def initial_rate(law, nu, atol=1e-12):
    nu = np.asarray(nu, dtype=float)
    ref = np.asarray(law.ref, dtype=float)
    if nu.shape != ref.shape:
        raise ValueError("dimension mismatch")
    if law.kind == "deterministic":
        return 0.0 if np.allclose(nu, ref, rtol=0, atol=atol) else np.inf
    return float(np.sum(rel_entr(nu, ref)))
