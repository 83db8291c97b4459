"""Fast-chain stationary laws, averaged slow rates and the McKean-Vlasov flow."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import SimplexError, ToleranceConfig

__all__ = [
    "fast_generator",
    "invariant_measure",
    "averaged_rates",
    "slow_drift",
    "averaged_drift",
    "mckean_vlasov_flow",
    "AveragedFlow",
]


def fast_generator(model, xi):
    """Rate matrix ``L_xi`` of the environment with the slow state frozen at ``xi``."""
    g = model.fast_graph
    rates = model.fast_vector(xi)
    L = np.zeros((g.n, g.n))
    np.add.at(L, (g.src, g.dst), rates)
    L[np.diag_indices(g.n)] = -L.sum(axis=1)
    return L


def stationary_law(L):
    """Stationary row vector of an irreducible rate matrix.

    Solves ``pi L = 0`` with the last balance equation replaced by the
    normalisation, then applies one step of iterative refinement.
    """
    n = L.shape[0]
    if n == 1:
        return np.ones(1)
    M = L.T.copy()
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    if np.linalg.cond(M) > 1e13:
        raise np.linalg.LinAlgError("environment chain is reducible or nearly so")
    pi = np.linalg.solve(M, rhs)
    pi += np.linalg.solve(M, rhs - M @ pi)
    if pi.min() < -1e-10:
        raise np.linalg.LinAlgError(f"negative stationary mass {pi.min():.3g}")
    pi = np.maximum(pi, 0.0)
    return pi / pi.sum()


def invariant_measure(model, xi):
    """Unique invariant law ``pi_xi`` of the environment at slow state ``xi``."""
    return stationary_law(fast_generator(model, xi))


def averaged_rates(model, xi, m):
    """Slow edge rates averaged over the environment law ``m``."""
    return model.slow_table(xi) @ np.asarray(m, dtype=float)


def slow_drift(model, xi, m):
    """Velocity ``Lambda_bar*_{xi,m} xi`` of the averaged slow dynamics."""
    xi = np.asarray(xi, dtype=float)
    g = model.slow_graph
    flux = xi[g.src] * averaged_rates(model, xi, m)
    out = np.zeros(g.n)
    np.add.at(out, g.dst, flux)
    np.subtract.at(out, g.src, flux)
    return out


def averaged_drift(model, xi):
    """McKean-Vlasov vector field: the slow drift under ``pi_xi``."""
    return slow_drift(model, xi, invariant_measure(model, xi))


@dataclass
class AveragedFlow:
    """Solution of the McKean-Vlasov equation on a uniform time grid."""

    t: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    step: float
    slow_labels: tuple = ()
    fast_labels: tuple = ()

    def header(self):
        return (
            ["t"]
            + [f"mu_{x}" for x in self.slow_labels]
            + [f"pi_{y}" for y in self.fast_labels]
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for k in range(len(self.t)):
                w.writerow([repr(float(v)) for v in (self.t[k], *self.mu[k], *self.pi[k])])

    @classmethod
    def from_csv(cls, path):
        """Read a flow written by :meth:`to_csv`. ``theta_*`` columns are
        accepted in place of ``pi_*``."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head, data = rows[0], np.array(rows[1:], dtype=float)
        mu_cols = [i for i, h in enumerate(head) if h.startswith("mu_")]
        pi_cols = [i for i, h in enumerate(head) if h.startswith(("pi_", "theta_"))]
        if head[0] != "t" or not mu_cols or not pi_cols:
            raise ValueError(f"{path}: expected columns t, mu_*, pi_*")
        t = data[:, 0]
        step = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(
            t=t,
            mu=data[:, mu_cols],
            pi=data[:, pi_cols],
            step=step,
            slow_labels=tuple(head[i][3:] for i in mu_cols),
            fast_labels=tuple(head[i].split("_", 1)[1] for i in pi_cols),
        )


def _renormalise(mu, tol):
    if mu.min() < -tol or abs(mu.sum() - 1.0) > tol:
        raise SimplexError(
            f"flow left the simplex (min {mu.min():.3g}, mass {mu.sum():.17g}); reduce the step"
        )
    mu = np.maximum(mu, 0.0)
    return mu / mu.sum()


def mckean_vlasov_flow(model, nu, T, step, tol=None, field=None):
    """Integrate the McKean-Vlasov equation with classical RK4.

    The environment law is recomputed at every stage. The grid is uniform with
    ``ceil(T / step)`` intervals, so the effective step may be slightly
    smaller than requested.

    Parameters
    ----------
    field : callable, optional
        Alternative vector field ``xi -> velocity``; defaults to
        :func:`averaged_drift` of ``model``.
    """
    tol = tol or ToleranceConfig()
    if not (0 < step <= T):
        raise ValueError("need 0 < step <= T")
    f = field or (lambda xi: averaged_drift(model, xi))
    n = int(np.ceil(T / step - 1e-9))
    h = T / n
    mu = np.empty((n + 1, model.nx))
    pi = np.empty((n + 1, model.ny))
    mu[0] = _renormalise(np.asarray(nu, dtype=float), tol.simplex_tol)
    for k in range(n):
        x = mu[k]
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        mu[k + 1] = _renormalise(x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), tol.simplex_tol)
    for k in range(n + 1):
        pi[k] = invariant_measure(model, mu[k])
    return AveragedFlow(
        t=np.linspace(0.0, T, n + 1),
        mu=mu,
        pi=pi,
        step=h,
        slow_labels=model.slow_graph.vertices,
        fast_labels=model.fast_graph.vertices,
    )
