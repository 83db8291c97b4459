"""Scalar convex-analysis kernel and simplex helpers.

``tau`` is the log moment generating function of a centred unit-rate Poisson
variable and ``tau_star`` its Legendre dual. Both are the local cost kernels of
every jump-process rate function in this package.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "tau",
    "tau_prime",
    "tau_star",
    "legendre_gap",
    "as_simplex",
    "project_to_simplex",
    "ToleranceConfig",
    "SimplexError",
]

# below this |u| the Taylor series is used; truncation error is O(u^6)
_SERIES_CUTOFF = 1e-3


class SimplexError(ValueError):
    """Raised when a vector is not a probability vector within tolerance."""


def tau(u):
    """Return ``exp(u) - u - 1`` elementwise.

    Uses a Taylor series near zero so that tiny arguments keep full relative
    precision. Overflow saturates to ``inf``.
    """
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    with np.errstate(over="ignore"):
        out = np.expm1(u) - u
    small = np.abs(u) < _SERIES_CUTOFF
    if np.any(small):
        us = u[small]
        out[small] = us * us * (0.5 + us * (1.0 / 6.0 + us * (1.0 / 24.0 + us / 120.0)))
    return float(out[0]) if scalar else out


def tau_prime(u):
    """Derivative of :func:`tau`, ``exp(u) - 1``."""
    with np.errstate(over="ignore"):
        return np.expm1(u)


def tau_star(u):
    """Legendre dual of :func:`tau`.

    ``(u+1) log(u+1) - u`` for ``u > -1``, ``1`` at ``u = -1`` and ``+inf``
    below.
    """
    u = np.asarray(u, dtype=float)
    out = np.full(u.shape, np.inf)
    inside = u > -1.0
    ui = u[inside]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = (ui + 1.0) * np.log1p(ui) - ui
    small = np.abs(ui) < _SERIES_CUTOFF
    us = ui[small]
    vals[small] = us * us * (0.5 + us * (-1.0 / 6.0 + us * (1.0 / 12.0 + us * (-1.0 / 20.0))))
    out[inside] = vals
    out[u == -1.0] = 1.0
    return out if out.ndim else float(out)


def legendre_gap(u, grid=None):
    """Distance between ``tau_star(u)`` and a brute-force Legendre transform.

    The supremum of ``u*v - tau(v)`` is taken over ``grid`` (default
    ``[-40, 40]`` with step ``1e-3``). Used as an independent check only.
    """
    if grid is None:
        grid = np.linspace(-40.0, 40.0, 80001)
    grid = np.asarray(grid, dtype=float)
    brute = np.max(u * grid - tau(grid))
    return abs(tau_star(u) - brute)


def as_simplex(weights, tol=1e-12):
    """Validate ``weights`` as a probability vector and return it as an array.

    Raises
    ------
    SimplexError
        If any weight is negative or the total differs from one by more than
        ``tol``.
    """
    w = np.array(weights, dtype=float).ravel()
    if w.size == 0:
        raise SimplexError("empty probability vector")
    if not np.all(np.isfinite(w)):
        raise SimplexError(f"non-finite weights: {w}")
    if np.min(w) < 0.0:
        raise SimplexError(f"negative weight {np.min(w):.3g}")
    if abs(w.sum() - 1.0) > tol:
        raise SimplexError(f"weights sum to {w.sum():.17g}, not 1")
    return w


def project_to_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    v = v - v.max()  # the projection is invariant under constant shifts
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    cond = u - css / idx > 0
    rho = np.flatnonzero(cond)[-1] if cond.any() else 0
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True)
class ToleranceConfig:
    """Numerical tolerances shared by the solvers and integrators."""

    solver_grad_tol: float = 1e-8
    simplex_tol: float = 1e-9
    quadrature_step: float = 1e-3
    max_newton_iters: int = 200

    def __post_init__(self):
        for name in ("solver_grad_tol", "simplex_tol", "quadrature_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.max_newton_iters < 1:
            raise ValueError("max_newton_iters must be at least 1")
