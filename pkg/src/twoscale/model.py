"""System definitions: graphs, rate functions, validation and built-in models.

A model consists of a slow graph on the particle state space X, a fast graph
on the environment state space Y, per-particle slow rates
``lambda_{x,x'}(xi, y)`` and un-accelerated environment rates
``gamma_{y,y'}(xi)``. The simulator multiplies the environment rates by N.

Two representations are provided. :class:`ModelSpec` wraps arbitrary Python
rate callables. :class:`AffineModel` stores rates that are affine in ``xi``
(separately for every environment state) as arrays; it evaluates much faster
and is what the compiled simulation kernels consume.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.stats import qmc

logger = logging.getLogger(__name__)

__all__ = [
    "DirectedGraph",
    "ModelSpec",
    "AffineModel",
    "ValidationReport",
    "ModelConfigError",
    "validate",
    "retrial_model",
    "wlan_model",
    "toy_model",
    "load_model",
    "model_from_config",
]


class ModelConfigError(ValueError):
    """Malformed or schema-violating model configuration."""


class DirectedGraph:
    """Finite directed graph without self-loops or duplicate edges.

    Vertices are arbitrary hashable labels; edges are referenced by position
    in :attr:`edges`, and internally as integer arrays :attr:`src`,
    :attr:`dst`.
    """

    def __init__(self, vertices, edges):
        self.vertices = tuple(vertices)
        if len(set(self.vertices)) != len(self.vertices):
            raise ValueError("duplicate vertex labels")
        self.index = {v: i for i, v in enumerate(self.vertices)}
        edges = tuple((a, b) for a, b in edges)
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate edges")
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop at {a!r}")
            if a not in self.index or b not in self.index:
                raise ValueError(f"edge ({a!r}, {b!r}) uses an unknown vertex")
        self.edges = edges
        self.src = np.array([self.index[a] for a, _ in edges], dtype=np.int64)
        self.dst = np.array([self.index[b] for _, b in edges], dtype=np.int64)

    @property
    def n(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    def incidence(self):
        """``|V| x |E|`` matrix with +1 at the head and -1 at the tail of each edge."""
        b = np.zeros((self.n, self.n_edges))
        cols = np.arange(self.n_edges)
        b[self.dst, cols] += 1.0
        b[self.src, cols] -= 1.0
        return b

    def is_strongly_connected(self):
        if self.n == 1:
            return True
        adj = csr_matrix((np.ones(self.n_edges), (self.src, self.dst)), shape=(self.n, self.n))
        ncomp, _ = connected_components(adj, directed=True, connection="strong")
        return ncomp == 1

    def __repr__(self):
        return f"DirectedGraph({self.n} vertices, {self.n_edges} edges)"


class ModelSpec:
    """A two-time-scale mean-field model with arbitrary rate callables.

    Parameters
    ----------
    slow_graph, fast_graph : DirectedGraph
    slow_rate : callable ``(edge, xi, y) -> float``
        Per-particle rate of the slow edge ``edge`` (a pair of X labels) when
        the empirical measure is ``xi`` (array over X) and the environment is
        in state ``y`` (a Y label).
    fast_rate : callable ``(edge, xi) -> float``
        Un-accelerated rate of the environment edge ``edge``.
    name : str
    """

    affine = False

    def __init__(self, slow_graph, fast_graph, slow_rate, fast_rate, name="model"):
        self.slow_graph = slow_graph
        self.fast_graph = fast_graph
        self._slow_rate = slow_rate
        self._fast_rate = fast_rate
        self.name = name

    @property
    def nx(self):
        return self.slow_graph.n

    @property
    def ny(self):
        return self.fast_graph.n

    def slow_rate(self, edge, xi, y):
        return float(self._slow_rate(edge, np.asarray(xi, dtype=float), y))

    def fast_rate(self, edge, xi):
        return float(self._fast_rate(edge, np.asarray(xi, dtype=float)))

    def slow_table(self, xi):
        """Slow rates at ``xi`` as an ``(n_slow_edges, |Y|)`` array."""
        xi = np.asarray(xi, dtype=float)
        out = np.empty((self.slow_graph.n_edges, self.ny))
        for j, y in enumerate(self.fast_graph.vertices):
            for e, edge in enumerate(self.slow_graph.edges):
                out[e, j] = self._slow_rate(edge, xi, y)
        return out

    def fast_vector(self, xi):
        """Un-accelerated environment rates at ``xi``, one per fast edge."""
        xi = np.asarray(xi, dtype=float)
        return np.array([self._fast_rate(edge, xi) for edge in self.fast_graph.edges], dtype=float)

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, |X|={self.nx}, |Y|={self.ny})"


class AffineModel(ModelSpec):
    """Model whose rates are affine in ``xi`` for every environment state.

    ``slow_rate[e, y] = slow_base[e, y] + slow_coef[e, y, :] @ xi`` and
    ``fast_rate[e] = fast_base[e] + fast_coef[e, :] @ xi``.
    """

    affine = True

    def __init__(self, slow_graph, fast_graph, slow_base, slow_coef, fast_base, fast_coef, name="affine"):
        self.slow_base = np.ascontiguousarray(slow_base, dtype=float)
        self.slow_coef = np.ascontiguousarray(slow_coef, dtype=float)
        self.fast_base = np.ascontiguousarray(fast_base, dtype=float)
        self.fast_coef = np.ascontiguousarray(fast_coef, dtype=float)
        nex, ney = slow_graph.n_edges, fast_graph.n_edges
        nx, ny = slow_graph.n, fast_graph.n
        if self.slow_base.shape != (nex, ny) or self.slow_coef.shape != (nex, ny, nx):
            raise ValueError("slow rate tables do not match the graphs")
        if self.fast_base.shape != (ney,) or self.fast_coef.shape != (ney, nx):
            raise ValueError("fast rate tables do not match the graphs")
        super().__init__(slow_graph, fast_graph, self._slow_scalar, self._fast_scalar, name)

    def _slow_scalar(self, edge, xi, y):
        e = self.slow_graph.edges.index(tuple(edge))
        j = self.fast_graph.index[y]
        return self.slow_base[e, j] + self.slow_coef[e, j] @ xi

    def _fast_scalar(self, edge, xi):
        e = self.fast_graph.edges.index(tuple(edge))
        return self.fast_base[e] + self.fast_coef[e] @ xi

    def slow_table(self, xi):
        return self.slow_base + self.slow_coef @ np.asarray(xi, dtype=float)

    def fast_vector(self, xi):
        return self.fast_base + self.fast_coef @ np.asarray(xi, dtype=float)

    def scaled(self, slow_factor, fast_factor, name=None):
        """Copy with every slow edge rate multiplied by ``slow_factor[e]`` and
        every fast edge rate by ``fast_factor[e]``."""
        sf = np.asarray(slow_factor, dtype=float)
        ff = np.asarray(fast_factor, dtype=float)
        return AffineModel(
            self.slow_graph,
            self.fast_graph,
            self.slow_base * sf[:, None],
            self.slow_coef * sf[:, None, None],
            self.fast_base * ff,
            self.fast_coef * ff[:, None],
            name=name or self.name,
        )


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate`.

    ``min_slow_rate`` is the smallest environment-averaged slow rate
    ``lambda_bar(xi, pi_xi)`` seen over the samples, i.e. the rate the slow
    dynamics actually experiences. ``min_slow_rate_strict`` is the smallest
    raw ``lambda(xi, y)`` over all environment states; it is zero for models
    whose slow rates switch off in some environment states.
    """

    slow_irreducible: bool
    fast_irreducible: bool
    min_slow_rate: float
    min_fast_rate: float
    lipschitz_estimate: float
    sample_count: int
    min_slow_rate_strict: float = float("nan")

    def passes(self):
        return (
            self.slow_irreducible
            and self.fast_irreducible
            and self.min_slow_rate > 0.0
            and self.min_fast_rate > 0.0
        )

    @property
    def strict_positivity(self):
        return self.min_slow_rate_strict > 0.0

    def to_dict(self):
        return {
            "slow_irreducible": self.slow_irreducible,
            "fast_irreducible": self.fast_irreducible,
            "min_slow_rate": self.min_slow_rate,
            "min_fast_rate": self.min_fast_rate,
            "min_slow_rate_strict": self.min_slow_rate_strict,
            "lipschitz_estimate": self.lipschitz_estimate,
            "sample_count": self.sample_count,
            "passes": self.passes(),
        }


def simplex_samples(n_states, samples, seed):
    """Deterministic quasi-random points on the simplex, vertices first."""
    pts = [np.eye(n_states)[i] for i in range(n_states)]
    if n_states == 1:
        return np.ones((max(samples, 1), 1))
    sob = qmc.Sobol(d=n_states, scramble=True, seed=seed)
    u = sob.random_base2(max(int(np.ceil(np.log2(max(samples - n_states, 1)))), 0))
    e = -np.log1p(-np.clip(u, 0.0, 1.0 - 1e-16))
    pts.extend(e / e.sum(axis=1, keepdims=True))
    return np.array(pts[:samples])


def validate(model, samples=256, seed=0):
    """Check the standing assumptions of a model on sampled simplex points.

    Irreducibility is decided exactly from the graphs. Rate positivity and the
    Lipschitz constant of the slow rates (finite-difference ratio in the
    l1 norm) are estimated over ``samples`` quasi-random points. A vanishing
    raw slow rate in some environment state is logged, not failed.
    """
    from .averaging import invariant_measure  # local import: averaging imports model

    if samples < 100:
        raise ValueError("validate needs at least 100 samples")
    slow_irr = model.slow_graph.is_strongly_connected()
    fast_irr = model.fast_graph.is_strongly_connected()
    pts = simplex_samples(model.nx, samples, seed)
    min_fast = np.inf
    min_strict = np.inf
    min_avg = np.inf
    lip = 0.0
    for k, xi in enumerate(pts):
        table = model.slow_table(xi)
        fast = model.fast_vector(xi)
        if not (np.all(np.isfinite(table)) and np.all(np.isfinite(fast))):
            raise ValueError(f"non-finite rate at xi={xi}")
        min_strict = min(min_strict, table.min(initial=np.inf))
        min_fast = min(min_fast, fast.min(initial=np.inf))
        if fast_irr and fast.min(initial=1.0) > 0.0:
            try:
                pi = invariant_measure(model, xi)
                min_avg = min(min_avg, (table @ pi).min(initial=np.inf))
            except np.linalg.LinAlgError:
                min_avg = 0.0
        else:
            min_avg = min(min_avg, table.max(axis=1).min(initial=np.inf))
        other = pts[(k + 1) % len(pts)]
        near = 0.99 * xi + 0.01 * other
        dist = np.abs(near - xi).sum()
        if dist > 0:
            lip = max(lip, np.abs(model.slow_table(near) - table).max(initial=0.0) / dist)
    if min_strict <= 0.0:
        logger.warning(
            "model %s: some slow rates vanish for some environment states "
            "(min raw rate %.3g); averaged rates are used for the positivity check",
            model.name,
            min_strict,
        )
    return ValidationReport(
        slow_irreducible=bool(slow_irr),
        fast_irreducible=bool(fast_irr),
        min_slow_rate=float(min_avg),
        min_fast_rate=float(min_fast),
        lipschitz_estimate=float(lip),
        sample_count=len(pts),
        min_slow_rate_strict=float(min_strict),
    )


# ---------------------------------------------------------------------------
# built-in models


def retrial_model(lam=1.0, alpha=2.0, K=3):
    """Retrial system with N orbit queues of capacity ``K`` and one server.

    Slow states are orbit-queue lengths ``0..K``. A queue grows at rate
    ``lam`` while the server is busy and its head customer retries at rate
    ``alpha`` while the server is idle. The server turns busy at rate
    ``lam + alpha * (1 - xi(0))`` and completes service at rate 1 (both
    multiplied by N in the simulator).
    """
    K = int(K)
    if K < 1:
        raise ValueError("retrial model needs K >= 1")
    if not (lam > 0 and alpha > 0):
        raise ValueError("retrial rates must be positive")
    xs = list(range(K + 1))
    edges = [(i, i + 1) for i in range(K)] + [(i, i - 1) for i in range(1, K + 1)]
    slow = DirectedGraph(xs, edges)
    fast = DirectedGraph(["idle", "busy"], [("idle", "busy"), ("busy", "idle")])
    nx = K + 1
    base = np.zeros((slow.n_edges, 2))
    for e, (a, b) in enumerate(edges):
        if b == a + 1:
            base[e, 1] = lam
        else:
            base[e, 0] = alpha
    coef = np.zeros((slow.n_edges, 2, nx))
    fbase = np.array([lam + alpha, 1.0])
    fcoef = np.zeros((2, nx))
    fcoef[0, 0] = -alpha
    return AffineModel(slow, fast, base, coef, fbase, fcoef, name=f"retrial(lam={lam},alpha={alpha},K={K})")


def toy_model(
    up=(0.05, 0.05),
    up_gain=(0.6, 1.4),
    down=(0.9, 0.9),
    env_on=1.0,
    env_on_gain=0.0,
    env_off=1.0,
):
    """Two slow states ``{0, 1}`` and two environment states ``{0, 1}``.

    ``lambda_{0,1}(xi, y) = up[y] + up_gain[y] * xi(1)`` and
    ``lambda_{1,0}(xi, y) = down[y]``; the environment switches ``0 -> 1`` at
    rate ``env_on + env_on_gain * xi(1)`` and back at rate ``env_off``.
    """
    slow = DirectedGraph([0, 1], [(0, 1), (1, 0)])
    fast = DirectedGraph([0, 1], [(0, 1), (1, 0)])
    base = np.array([[up[0], up[1]], [down[0], down[1]]], dtype=float)
    coef = np.zeros((2, 2, 2))
    coef[0, :, 1] = up_gain
    fbase = np.array([env_on, env_off], dtype=float)
    fcoef = np.array([[0.0, env_on_gain], [0.0, 0.0]])
    return AffineModel(slow, fast, base, coef, fbase, fcoef, name="toy")


class _WlanRates:
    """Rate callables for :func:`wlan_model` (kept picklable)."""

    def __init__(self, p, A, K):
        self.p = p
        self.A = A
        self.K = K
        self.C = A.shape[0]
        self.V = [np.nonzero(A[c])[0] for c in range(self.C)]

    def class_load(self, xi):
        x = np.asarray(xi).reshape(self.C, self.K + 1)
        tot = x.sum(axis=1, keepdims=True)
        frac = np.divide(x, tot, out=np.full_like(x, 1.0 / (self.K + 1)), where=tot > 0)
        return frac @ self.p

    def success_factor(self, c, load, y):
        # product over interfering classes of exp(-load) when their whole
        # neighbourhood is idle, else 1
        out = 1.0
        for d in self.V[c]:
            if all(y[dd] == 0 for dd in self.V[d]):
                out *= np.exp(-load[d])
        return out

    def slow(self, edge, xi, y):
        (c, i), (_, j) = edge
        if any(y[d] != 0 for d in self.V[c]):
            return 0.0
        load = self.class_load(xi)
        s = self.success_factor(c, load, y)
        return self.p[i] * (s if j == 0 else 1.0 - s)

    def fast(self, edge, xi):
        y, y2 = edge
        c = next(k for k in range(self.C) if y[k] != y2[k])
        if y[c] != 0:
            return 1.0
        load = self.class_load(xi)[c]
        single = load * np.exp(-load)
        if y2[c] == 1:
            return single
        return 1.0 - np.exp(-load) - single


def wlan_model(p=(1.0, 0.5, 0.25), A=((1,),)):
    """Continuous-time WLAN with ``C`` interfering node classes.

    Parameters
    ----------
    p : sequence of K+1 positive attempt rates, one per back-off state.
    A : C x C 0/1 interference matrix with unit diagonal. A flat sequence of
        ``C * C`` entries (row-major) is also accepted.

    Slow states are pairs ``(c, i)``: class ``c`` node in back-off state ``i``.
    From state ``i`` a node attempts at rate ``p[i]`` when every interfering
    class channel is idle, succeeds (``i -> 0``) with the product of
    ``exp(-load)`` factors and otherwise collides (``i -> i+1``). The
    environment is the vector of class channel states in ``{0, 1, 2}``
    (idle, success, collision); each coordinate leaves idle to success at rate
    ``load * exp(-load)`` and to collision at rate ``1 - (1 + load) exp(-load)``
    and returns to idle at unit rate.
    """
    p = np.asarray(p, dtype=float)
    A = np.atleast_1d(np.asarray(A))
    if A.ndim == 1:
        C = int(round(np.sqrt(A.size)))
        if C * C != A.size:
            raise ValueError("flat interference matrix must have a square number of entries")
        A = A.reshape(C, C)
    if p.ndim != 1 or p.size < 2:
        raise ValueError("need at least two back-off states")
    if np.any(p <= 0):
        raise ValueError("attempt rates must be strictly positive")
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("interference matrix must be square")
    if not np.all(np.diag(A) == 1) or not np.all(np.isin(A, (0, 1))):
        raise ValueError("interference matrix must be 0/1 with unit diagonal")
    K = p.size - 1
    C = A.shape[0]
    rates = _WlanRates(p, A.astype(int), K)
    xs = [(c, i) for c in range(C) for i in range(K + 1)]
    sedges = []
    for c in range(C):
        sedges += [((c, i), (c, 0)) for i in range(1, K + 1)]
        sedges += [((c, i), (c, i + 1)) for i in range(K)]
    ys = list(itertools.product(range(3), repeat=C))
    fedges = []
    for y in ys:
        for c in range(C):
            targets = (1, 2) if y[c] == 0 else (0,)
            for t in targets:
                y2 = y[:c] + (t,) + y[c + 1 :]
                fedges.append((y, y2))
    return ModelSpec(
        DirectedGraph(xs, sedges),
        DirectedGraph(ys, fedges),
        rates.slow,
        rates.fast,
        name=f"wlan(C={C},K={K})",
    )


# ---------------------------------------------------------------------------
# configuration files

_EDGE_SCHEMA = {
    "type": "object",
    "required": ["from", "to"],
    "properties": {
        "from": {},
        "to": {},
        "base": {"type": "number", "minimum": 0},
        "coeffs": {"type": "object", "additionalProperties": {"type": "number"}},
        "env_mask": {"type": "array"},
    },
    "additionalProperties": False,
}

_GRAPH_SCHEMA = {
    "type": "object",
    "required": ["states", "edges"],
    "properties": {
        "states": {"type": "array", "minItems": 1},
        "edges": {"type": "array", "items": _EDGE_SCHEMA},
    },
}

MODEL_SCHEMA = {
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "builtin": {"enum": ["retrial", "wlan", "toy", None]},
        "params": {"type": "object"},
        "slow": _GRAPH_SCHEMA,
        "fast": _GRAPH_SCHEMA,
    },
    "anyOf": [
        {"required": ["builtin"], "properties": {"builtin": {"enum": ["retrial", "wlan", "toy"]}}},
        {"required": ["slow", "fast"]},
    ],
}


def _label(v):
    # JSON has no tuples; lists become tuples so they can be vertex labels
    return tuple(_label(u) for u in v) if isinstance(v, list) else v


def _coeff_vector(coeffs, graph, where):
    vec = np.zeros(graph.n)
    lookup = {str(v): i for i, v in enumerate(graph.vertices)}
    for key, val in (coeffs or {}).items():
        if key not in lookup:
            raise ModelConfigError(f"{where}: coefficient for unknown state {key!r}")
        vec[lookup[key]] = val
    return vec


def model_from_config(cfg):
    """Build a model from an already-parsed configuration dictionary."""
    try:
        jsonschema.validate(cfg, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ModelConfigError(f"schema violation at {where}: {exc.message}") from None
    builtin = cfg.get("builtin")
    params = cfg.get("params", {}) or {}
    try:
        if builtin == "retrial":
            return retrial_model(**params)
        if builtin == "wlan":
            return wlan_model(**params)
        if builtin == "toy":
            return toy_model(**params)
    except (TypeError, ValueError) as exc:
        raise ModelConfigError(f"bad parameters for builtin {builtin!r}: {exc}") from None

    slow_states = [_label(s) for s in cfg["slow"]["states"]]
    fast_states = [_label(s) for s in cfg["fast"]["states"]]
    try:
        slow = DirectedGraph(slow_states, [(_label(e["from"]), _label(e["to"])) for e in cfg["slow"]["edges"]])
        fast = DirectedGraph(fast_states, [(_label(e["from"]), _label(e["to"])) for e in cfg["fast"]["edges"]])
    except ValueError as exc:
        raise ModelConfigError(str(exc)) from None

    base = np.zeros((slow.n_edges, fast.n))
    coef = np.zeros((slow.n_edges, fast.n, slow.n))
    for e, entry in enumerate(cfg["slow"]["edges"]):
        where = f"slow/edges/{e}"
        c = _coeff_vector(entry.get("coeffs"), slow, where)
        mask = entry.get("env_mask")
        ys = range(fast.n) if mask is None else []
        if mask is not None:
            try:
                ys = [fast.index[_label(y)] for y in mask]
            except KeyError as exc:
                raise ModelConfigError(f"{where}: unknown environment state {exc}") from None
        b = entry.get("base", 0.0)
        if b + c.min() < 0:
            raise ModelConfigError(f"{where}: rate is negative at a simplex vertex")
        for j in ys:
            base[e, j] = b
            coef[e, j] = c
    fbase = np.zeros(fast.n_edges)
    fcoef = np.zeros((fast.n_edges, slow.n))
    for e, entry in enumerate(cfg["fast"]["edges"]):
        where = f"fast/edges/{e}"
        c = _coeff_vector(entry.get("coeffs"), slow, where)
        b = entry.get("base", 0.0)
        if b + c.min() < 0:
            raise ModelConfigError(f"{where}: rate is negative at a simplex vertex")
        fbase[e] = b
        fcoef[e] = c
    return AffineModel(slow, fast, base, coef, fbase, fcoef, name=cfg.get("name", "table"))


def load_model(path):
    """Read a JSON model configuration file.

    Raises
    ------
    ModelConfigError
        On JSON syntax errors (with line and column), schema violations and
        unknown builtin names.
    """
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return model_from_config(cfg)
