import json

import numpy as np
import pytest

from twoscale.model import (
    DirectedGraph,
    ModelConfigError,
    load_model,
    model_from_config,
    retrial_model,
    simplex_samples,
    toy_model,
    validate,
    wlan_model,
)


def test_graph_basics():
    g = DirectedGraph(["a", "b", "c"], [("a", "b"), ("b", "c"), ("c", "a")])
    assert g.n == 3 and g.n_edges == 3
    assert g.is_strongly_connected()
    B = g.incidence()
    assert np.allclose(B.sum(axis=0), 0)
    assert not DirectedGraph([0, 1], [(0, 1)]).is_strongly_connected()


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        DirectedGraph([0, 1], [(0, 2)])
    with pytest.raises(ValueError):
        DirectedGraph([0, 1], [(0, 0)])


def test_retrial_tables():
    m = retrial_model(lam=1.0, alpha=2.0, K=3)
    xi = np.array([0.4, 0.3, 0.2, 0.1])
    table = m.slow_table(xi)
    ups = [e for e, (a, b) in enumerate(m.slow_graph.edges) if b == a + 1]
    downs = [e for e, (a, b) in enumerate(m.slow_graph.edges) if b == a - 1]
    assert np.allclose(table[ups], [[0.0, 1.0]] * 3)
    assert np.allclose(table[downs], [[2.0, 0.0]] * 3)
    # idle -> busy at lam + alpha (1 - xi(0)), busy -> idle at 1
    assert np.allclose(m.fast_vector(xi), [1.0 + 2.0 * 0.6, 1.0])


def test_scalar_and_table_rates_agree():
    m = retrial_model()
    xi = np.array([0.1, 0.2, 0.3, 0.4])
    for e, edge in enumerate(m.slow_graph.edges):
        for j, y in enumerate(m.fast_graph.vertices):
            assert m.slow_rate(edge, xi, y) == pytest.approx(m.slow_table(xi)[e, j])


def test_validate_retrial_passes():
    rep = validate(retrial_model())
    assert rep.passes()
    assert rep.min_slow_rate > 0
    assert rep.min_slow_rate_strict == 0.0  # raw rates vanish in one environment state
    assert rep.sample_count == 256


def test_validate_one_way_graph_fails():
    cfg = {
        "slow": {"states": [0, 1], "edges": [{"from": 0, "to": 1, "base": 1.0}]},
        "fast": {"states": ["a"], "edges": []},
    }
    rep = validate(model_from_config(cfg))
    assert not rep.slow_irreducible
    assert not rep.passes()


def test_validate_needs_samples():
    with pytest.raises(ValueError):
        validate(retrial_model(), samples=10)


def test_simplex_samples():
    pts = simplex_samples(3, 150, 0)
    assert pts.shape == (150, 3)
    assert np.allclose(pts[:3], np.eye(3))
    assert np.allclose(pts.sum(axis=1), 1) and pts.min() >= 0
    assert np.array_equal(pts, simplex_samples(3, 150, 0))


def test_toy_and_wlan_build():
    t = toy_model()
    assert t.nx == 2 and t.ny == 2 and validate(t).passes()
    w = wlan_model([1.0, 0.5], [[1]])
    assert w.nx == 2 and w.ny == 3
    assert validate(w).passes()
    w2 = wlan_model([1.0, 0.5, 0.25], [1, 1, 0, 1])
    assert w2.ny == 9
    with pytest.raises(ValueError):
        wlan_model([1.0], [[1]])


def test_wlan_fast_rates():
    w = wlan_model([1.0, 0.5], [[1]])
    xi = np.array([0.5, 0.5])
    load = 0.75
    rates = dict(zip(w.fast_graph.edges, w.fast_vector(xi)))
    assert rates[((0,), (1,))] == pytest.approx(load * np.exp(-load))
    assert rates[((0,), (2,))] == pytest.approx(1 - (1 + load) * np.exp(-load))
    assert rates[((1,), (0,))] == 1.0


CONFIG = {
    "name": "custom",
    "slow": {
        "states": ["s", "i"],
        "edges": [
            {"from": "s", "to": "i", "base": 0.1, "coeffs": {"i": 2.0}, "env_mask": ["on"]},
            {"from": "i", "to": "s", "base": 1.0},
        ],
    },
    "fast": {
        "states": ["off", "on"],
        "edges": [{"from": "off", "to": "on", "base": 1.0}, {"from": "on", "to": "off", "base": 2.0, "coeffs": {"i": 1.0}}],
    },
}


def test_load_model_roundtrip(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps(CONFIG))
    m = load_model(p)
    xi = np.array([0.5, 0.5])
    assert np.allclose(m.slow_table(xi), [[0.0, 1.1], [1.0, 1.0]])
    assert np.allclose(m.fast_vector(xi), [1.0, 2.5])


def test_load_model_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"slow": [1,\n 2')
    with pytest.raises(ModelConfigError, match="line 2"):
        load_model(p)
    with pytest.raises(ModelConfigError, match="schema"):
        model_from_config({"slow": {"states": [0]}})
    bad = json.loads(json.dumps(CONFIG))
    bad["slow"]["edges"][1]["coeffs"] = {"i": -5.0}
    with pytest.raises(ModelConfigError, match="negative"):
        model_from_config(bad)
    with pytest.raises(ModelConfigError):
        model_from_config({"builtin": "retrial", "params": {"K": 0}})


def test_builtin_config():
    m = model_from_config({"builtin": "retrial", "params": {"K": 2}})
    assert m.nx == 3
