import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twoscale.model import ModelSpec, retrial_model, toy_model, wlan_model
from twoscale.simulator import (
    SimulationPath,
    TiltSpec,
    empirical_path,
    ensemble,
    initial_state,
    occupation,
    path_functionals_UV,
    simulate,
    tilted_model,
    tube_hit,
)

from conftest import two_state


def as_generic(model):
    return ModelSpec(model.slow_graph, model.fast_graph, model.slow_rate, model.fast_rate, name="generic")


def test_initial_state_rounding():
    m = retrial_model()
    s = initial_state(m, 10, [0.33, 0.33, 0.34, 0.0])
    assert s.counts.sum() == 10 and s.N == 10
    assert list(s.counts) == [3, 3, 4, 0]
    assert initial_state(m, 10, [0.25] * 4, env="busy").env == 1


def test_path_invariants():
    m = retrial_model()
    p = simulate(m, 50, initial_state(m, 50, [0.25] * 4), 2.0, 3)
    assert np.all(p.counts.sum(axis=1) == 50)
    assert np.all(np.diff(p.jump_times) > 0)
    assert p.jump_times[-1] <= 2.0
    assert len(p.counts) == p.n_jumps + 1 == len(p.env)
    # every jump moves one particle along an edge or switches the environment
    moved = np.abs(np.diff(p.counts, axis=0)).sum(axis=1)
    switched = np.diff(p.env) != 0
    assert np.all((moved == 2) ^ switched)


def test_same_seed_same_path():
    m = toy_model()
    init = initial_state(m, 100, [0.5, 0.5])
    a = simulate(m, 100, init, 1.0, (4, 2))
    b = simulate(m, 100, init, 1.0, (4, 2))
    c = simulate(m, 100, init, 1.0, (4, 3))
    assert np.array_equal(a.jump_times, b.jump_times) and np.array_equal(a.counts, b.counts)
    assert not np.array_equal(a.jump_times[:5], c.jump_times[:5])


@pytest.mark.parametrize("model", [retrial_model(), toy_model()])
def test_compiled_and_generic_loops_agree(model):
    init = initial_state(model, 40, np.full(model.nx, 1 / model.nx))
    a = simulate(model, 40, init, 1.0, 9)
    b = simulate(as_generic(model), 40, init, 1.0, 9)
    assert np.array_equal(a.counts, b.counts)
    assert np.array_equal(a.env, b.env)
    assert np.allclose(a.jump_times, b.jump_times, rtol=1e-12)


def test_generic_model_simulates():
    w = wlan_model([1.0, 0.5], [[1]])
    p = simulate(w, 30, initial_state(w, 30, [0.5, 0.5]), 0.5, 1)
    assert p.n_jumps > 0 and np.all(p.counts.sum(axis=1) == 30)


def test_absorbing_state_is_held():
    m = two_state(l01=0.0, l10=1.0, g01=0.0, g10=1.0)
    p = simulate(m, 5, initial_state(m, 5, [1.0, 0.0]), 1.0, 0)
    assert p.absorbed and p.n_jumps == 0


def test_empirical_path_is_right_continuous():
    p = SimulationPath(np.array([0.5]), np.array([[2, 0], [1, 1]]), np.array([0, 0]), 2, 1.0)
    grid, mu = empirical_path(p, 0.25)
    assert np.allclose(grid, [0, 0.25, 0.5, 0.75, 1.0])
    assert np.allclose(mu[:, 0], [1, 1, 0.5, 0.5, 0.5])


def test_occupation_exact():
    p = SimulationPath(np.array([0.3, 0.8]), np.array([[1, 0]] * 3), np.array([0, 1, 0]), 1, 1.0)
    occ = occupation(p, 0.5, 2)
    assert np.allclose(occ.mass, [[0, 0], [0.3, 0.2], [0.5, 0.5]])


@given(st.integers(0, 2**31))
@settings(max_examples=20)
def test_occupation_total_mass(seed):
    m = retrial_model()
    p = simulate(m, 20, initial_state(m, 20, [0.25] * 4), 1.0, seed)
    occ = occupation(p, 0.1, 2)
    assert np.allclose(occ.mass.sum(axis=1), occ.grid, atol=1e-12)
    assert np.all(np.diff(occ.mass, axis=0) >= -1e-12)


def test_tilt_gauge_and_factors():
    t = TiltSpec(np.array([1.0, 1.5]), np.array([2.0, 2.0]))
    assert np.allclose(t.alpha, [0, 0.5]) and np.allclose(t.g, [0, 0])
    m = toy_model()
    assert np.allclose(t.slow_factor(m), [np.exp(0.5), np.exp(-0.5)])
    tm = tilted_model(m, t)
    xi = np.array([0.3, 0.7])
    assert np.allclose(tm.slow_table(xi)[0], m.slow_table(xi)[0] * np.exp(0.5))
    with pytest.raises(ValueError):
        TiltSpec(np.array([0.0, np.inf]), np.zeros(2))


def test_functionals_hand_computed():
    m = two_state()
    p = SimulationPath(np.array([0.3]), np.array([[2, 0], [1, 1]]), np.array([0, 0]), 2, 1.0)
    a, b = 0.2, -0.1
    U, V = path_functionals_UV(m, p, TiltSpec(np.array([0.0, a]), np.array([0.0, b])))
    comp = 0.3 * 2 * np.expm1(a) + 0.7 * (np.expm1(a) + np.expm1(-a)) + 2 * np.expm1(b)
    assert U == pytest.approx((a - comp) / 2, rel=1e-13)
    assert V == 0.0
    U0, _ = path_functionals_UV(m, p, TiltSpec(np.array([0.0, a]), np.zeros(2)), compensator="no_tau")
    assert U0 == pytest.approx((a - (0.3 * 2 * a + 0.7 * (a - a))) / 2)


def test_zero_tilt_functionals_vanish():
    m = retrial_model()
    p = simulate(m, 20, initial_state(m, 20, [0.25] * 4), 0.5, 1)
    assert path_functionals_UV(m, p, TiltSpec.zero(m)) == (0.0, 0.0)


def test_environment_potential_difference():
    m = retrial_model()
    p = simulate(m, 20, initial_state(m, 20, [0.25] * 4), 0.5, 5)
    _, V = path_functionals_UV(m, p, TiltSpec(np.zeros(4), np.array([0.0, 0.3])))
    assert V == pytest.approx(0.3 * (p.env[-1] - p.env[0]))


def test_tube_hit_limits():
    m = toy_model()
    init = initial_state(m, 100, [0.9, 0.1])
    grid = np.linspace(0, 1, 11)
    far = np.tile([0.0, 1.0], (11, 1))
    assert tube_hit(m, 100, init, 1.0, 0, grid, far, 2.0)
    assert not tube_hit(m, 100, init, 1.0, 0, grid, far, 0.5)
    with pytest.raises(TypeError):
        tube_hit(as_generic(m), 100, init, 1.0, 0, grid, far, 2.0)


def test_tube_hit_matches_full_path():
    m = toy_model()
    init = initial_state(m, 50, [0.9, 0.1])
    grid = np.linspace(0, 1, 21)
    target = np.tile([0.85, 0.15], (21, 1))
    for seed in range(20):
        p = simulate(m, 50, init, 1.0, seed)
        _, mu = empirical_path(p, 0.05)
        inside = np.abs(mu - target).max() <= 0.1
        assert tube_hit(m, 50, init, 1.0, seed, grid, target, 0.1) == inside


def test_ensemble_reproducible():
    m = toy_model()
    init = initial_state(m, 20, [0.5, 0.5])
    f = lambda p: p.n_jumps  # noqa: E731
    a = ensemble(m, 20, init, 0.5, 30, 1, f)
    b = ensemble(m, 20, init, 0.5, 30, 1, f, threads=3)
    assert np.array_equal(a.values, b.values)
    assert a.ci95[0] < a.mean < a.ci95[1]
