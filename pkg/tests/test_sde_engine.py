from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsde_lab import presets
from bsde_lab.core import SdeCoefficients, TimeGrid
from bsde_lab.sde_engine import (MAGIC, PathBundle, euler_maruyama, hitting_time, read_bundle,
                                 simulate_brownian, write_bundle)


def prob_sup_abs_below(a: float, horizon: float = 1.0, terms: int = 50) -> float:
    """P(sup_{s<=T} |B_s| < a) from the alternating series for the two-sided exit."""
    k = np.arange(terms)
    return float(4 / math.pi * np.sum((-1.0) ** k / (2 * k + 1)
                                      * np.exp(-(2 * k + 1) ** 2 * math.pi ** 2 * horizon
                                               / (8 * a * a))))


def test_zero_step_grid_is_constant():
    b = simulate_brownian(TimeGrid(0.0, 0.0, 0), 5, 2, seed=3)
    assert b.brownian.shape == (5, 1, 2)
    assert np.all(b.brownian == 0)


def test_simulation_is_deterministic():
    g = TimeGrid(0.0, 1.0, 16)
    a = simulate_brownian(g, 100, 2, seed=42)
    b = simulate_brownian(g, 100, 2, seed=42)
    assert np.array_equal(a.brownian, b.brownian)
    assert not np.array_equal(a.brownian, simulate_brownian(g, 100, 2, seed=43).brownian)


def test_simulation_partition_invariant():
    g = TimeGrid(0.0, 1.0, 8)
    whole = simulate_brownian(g, 30, 1, seed=9).brownian
    first = simulate_brownian(g, 11, 1, seed=9).brownian
    rest = simulate_brownian(g, 19, 1, seed=9, path_offset=11).brownian
    assert np.array_equal(whole, np.concatenate([first, rest]))


def test_simulation_start_value():
    b = simulate_brownian(TimeGrid(0.5, 1.0, 4), 10, 2, seed=1, start=[1.0, -2.0])
    assert np.all(b.brownian[:, 0] == [1.0, -2.0])


def test_increment_moments():
    n, dt = 100_000, 0.01
    b = simulate_brownian(TimeGrid(0.0, 10 * dt, 10), n, 1, seed=2024)
    inc = b.increments[:, :, 0]
    for k in range(inc.shape[1]):
        assert abs(inc[:, k].mean()) < 4 * math.sqrt(dt / n)
        assert abs(inc[:, k].var(ddof=1) - dt) < 4 * math.sqrt(2 / n) * dt


def test_invalid_sizes():
    with pytest.raises(ValueError):
        simulate_brownian(TimeGrid(0.0, 1.0, 4), 0, 1, seed=1)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.0, 4)   # zero-length grid


def test_euler_frozen_dynamics():
    g = TimeGrid(0.0, 1.0, 10)
    b = simulate_brownian(g, 20, 1, seed=1)
    x = euler_maruyama(presets.zero_coefficients(), 0.0, 0.7, g, b).state
    assert np.all(x == 0.7)


def test_euler_additive_noise_reproduces_brownian_path():
    g = TimeGrid(0.0, 1.0, 32)
    b = simulate_brownian(g, 50, 1, seed=5)
    x = euler_maruyama(presets.brownian(1), 0.0, 0.0, g, b).state
    assert np.allclose(x, b.brownian, rtol=0, atol=1e-14)


def test_euler_zero_noise_matches_deterministic_recursion():
    co = SdeCoefficients(lambda t, x: np.sin(x) + t, lambda t, x: np.zeros((x.shape[0], 1, 1)),
                         mu=1.0, nu=3.0)
    g = TimeGrid(0.0, 2.0, 25)
    x = euler_maruyama(co, 0.0, 0.3, g, simulate_brownian(g, 3, 1, seed=0)).state
    ref = [0.3]
    for t in g.points[:-1]:
        ref.append(ref[-1] + (math.sin(ref[-1]) + t) * g.dt)
    assert np.array_equal(x[0, :, 0], np.array(ref))


def test_euler_dimension_mismatch():
    g = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        euler_maruyama(presets.brownian(2), 0.0, [0.0, 0.0], g, simulate_brownian(g, 3, 1, seed=0))
    bad = SdeCoefficients(lambda t, x: x, lambda t, x: np.zeros((x.shape[0], 2, 2)), mu=1, nu=1)
    with pytest.raises(ValueError):
        euler_maruyama(bad, 0.0, 0.0, g, simulate_brownian(g, 3, 1, seed=0))


def test_euler_strong_order_on_geometric_dynamics():
    theta, eta, n = 0.1, 0.5, 4000
    fine = TimeGrid(0.0, 1.0, 2 ** 8)
    b = simulate_brownian(fine, n, 1, seed=77)
    exact = np.exp((theta - 0.5 * eta ** 2) + eta * b.brownian[:, -1, 0])
    co = presets.geometric(theta, eta)
    errors, dts = [], []
    for k in range(4, 9):
        stride = 2 ** (8 - k)
        g = TimeGrid(0.0, 1.0, 2 ** k)
        coarse = PathBundle(grid=g, brownian=b.brownian[:, ::stride], seed=b.seed)
        x = euler_maruyama(co, 0.0, 1.0, g, coarse).state[:, -1, 0]
        errors.append(np.mean(np.abs(x - exact)))
        dts.append(g.dt)
    assert all(e2 < e1 for e1, e2 in zip(errors, errors[1:]))
    rate = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    assert 0.35 < rate < 0.75


def test_hitting_time_never_hit():
    g = TimeGrid(0.0, 1.0, 16)
    b = euler_maruyama(presets.brownian(1), 0.0, 0.0, g, simulate_brownian(g, 200, 1, seed=4))
    s = hitting_time(b.state, 0.0, 1e9, g)
    assert np.all(s.tau_index == 16) and np.allclose(s.tau_value, 1.0)
    assert s.hit_fraction == 0.0


def test_hitting_time_hand_built_crossing():
    g = TimeGrid(0.0, 1.0, 10)
    path = np.linspace(0.0, 1.0, 11)[None, :, None]       # |X| = k/10
    s = hitting_time(path, 0.0, 0.65, g)
    assert s.tau_index[0] == 7
    assert s.tau_value[0] == pytest.approx(0.7)


def test_hitting_time_precondition():
    g = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(ValueError):
        hitting_time(np.zeros((1, 5, 1)), 2.0, 2.0, g)


def test_hitting_time_horizon_cap():
    g = TimeGrid(0.0, 1.0, 10)
    path = np.linspace(0.0, 1.0, 11)[None, :, None]
    s = hitting_time(path, 0.0, 0.65, g, horizon=0.5)
    assert s.tau_index[0] == 5 and s.tau_value[0] == pytest.approx(0.5) and not s.hit[0]


def test_exit_probability_matches_reflection_series():
    n, steps = 20_000, 256
    g = TimeGrid(0.0, 1.0, steps)
    b = euler_maruyama(presets.brownian(1), 0.0, 0.0, g, simulate_brownian(g, n, 1, seed=31))
    s = hitting_time(b.state, 0.0, 1.0, g)
    p_hat = s.hit_fraction
    se = math.sqrt(p_hat * (1 - p_hat) / n)
    # discrete monitoring behaves like a continuous barrier shifted by 0.5826 sqrt(dt)
    shifted = 1.0 + 0.5826 * math.sqrt(g.dt)
    p_ref = 1.0 - prob_sup_abs_below(shifted)
    assert abs(p_hat - p_ref) < 3 * se + 2e-3
    assert p_hat < 1.0 - prob_sup_abs_below(1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32), c0=st.floats(0.2, 3.0), steps=st.integers(1, 40),
       x0=st.floats(-0.1, 0.1))
def test_stopping_time_invariants(seed, c0, steps, x0):
    g = TimeGrid(0.0, 0.5, steps)
    b = euler_maruyama(presets.brownian(1), 0.0, x0, g, simulate_brownian(g, 64, 1, seed=seed))
    s = hitting_time(b.state, x0, c0, g)
    norms = np.abs(b.state[:, :, 0])
    assert np.all(s.tau_value > 0)
    for p in range(64):
        k = s.tau_index[p]
        assert np.all(norms[p, :k] <= c0)
        assert k == steps or norms[p, k] > c0
        assert s.hit[p] == (norms[p, k] > c0)


def test_binary_round_trip(tmp_path):
    g = TimeGrid(0.0, 1.0, 6)
    b = euler_maruyama(presets.brownian(2), 0.0, [0.0, 1.0], g,
                       simulate_brownian(g, 9, 2, seed=12345))
    path = tmp_path / "paths.bin"
    write_bundle(path, b)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    version, kind, n_paths, n_steps = struct.unpack_from("<IIQQ", raw, 8)
    assert (version, kind, n_paths, n_steps) == (1, 0, 9, 6)
    back = read_bundle(path)
    assert back.grid == g and back.seed == 12345
    assert np.array_equal(back.brownian, b.brownian) and np.array_equal(back.state, b.state)
