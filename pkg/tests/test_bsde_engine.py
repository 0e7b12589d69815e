from __future__ import annotations

import math

import numpy as np
import pytest

from bsde_lab import presets
from bsde_lab.bsde_engine import (PicardDivergenceError, SingularRegressionError, SolverConfig,
                                  check_bound_global, check_bound_small_horizon, oracle_cole_hopf,
                                  oracle_linear, read_solution_arrays, small_horizon_sweep,
                                  solve_bsde, write_solution)
from bsde_lab.core import TimeGrid
from bsde_lab.presets import Terminal
from bsde_lab.sde_engine import PathBundle, euler_maruyama, hitting_time, simulate_brownian


def bundle(n=5_000, steps=32, horizon=1.0, d=1, seed=1, t0=0.0):
    return simulate_brownian(TimeGrid(t0, t0 + horizon, steps), n, d, seed)


def test_zero_driver_constant_terminal():
    sol = solve_bsde(presets.zero(), np.full(2_000, 2.5), bundle(2_000),
                     cfg=SolverConfig(degree=0))
    assert np.max(np.abs(sol.Y - 2.5)) < 1e-10
    assert np.max(np.abs(sol.Z)) < 1e-10


def test_linear_driver_matches_implicit_euler_exactly():
    # constant terminal: the scheme is deterministic, Y_0 = c (1 + beta dt)^(-N)
    for steps in (16, 64):
        sol = solve_bsde(presets.linear_y(1.0), np.ones(1_000), bundle(1_000, steps))
        assert sol.y0 == pytest.approx((1 + 1.0 / steps) ** -steps, rel=1e-12)


def test_linear_driver_error_decreases_with_dt():
    errs = []
    for steps in (8, 16, 32, 64, 128):
        sol = solve_bsde(presets.linear_y(1.0), np.ones(500), bundle(500, steps))
        errs.append(abs(sol.y0 - oracle_linear(1.0, 1.0, 1.0)))
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 5e-3


def test_explicit_scheme_also_converges():
    sol = solve_bsde(presets.linear_y(1.0), np.ones(500), bundle(500, 128),
                     cfg=SolverConfig(scheme="explicit"))
    assert sol.y0 == pytest.approx((1 - 1 / 128) ** 128, rel=1e-12)
    assert abs(sol.y0 - math.exp(-1)) < 5e-3


def test_cole_hopf_gaussian_terminal():
    b = bundle(20_000, 32, seed=8)
    term = Terminal("brownian_linear", {"z0": 0.5})
    sol = solve_bsde(presets.pure_quadratic(1.0), term, b)
    est, se = sol.y0_estimate()
    ref, ref_se = oracle_cole_hopf(1.0, sol.terminal)
    assert abs(est - ref) < 3 * math.hypot(se, ref_se)
    assert abs(est - 0.125) < 3 * se + 2e-3       # exact value (gamma/2) z0^2 T
    assert sol.diagnostics.clipped_fraction < 1e-3


def test_terminal_consistency_with_stopping():
    g = TimeGrid(0.0, 1.0, 32)
    b = euler_maruyama(presets.brownian(1), 0.0, 0.0, g, simulate_brownian(g, 3_000, 1, seed=2))
    stop = hitting_time(b.state, 0.0, 0.8, g)
    assert 0 < stop.hit_fraction < 1
    term = Terminal("state_linear", {"y": 0.2, "q": 1.0, "x": 0.0})
    sol = solve_bsde(presets.mixed(), term, b, stop)
    rows = np.arange(b.n_paths)
    assert np.array_equal(sol.Y[rows, stop.tau_index], sol.terminal)
    for p in np.nonzero(stop.hit)[0][:50]:
        k = stop.tau_index[p]
        assert np.all(sol.Y[p, k:] == sol.terminal[p])
        assert np.all(sol.Z[p, k:] == 0)
    assert np.all(np.isfinite(sol.Y)) and np.all(np.isfinite(sol.Z))


def test_forward_comparison_on_shared_paths():
    b = bundle(4_000, 32, seed=3)
    term = Terminal("brownian_linear", {"z0": 0.7, "clip": [-1.0, 1.0]})
    base = presets.mixed()
    hi = presets.shifted(base, 0.3)
    y_hi = solve_bsde(hi, term, b).y0
    y_lo = solve_bsde(base, term, b).y0
    assert y_hi >= y_lo - 1e-9
    # the damping term absorbs part of the shift, never more than all of it
    assert 0.1 < y_hi - y_lo <= 0.3 + 1e-9


def test_picard_residual_contracts():
    sol = solve_bsde(presets.mixed(), Terminal("brownian_linear", {"z0": 0.5}), bundle(2_000, 16))
    h = sol.diagnostics.picard_history
    assert len(h) >= 3
    assert all(b <= a for a, b in zip(h[1:], h[2:]))
    assert sol.diagnostics.picard_residual < 1e-11


def test_picard_divergence_is_reported():
    with pytest.raises(PicardDivergenceError) as info:
        solve_bsde(presets.linear_y(200.0), np.ones(200), bundle(200, 16))
    assert len(info.value.history) > 1
    assert info.value.history[-1] > info.value.history[0]


def test_singular_regression_is_reported():
    b = bundle(500, 8, d=1)
    twin = PathBundle(b.grid, np.concatenate([b.brownian, b.brownian], axis=2), b.seed)
    with pytest.raises(SingularRegressionError) as info:
        solve_bsde(presets.zero(dim_z=2), np.ones(500), twin)
    assert info.value.condition > 1e10


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        solve_bsde(presets.zero(dim_z=2), np.ones(100), bundle(100, 4))


def test_oracle_linear_examples():
    assert oracle_linear(0.0, 5.0, 1.0) == 5.0
    assert oracle_linear(1.0, 1.0, 0.0) == 1.0
    assert oracle_linear(2.0, 3.0, 0.5) == pytest.approx(3 * math.exp(-1))
    with pytest.raises(ValueError):
        oracle_linear(1.0, 1.0, -0.1)


def test_oracle_cole_hopf_examples():
    est, se = oracle_cole_hopf(2.0, np.full(100, 1.7))
    assert est == pytest.approx(1.7) and se == 0.0
    eps, z0, gamma = 0.3, 1.5, 0.8
    dB = math.sqrt(eps) * np.random.default_rng(4).standard_normal(200_000)
    est, se = oracle_cole_hopf(gamma, z0 * dB)
    assert abs(est - 0.5 * gamma * z0 ** 2 * eps) < 3 * se
    xi = np.random.default_rng(5).uniform(-1, 2, 1000)
    est, _ = oracle_cole_hopf(1e-4, xi)
    assert est == pytest.approx(xi.mean(), abs=1e-3)


def test_oracle_cole_hopf_is_overflow_safe():
    est, se = oracle_cole_hopf(1.0, np.array([1000.0, 1000.0, 999.0]))
    assert math.isfinite(est) and 999 < est < 1000.01


def test_oracle_cole_hopf_groups():
    xi = np.array([0.0, 0.0, 1.0, 1.0])
    est, se = oracle_cole_hopf(1.0, xi, groups=[0, 0, 1, 1])
    assert est.tolist() == pytest.approx([0.0, 1.0])


def test_global_bound_equality_case():
    sol = solve_bsde(presets.zero(), np.full(1_000, 1.5), bundle(1_000, 8))
    rep = check_bound_global(sol, presets.zero())
    assert rep.passed and rep.bound == 1.5 and abs(rep.observed - 1.5) < 1e-6
    assert rep.label == "empirical essential sup"


def test_global_bound_linear_margin():
    gen = presets.linear_y(1.0)
    sol = solve_bsde(gen, np.ones(500), bundle(500, 64))
    rep = check_bound_global(sol, gen)
    assert rep.passed and rep.bound == pytest.approx(math.e)
    assert rep.observed == 1.0   # sup |Y| is attained at the terminal time


def test_global_bound_cole_hopf_bounded_terminal():
    gen = presets.pure_quadratic(1.0)
    sol = solve_bsde(gen, Terminal("brownian_linear", {"z0": 1.0, "clip": [-1.0, 1.0]}),
                     bundle(10_000, 32), cfg=SolverConfig(basis="piecewise"))
    rep = check_bound_global(sol, gen)
    assert rep.passed and rep.bound == 1.0


def test_global_bound_not_applicable_without_integral_bound():
    gen = presets.zero()
    unbounded = presets.GeneratorSpec(gen.g, 0.0, 1.0, gen.phi,
                                      presets.AlphaProcess("path", func=lambda t, om: om[:, 0] ** 2))
    sol = solve_bsde(unbounded, np.ones(100), bundle(100, 4))
    rep = check_bound_global(sol, unbounded)
    assert not rep.applicable and not rep.passed


def test_small_horizon_equality_case():
    c, eps = 0.8, 0.1
    gen = presets.constant(c)
    sol = solve_bsde(gen, np.zeros(1_000), bundle(1_000, 16, horizon=eps))
    assert np.allclose(sol.Y[0], c * (eps - sol.grid.points), atol=1e-12)
    for which in ("sup", "integral"):
        rep = check_bound_small_horizon(sol, gen, which=which)
        assert rep.passed and abs(rep.observed - rep.bound) < 1e-6


def test_small_horizon_zero_driver():
    sol = solve_bsde(presets.zero(), np.zeros(100), bundle(100, 8, horizon=0.2))
    rep = check_bound_small_horizon(sol, presets.zero())
    assert rep.passed and rep.observed == 0.0


def test_small_horizon_requires_zero_terminal():
    sol = solve_bsde(presets.zero(), np.ones(100), bundle(100, 8, horizon=0.2))
    with pytest.raises(ValueError):
        check_bound_small_horizon(sol, presets.zero())


def test_small_horizon_sweep_shrinks():
    gen = presets.mixed()
    sweep = small_horizon_sweep(gen, [0.2, 0.1, 0.05],
                                lambda e: simulate_brownian(TimeGrid(0.0, e, 32), 4_000, 1, 6))
    assert sweep.passed and sweep.decreasing
    obs = [r.observed for r in sweep.reports]
    assert obs[-1] < obs[0]


def test_solution_export_round_trip(tmp_path):
    sol = solve_bsde(presets.pure_quadratic(), Terminal("brownian_linear", {"z0": 1.0}),
                     bundle(50, 4, d=1))
    path = tmp_path / "sol.bin"
    write_solution(path, sol, seed=9)
    grid, Y, Z = read_solution_arrays(path)
    assert grid == sol.grid and np.array_equal(Y, sol.Y) and np.array_equal(Z, sol.Z)
