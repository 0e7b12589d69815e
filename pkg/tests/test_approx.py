from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsde_lab import presets
from bsde_lab.approx import (InfConvSpec, InfConvSpecError, LocalizationContext, ProbeSet,
                             RefinementError, approx_sequence_check, generator_localization,
                             inf_convolution, lattice_minimize, localization_constant_M,
                             make_infconv_spec)
from bsde_lab.core import ConvexModulus
from bsde_lab.presets import UnknownPresetError


def test_lattice_minimize_off_lattice_quadratic():
    c = np.array([0.123456789])
    val, arg = lattice_minimize(lambda u: np.sum((u - c) ** 2, axis=1) + 1.0, [0.0], 1.0, 0.1)
    assert val == pytest.approx(1.0, abs=1e-10)
    assert arg[0] == pytest.approx(c[0], abs=1e-4)


def test_lattice_minimize_kink_plus_smooth_axis():
    def F(u):
        return np.abs(u[:, 0]) + (u[:, 1] - 0.3141) ** 2
    val, arg = lattice_minimize(F, [0.0, 0.0], 1.0, 1 / 30)
    assert val == pytest.approx(0.0, abs=1e-9)


def test_lattice_minimize_per_axis_radius():
    val, arg = lattice_minimize(lambda u: np.sum((u - [0.0, 3.0]) ** 2, axis=1),
                                [0.0, 0.0], [0.1, 4.0], 0.05)
    assert val == pytest.approx(0.0, abs=1e-9)


def test_refinement_error_carries_history():
    with pytest.raises(RefinementError) as info:
        lattice_minimize(lambda u: np.sum(u * u, axis=1), [0.3], 1.0, 0.1, max_rounds=1)
    assert len(info.value.history) == 1


def test_square_closed_form():
    # inf_u u^2 + 2n (u - x)^2 = 2n x^2 / (2n + 1)
    spec = make_infconv_spec("square")
    for n in (1, 2, 8, 64):
        for x in (-1.7, 0.0, 0.4, 2.0):
            assert inf_convolution(spec, n, x) == pytest.approx(2 * n * x * x / (2 * n + 1),
                                                                abs=1e-8)


def test_square_two_dimensional():
    spec = make_infconv_spec("square", dim=2)
    x = np.array([0.6, -0.8])
    assert inf_convolution(spec, 3, x) == pytest.approx(6 / 7, abs=1e-8)


def test_abs_is_its_own_approximant():
    # the penalty n|u - x| dominates the Lipschitz constant 1 of |u|
    spec = make_infconv_spec("abs")
    for n in (1, 5, 40):
        for x in (-2.0, 0.0, 0.37):
            assert inf_convolution(spec, n, x) == pytest.approx(abs(x), abs=1e-8)


def test_constant_function():
    spec = make_infconv_spec("constant", c=-0.75)
    assert inf_convolution(spec, 7, 1.3) == pytest.approx(-0.75, abs=1e-12)


def test_spacing_refinement_consistency():
    base = dict(f=lambda u: np.sin(3 * u[:, 0]) + 0.5 * u[:, 0] ** 2, a=1.0, K=1.0,
                phi=ConvexModulus.power(2.0))
    coarse = InfConvSpec(**base, search_spacing=0.05)
    fine = InfConvSpec(**base, search_spacing=0.025)
    for n in (1, 4, 16):
        assert abs(inf_convolution(coarse, n, 0.2) - inf_convolution(fine, n, 0.2)) < 1e-6


def test_growth_violation_raises():
    spec = InfConvSpec(lambda u: u[:, 0] ** 4, 0.0, 1.0, ConvexModulus.power(2.0))
    with pytest.raises(InfConvSpecError):
        inf_convolution(spec, 1, 0.0)


def test_invalid_inputs():
    spec = make_infconv_spec("square")
    with pytest.raises(ValueError):
        inf_convolution(spec, 0, 1.0)
    with pytest.raises(ValueError):
        inf_convolution(spec, 1, [1.0, 2.0])
    with pytest.raises(ValueError):
        InfConvSpec(lambda u: u[:, 0], -1.0, 1.0, ConvexModulus.power(2.0))
    with pytest.raises(UnknownPresetError):
        make_infconv_spec("cosine")


def test_sequence_check_square():
    rep = approx_sequence_check(make_infconv_spec("square"), [-1.0, 0.5, 1.0], [1, 2, 4, 8])
    assert rep.passed and rep.verdict == "pass"
    for r in rep.rows:
        assert r["gap"] == pytest.approx(r["x"] ** 2 / (2 * r["n"] + 1), abs=1e-8)
        assert abs(r["f_n"]) <= r["bound"] + 1e-8
    assert rep.final_gap == pytest.approx(1 / 17, abs=1e-8)


def test_sequence_check_rejects_unordered_schedule():
    with pytest.raises(ValueError):
        approx_sequence_check(make_infconv_spec("square"), [0.0], [4, 2])


def test_sequence_check_reports_first_witness(monkeypatch):
    fake = {1: 0.5, 2: 0.2, 4: 0.9}            # dips at n = 2
    monkeypatch.setattr("bsde_lab.approx.inf_convolution", lambda spec, n, x: fake[n])
    rep = approx_sequence_check(make_infconv_spec("square"), [1.0], [1, 2, 4])
    assert not rep.monotone_ok and rep.verdict == "fail"
    assert rep.witness == {"clause": "monotone", "x": 1.0, "n": 2}


def test_boundary_minimiser_settles():
    # -u^2 on a radius-0.1 search set: the infimum sits on the boundary
    val, arg = lattice_minimize(lambda u: -(u[:, 0] ** 2), [1.0], 0.1, 0.01)
    assert val == pytest.approx(-1.21, abs=1e-12)


# localization --------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(gamma=st.floats(0.01, 10), nu=st.floats(0, 5),
       q=st.lists(st.floats(-3, 3), min_size=1, max_size=3))
def test_lambda_identity(gamma, nu, q):
    ctx = LocalizationContext(y=0.0, x=[0.0] * len(q), q=q, gamma=gamma, nu=nu)
    assert ctx.lam == pytest.approx(gamma * (1 + 2 * sum(v * v for v in q) * nu ** 2))


def test_context_dimension_check():
    with pytest.raises(ValueError):
        LocalizationContext(y=0.0, x=[0.0, 1.0], q=[1.0], gamma=1.0, nu=1.0)


def quadratic_psi(n: int) -> float:
    # g = (1/2)(v + 1)^2 with penalty 2 n lam v^2, lam = 3
    a = 12 * n
    return 1 / (2 * (a - 1)) + 1 / (2 * (a + 1))


def test_pure_quadratic_psi_closed_form():
    gen, co = presets.pure_quadratic(1.0), presets.brownian(1)
    ctx = LocalizationContext.for_problem(gen, co, y=0.0, x=[0.0], q=[1.0])
    assert ctx.lam == 3.0
    rep = generator_localization(gen, ctx, co, [1, 2, 8, 32])
    assert rep.passed
    for r in rep.rows:
        assert r.psi == pytest.approx(quadratic_psi(r.n), abs=1e-8)
        assert r.psi >= 0 and r.violations == 0


def test_mixed_preset_localization():
    gen, co = presets.mixed(), presets.brownian(1)
    ctx = LocalizationContext.for_problem(gen, co, y=0.5, x=[0.0], q=[1.0])
    rep = generator_localization(gen, ctx, co, [1, 4, 16], probes=ProbeSet.cube(2.0, 7))
    assert rep.passed and rep.psi_decreasing
    assert all(r.psi <= r.psi_bound for r in rep.rows)


def test_localization_constant_M():
    ctx = LocalizationContext(y=1.0, x=[0.5], q=[1.0], gamma=1.0, nu=1.0)
    phi = ConvexModulus.power(2.0)
    # lam = 3: lattice part 2 + 2 + 1.5 = 5.5, anchor part 2 + 1 + 0.75 = 3.75
    assert localization_constant_M(ctx, phi) == pytest.approx(2 * 5.5 + 2 * 3.75)


def test_localization_detects_understated_growth():
    # 100 z^2 declared with gamma = 1: the confinement radius misses the true sup,
    # so probes far out violate the inequality
    base = presets.pure_quadratic(1.0)
    loud = presets.GeneratorSpec(lambda t, y, z, om: 100.0 * np.sum(z * z, axis=1), base.beta,
                                 base.gamma, base.phi, base.alpha)
    co = presets.brownian(1)
    ctx = LocalizationContext.for_problem(loud, co, 0.0, [0.0], [1.0])
    rep = generator_localization(loud, ctx, co, [2], probes=ProbeSet.cube(10.0, 5))
    assert not rep.passed and rep.rows[0].violations > 0
    assert rep.rows[0].witness["lhs"] > rep.rows[0].witness["rhs"]


def test_localization_rejects_bad_schedule():
    gen, co = presets.zero(), presets.brownian(1)
    ctx = LocalizationContext.for_problem(gen, co, 0.0, [0.0], [0.0])
    with pytest.raises(ValueError):
        generator_localization(gen, ctx, co, [0, 1])
