import math
from dataclasses import replace

import numpy as np
import pytest

from sepcross.errors import ModelError, UnsupportedRegime
from sepcross.jump import (area_bracket, boundary_predictors, invariant_jump,
                           jump_slow, lgamma, prediction_curve, pseudo_phase,
                           xi3_from_target)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# lgamma
# ---------------------------------------------------------------------------

def test_lgamma_values():
    assert lgamma(1.0) == 0.0
    assert lgamma(0.5) == pytest.approx(0.5723649429247001, abs=1e-12)
    # reflection: Gamma(1/4) Gamma(3/4) = pi / sin(pi/4) = pi sqrt(2)
    assert lgamma(0.25) + lgamma(0.75) == pytest.approx(
        math.log(math.pi * math.sqrt(2.0)), abs=1e-12)
    with pytest.raises(Exception):
        lgamma(0.0)
    with pytest.raises(Exception):
        lgamma(-1.0)


# ---------------------------------------------------------------------------
# pseudo_phase
# ---------------------------------------------------------------------------

def test_pseudo_phase_boundary_invalid(duff_coeffs):
    eps = 1e-3
    pp = pseudo_phase(eps * duff_coeffs.theta[2] / 2.0, eps, duff_coeffs, 2)
    assert pp.xi3 == pytest.approx(0.5)
    if duff_coeffs.first_loop == 2:
        # the window upper edge is theta_23 - k*sqrt(eps) = 0.5 - 0.0949
        assert not pp.valid


def test_pseudo_phase_arithmetic(duff_coeffs):
    eps = 1e-3
    first = duff_coeffs.first_loop
    pp = pseudo_phase(0.25 * eps * duff_coeffs.theta[2], eps, duff_coeffs,
                      first)
    assert pp.xi3 == pytest.approx(0.25, rel=1e-12)
    assert pp.xi_i == pytest.approx(0.5, abs=1e-10)
    assert pp.valid


def test_pseudo_phase_round_trip(duff_coeffs, breath_coeffs):
    for co in (duff_coeffs, breath_coeffs):
        for target in (1, 2):
            for xi in (0.1, 0.5, 0.93):
                xi3 = xi3_from_target(co, target, xi)
                pp = pseudo_phase(1e-3 * co.theta[2] * xi3, 1e-3, co, target)
                assert pp.xi_i == pytest.approx(xi, abs=1e-12)
                assert pp.xi3 == pytest.approx(xi3, rel=1e-12)


def test_pseudo_phase_errors(duff_coeffs):
    with pytest.raises(ModelError):
        pseudo_phase(-1.0, 1e-3, duff_coeffs, 1)
    with pytest.raises(ModelError):
        pseudo_phase(1e-3, 1e-3, duff_coeffs, 3)


# ---------------------------------------------------------------------------
# jump_slow
# ---------------------------------------------------------------------------

def _pp_at(co, target, xi, eps):
    h0 = eps * co.theta[2] * xi3_from_target(co, target, xi)
    return pseudo_phase(h0, eps, co, target)


def test_symmetric_point_value(duff_coeffs):
    eps = 1e-3
    pred = jump_slow(duff_coeffs, _pp_at(duff_coeffs, 2, 0.5, eps), eps,
                     force=True)
    assert pred.dtau == pytest.approx(-eps * duff_coeffs.a * math.log(2.0),
                                      abs=3e-6 * eps)


def test_dz_equals_dtau_for_unit_fzC(duff_coeffs):
    eps = 1e-3
    pred = jump_slow(duff_coeffs, _pp_at(duff_coeffs, 2, 0.3, eps), eps,
                     force=True)
    # f_zC = 1, A = 0 for this model
    assert pred.dz[0] == pytest.approx(pred.dtau, rel=1e-12)


def test_eps_doubling_log_term(duff_coeffs):
    xi = 0.3
    target = 2
    th_i3 = duff_coeffs.theta_ratio(target, 3)
    a = duff_coeffs.a
    for eps in (1e-3, 2.5e-3):
        t1 = jump_slow(duff_coeffs, _pp_at(duff_coeffs, target, xi, eps),
                       eps, force=True).terms
        t2 = jump_slow(duff_coeffs, _pp_at(duff_coeffs, target, xi, 2 * eps),
                       2 * eps, force=True).terms
        expected = (2 * eps) * a * (xi - 0.5) * (1 - 2 * th_i3) * math.log(2.0)
        assert t2["tau_log"] - 2.0 * t1["tau_log"] == pytest.approx(
            expected, rel=1e-9, abs=1e-18)


def test_component_breakdown_sums(breath_coeffs):
    eps = 1e-3
    for target in (1, 2):
        pred = jump_slow(breath_coeffs, _pp_at(breath_coeffs, target, 0.4, eps),
                         eps, force=True)
        total = sum(pred.terms[k] for k in ("tau_log", "tau_gamma", "tau_b",
                                            "tau_d"))
        assert pred.dtau == pytest.approx(total, rel=1e-14, abs=1e-20)
        total_z = sum(pred.terms[k][0] if np.ndim(pred.terms[k]) else
                      pred.terms[k] for k in ("log", "gamma", "b", "A", "d"))
        assert pred.dz[0] == pytest.approx(total_z, rel=1e-12, abs=1e-20)


def test_exchange_symmetry(duff_coeffs):
    # swapping well labels on the symmetric model leaves predictions alone
    eps = 1e-3
    swapped = replace(
        duff_coeffs,
        theta=duff_coeffs.theta[[1, 0, 2]],
        b=duff_coeffs.b[[1, 0, 2]],
        d=duff_coeffs.d[[1, 0, 2]],
        A=duff_coeffs.A[[1, 0, 2]],
        g=duff_coeffs.g[[1, 0, 2]],
        S=duff_coeffs.S[[1, 0, 2]],
        first_loop=1 if duff_coeffs.first_loop == 2 else 2)
    for xi in (0.2, 0.5, 0.8):
        p1 = jump_slow(duff_coeffs, _pp_at(duff_coeffs, 1, xi, eps), eps,
                       force=True)
        p2 = jump_slow(swapped, _pp_at(swapped, 2, xi, eps), eps, force=True)
        assert p1.dtau == pytest.approx(p2.dtau, rel=1e-12, abs=1e-18)


def test_gamma_term_divergence_rate(duff_coeffs):
    # gamma term grows like -eps a ln(xi) as xi -> 0+
    eps = 1e-3
    a = duff_coeffs.a
    xis = np.geomspace(1e-6, 1e-4, 6)
    vals = [jump_slow(duff_coeffs, _pp_at(duff_coeffs, 2, xi, eps), eps,
                      force=True).terms["tau_gamma"] for xi in xis]
    slope = np.polyfit(np.log(xis), vals, 1)[0]
    assert slope == pytest.approx(-eps * a, rel=0.02)


def test_invalid_without_force(duff_coeffs):
    eps = 1e-3
    pp = _pp_at(duff_coeffs, 2, 0.999, eps)
    assert not pp.valid
    with pytest.raises(UnsupportedRegime):
        jump_slow(duff_coeffs, pp, eps)


def test_linearity_in_fzC_and_A(breath_coeffs):
    eps = 1e-3
    pp = _pp_at(breath_coeffs, 1, 0.35, eps)
    base = jump_slow(breath_coeffs, pp, eps, force=True)
    scaled = replace(breath_coeffs, f_zC=3.0 * breath_coeffs.f_zC,
                     A=2.0 * breath_coeffs.A)
    pred = jump_slow(scaled, pp, eps, force=True)
    assert pred.terms["log"][0] == pytest.approx(3.0 * base.terms["log"][0],
                                                 rel=1e-12)
    assert pred.terms["A"][0] == pytest.approx(2.0 * base.terms["A"][0],
                                               rel=1e-12, abs=1e-20)


def test_prediction_curve_512_points(duff_coeffs):
    rows = prediction_curve(duff_coeffs, 1e-3, duff_coeffs.first_loop)
    assert len(rows) == 512
    xis = [r[0] for r in rows]
    assert xis[0] == pytest.approx(0.5 / 512)
    assert any(r[2] for r in rows) and any(not r[2] for r in rows)


# ---------------------------------------------------------------------------
# boundary predictors
# ---------------------------------------------------------------------------

def test_boundary_predictor_energies(duff_coeffs):
    eps = 1e-3
    first = duff_coeffs.first_loop
    h0 = 0.25 * eps * duff_coeffs.theta[2]
    pp = pseudo_phase(h0, eps, duff_coeffs, first)
    bp = boundary_predictors(duff_coeffs, pp, eps, z3_star=[0.0])
    assert bp.h0 == pytest.approx(6.6667e-4, rel=1e-4)
    assert bp.hp0 == pytest.approx(h0 - eps * duff_coeffs.theta[first - 1],
                                   rel=1e-12)
    assert bp.hp0 == pytest.approx(-6.6667e-4, rel=1e-4)
    assert np.all(np.isfinite(bp.z0)) and np.all(np.isfinite(bp.zp0))
    assert np.all(np.isnan(bp.zp0_from_avg))


def test_boundary_predictor_wrong_target(duff_coeffs):
    eps = 1e-3
    other = 1 if duff_coeffs.first_loop == 2 else 2
    pp = _pp_at(duff_coeffs, other, 0.5, eps)
    with pytest.raises(UnsupportedRegime):
        boundary_predictors(duff_coeffs, pp, eps, z3_star=[0.0])


# ---------------------------------------------------------------------------
# invariant jump
# ---------------------------------------------------------------------------

def test_invariant_jump_composition(breath_coeffs):
    eps = 1e-3
    pp = _pp_at(breath_coeffs, 1, 0.4, eps)
    S_star = breath_coeffs.S
    J_minus = S_star[2] / TWO_PI
    total, terms = invariant_jump(breath_coeffs, pp, eps,
                                  "hamiltonian_time", S_star, J_minus,
                                  force=True)
    pred = jump_slow(breath_coeffs, pp, eps, force=True)
    # with 2 pi J_- = S_3(z_*) the reconstruction returns S_i(z_*) exactly
    assert terms["S_i_reconstructed"] == pytest.approx(S_star[0], rel=1e-14)
    assert total == pytest.approx(S_star[0] + breath_coeffs.theta[0] * pred.dtau,
                                  rel=1e-14)


def test_invariant_jump_bracket_term(breath_coeffs):
    eps = 1e-3
    pp = _pp_at(breath_coeffs, 2, 0.3, eps)
    S_star = breath_coeffs.S
    J_minus = 0.95 * S_star[2] / TWO_PI
    t0, _ = invariant_jump(breath_coeffs, pp, eps, "hamiltonian_time",
                           S_star, J_minus, force=True)
    t1, terms = invariant_jump(breath_coeffs, pp, eps, "slow_fast",
                               S_star, J_minus, bracket_i3=0.1, force=True)
    expected = -eps * breath_coeffs.theta_ratio(2, 3) * (pp.xi_i - 0.5) * 0.1
    assert t1 - t0 == pytest.approx(expected, rel=1e-10)
    assert terms["bracket"] == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ModelError):
        invariant_jump(breath_coeffs, pp, eps, "slow_fast", S_star, J_minus,
                       force=True)


def test_invariant_jump_mode_guard(duff_coeffs):
    pp = _pp_at(duff_coeffs, 1, 0.4, 1e-3)
    with pytest.raises(ModelError):
        invariant_jump(duff_coeffs, pp, 1e-3, "generic", duff_coeffs.S, 0.4,
                       force=True)


def test_area_bracket_convention():
    g = np.array([[1.0, 2.0], [0.5, -1.0], [1.5, 1.0]])
    # {S_1, S_3} = S1_x S3_y - S1_y S3_x with columns (y, x)
    assert area_bracket(g, 1) == pytest.approx(2.0 * 1.5 - 1.0 * 1.0)
    assert area_bracket(g, 2) == pytest.approx(-1.0 * 1.5 - 0.5 * 1.0)
