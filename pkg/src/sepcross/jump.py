"""Closed-form predictors for the crossing G3 -> G_i.

Everything here is pure arithmetic on a coefficient bundle: the
pseudo-phase of the crossing, the jump of the slow variables and of the
slow time, the boundary-layer predictors for the last approach /
first departure sections, and the adiabatic-invariant jumps for the
Hamiltonian modes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ModelError, UnsupportedRegime
from .coeffs import SeparatrixCoefficients

TWO_PI = 2.0 * math.pi


def lgamma(x: float) -> float:
    """Natural log of Gamma(x) for x > 0."""
    if x <= 0.0:
        raise ModelError(f"lgamma requires x > 0, got {x}")
    return math.lgamma(x)


@dataclass(frozen=True)
class PseudoPhase:
    xi3: float
    target: int              # 1 or 2
    xi_i: float
    valid: bool
    eps: float
    h0: float
    k: float
    window: tuple            # (lo, hi) bounds on xi3


@dataclass(frozen=True)
class JumpPrediction:
    target: int
    eps: float
    dz: np.ndarray           # jump of the slow variables, (dim_z,)
    dtau: float              # jump of the slow time
    valid: bool
    terms: dict = field(default_factory=dict)


def pseudo_phase(h0: float, eps: float, coeffs: SeparatrixCoefficients,
                 target: int, k: float = 3.0) -> PseudoPhase:
    """Crossing parameter from the energy at the last approach section.

    xi3 = h0 / (eps * Theta3) in (0, 1).  Over one round the flow passes
    the first-rounded well at xi3 offset 0 and the other at offset
    theta_{f3}, so capture into G_i corresponds to xi3 in a sub-window
    of width theta_i3 starting at its offset, and
    xi_i = 1 - (xi3 - offset_i) / theta_i3.  The prediction window keeps
    xi3 at least k*sqrt(eps) away from the sub-window edges.
    """
    if h0 <= 0.0:
        raise ModelError(f"pseudo-phase requires h0 > 0, got {h0}")
    if eps <= 0.0 or coeffs.theta[2] <= 0.0:
        raise ModelError("pseudo-phase requires eps > 0 and Theta3 > 0")
    if target not in (1, 2):
        raise ModelError(f"target domain must be 1 or 2, got {target}")
    xi3 = h0 / (eps * coeffs.theta[2])
    th_i3 = coeffs.theta_ratio(target, 3)
    offset = 0.0 if target == coeffs.first_loop else \
        coeffs.theta_ratio(coeffs.first_loop, 3)
    xi_i = 1.0 - (xi3 - offset) / th_i3
    margin = k * math.sqrt(eps)
    lo = offset + margin
    hi = offset + th_i3 - margin
    valid = lo <= xi3 <= hi
    return PseudoPhase(xi3=xi3, target=target, xi_i=xi_i, valid=valid,
                       eps=eps, h0=h0, k=k, window=(lo, hi))


def xi3_from_target(coeffs: SeparatrixCoefficients, target: int,
                    xi_i: float) -> float:
    """Inverse map: xi3 that yields the given xi_i for capture into G_i."""
    offset = 0.0 if target == coeffs.first_loop else \
        coeffs.theta_ratio(coeffs.first_loop, 3)
    return offset + coeffs.theta_ratio(target, 3) * (1.0 - xi_i)


def _gamma_log_term(xi_i, th_i3):
    """ln[(2 pi)^{3/2} / (Gamma(xi_i) Gamma(th_i3(1-xi_i)) Gamma(1-th_i3 xi_i))]."""
    args = (xi_i, th_i3 * (1.0 - xi_i), 1.0 - th_i3 * xi_i)
    if any(arg <= 0.0 for arg in args):
        raise ModelError(f"Gamma arguments must be positive, got {args}")
    return 1.5 * math.log(TWO_PI) - sum(lgamma(arg) for arg in args)


def jump_slow(coeffs: SeparatrixCoefficients, pp: PseudoPhase, eps: float,
              force: bool = False) -> JumpPrediction:
    """Jump of the slow variables and the slow time across the crossing.

    The slow-time jump is the f_zC = 1, A = 0 specialization and shares
    the term-by-term construction; the component breakdown in ``terms``
    sums to the totals exactly.
    """
    if not pp.valid and not force:
        raise UnsupportedRegime(
            f"pseudo-phase xi3 = {pp.xi3:.6g} outside the window "
            f"{pp.window}; pass force=True to evaluate anyway")
    i = pp.target
    xi = pp.xi_i
    a = coeffs.a
    th = coeffs.theta
    th_i3 = coeffs.theta_ratio(i, 3)
    b_i, b_3 = coeffs.b[i - 1], coeffs.b[2]
    d_i, d_3 = coeffs.d[i - 1], coeffs.d[2]
    A_i, A_3 = coeffs.A[i - 1], coeffs.A[2]
    f_zC = coeffs.f_zC

    log_factor = a * (xi - 0.5) * (math.log(eps * th[i - 1])
                                   - 2.0 * th_i3 * math.log(eps * th[2]))
    gamma_factor = -a * _gamma_log_term(xi, th_i3)
    b_factor = -(xi - 0.5) * (b_i - th_i3 * b_3)
    d_factor = (d_i - th_i3 * d_3) / th[i - 1]

    scalar = log_factor + gamma_factor + b_factor + d_factor
    t_A = -eps * (xi - 0.5) * (A_i - th_i3 * A_3)
    dz = eps * f_zC * scalar + t_A
    dtau = eps * scalar
    terms = {
        "log": eps * f_zC * log_factor,
        "gamma": eps * f_zC * gamma_factor,
        "b": eps * f_zC * b_factor,
        "A": t_A,
        "d": eps * f_zC * d_factor,
        "tau_log": eps * log_factor,
        "tau_gamma": eps * gamma_factor,
        "tau_b": eps * b_factor,
        "tau_d": eps * d_factor,
    }
    return JumpPrediction(target=i, eps=eps, dz=dz, dtau=dtau,
                          valid=pp.valid, terms=terms)


def prediction_curve(coeffs: SeparatrixCoefficients, eps: float, target: int,
                     n: int = 512, k: float = 3.0):
    """Uniform-xi samples of the slow-time jump for overlay plots.

    Returns rows of (xi_i, dtau, valid); xi values whose Gamma factors
    are out of domain are skipped.
    """
    rows = []
    for j in range(n):
        xi = (j + 0.5) / n
        h0 = eps * coeffs.theta[2] * xi3_from_target(coeffs, target, xi)
        pp = pseudo_phase(h0, eps, coeffs, target, k=k)
        try:
            pred = jump_slow(coeffs, pp, eps, force=True)
        except ModelError:
            continue
        rows.append((xi, pred.dtau, pp.valid))
    return rows


@dataclass(frozen=True)
class BoundaryPrediction:
    target: int
    eps: float
    h0: float
    hp0: float               # energy at the first post-capture section
    z0: np.ndarray           # predicted z at the last approach section
    zp0: np.ndarray          # z at the first departure section, from z0
    zp0_from_avg: np.ndarray # same, anchored on the averaged solution in G_i


def boundary_predictors(coeffs: SeparatrixCoefficients, pp: PseudoPhase,
                        eps: float, z3_star=None,
                        zi_star=None) -> BoundaryPrediction:
    """Section-value predictors around the crossing.

    ``z3_star`` anchors the approach-side predictor (z at the last
    section with h > 0); ``zi_star`` anchors the departure-side one
    independently.  Unanchored outputs are returned as NaN.

    Only capture into the first-rounded well is supported: the
    departure-side expansion assumes the first post-capture section
    comes one partial round after the last approach section.
    """
    i = pp.target
    if i != coeffs.first_loop:
        raise UnsupportedRegime(
            "boundary predictors require capture into the first-rounded "
            f"well (G{coeffs.first_loop}), got target G{i}")
    j = 2 if i == 1 else 1   # the other well
    a = coeffs.a
    th = coeffs.theta
    th_i3 = coeffs.theta_ratio(i, 3)
    th_j3 = coeffs.theta_ratio(j, 3)
    f_zC = coeffs.f_zC
    A = coeffs.A
    b = coeffs.b
    d = coeffs.d
    xi3 = pp.xi3
    h0 = eps * th[2] * xi3
    hp0 = h0 - eps * th[i - 1]
    if hp0 >= 0.0:
        raise ModelError(
            f"h0 = {h0:.6g} does not cross within one round (hp0 >= 0)")
    dim_z = f_zC.size
    nanz = np.full(dim_z, math.nan)

    z0 = nanz
    if z3_star is not None:
        z3_star = np.atleast_1d(np.asarray(z3_star, dtype=float))
        gam = math.log(TWO_PI / (math.exp(lgamma(xi3)
                                          + lgamma(xi3 + th_j3))))
        z0 = (z3_star
              - (f_zC / th[2]) * (-2.0 * a * h0 * math.log(eps * th[2])
                                  + b[2] * h0)
              - (A[2] / th[2]) * h0
              + 2.0 * eps * a * f_zC * (-0.5 * gam
                                        + 0.5 * th_i3 * math.log(xi3))
              - 0.5 * eps * a * f_zC * (th_i3 - th_j3) * math.log(h0)
              - 0.5 * eps * f_zC * ((th_j3 * b[i - 1] - th_i3 * b[j - 1])
                                    + 2.0 * d[2] / th[2])
              + 0.25 * eps * A[2] * (th_i3 - th_j3)
              + 0.25 * eps * (A[j - 1] - A[i - 1]))

    zp0 = nanz
    if z3_star is not None:
        zp0 = (z0
               + eps * f_zC * (-0.5 * a * math.log(h0)
                               - 0.5 * a * math.log(-hp0) + b[i - 1])
               + eps * A[i - 1])

    zp0_avg = nanz
    if zi_star is not None:
        zi_star = np.atleast_1d(np.asarray(zi_star, dtype=float))
        xi_i = pp.xi_i
        if xi_i <= 0.0:
            raise ModelError(f"xi_{i} = {xi_i:.6g} must be positive")
        zp0_avg = (zi_star
                   - eps * f_zC * (a * xi_i * math.log(eps * th[i - 1])
                                   - b[i - 1] * xi_i)
                   + eps * A[i - 1] * xi_i
                   - eps * a * f_zC * (-math.log(math.sqrt(TWO_PI))
                                       + lgamma(xi_i)
                                       + 0.5 * math.log(xi_i))
                   - eps * (f_zC / th[i - 1]) * d[i - 1])
    return BoundaryPrediction(target=i, eps=eps, h0=h0, hp0=hp0,
                              z0=z0, zp0=zp0, zp0_from_avg=zp0_avg)


def area_bracket(grad_S, i: int) -> float:
    """{S_i, S_3} from a (3, 2) matrix of area gradients over z = (y, x).

    Bracket convention over the slow pair: {a, b} = a_x b_y - a_y b_x.
    """
    g = np.asarray(grad_S, dtype=float)
    return float(g[i - 1, 1] * g[2, 0] - g[i - 1, 0] * g[2, 1])


def invariant_jump(coeffs: SeparatrixCoefficients, pp: PseudoPhase,
                   eps: float, mode: str, S_star, J_minus: float,
                   bracket_i3: float = None, force: bool = False):
    """2*pi*J_plus for the Hamiltonian modes.

    ``S_star`` holds the three areas at the arrival point of the glued
    averaged solution; the pre-crossing invariant enters through the
    reconstruction S_i = S_i(z_*) + theta_i3 (2 pi J_- - S_3(z_*)).
    The slow-fast mode adds -eps theta_i3 (xi_i - 1/2) {S_i, S_3}.
    Returns (two_pi_J_plus, terms).
    """
    if mode not in ("hamiltonian_time", "slow_fast"):
        raise ModelError(f"invariant jump undefined for mode {mode!r}")
    i = pp.target
    th = coeffs.theta
    th_i3 = coeffs.theta_ratio(i, 3)
    S_star = np.asarray(S_star, dtype=float)
    S_i_hat = S_star[i - 1] + th_i3 * (TWO_PI * J_minus - S_star[2])
    pred = jump_slow(coeffs, pp, eps, force=force)
    total = S_i_hat + th[i - 1] * pred.dtau
    terms = {
        "S_i_reconstructed": S_i_hat,
        "theta_dtau": th[i - 1] * pred.dtau,
        "bracket": 0.0,
    }
    if mode == "slow_fast":
        if bracket_i3 is None:
            raise ModelError("slow-fast invariant jump needs {S_i, S_3}")
        t_br = -eps * th_i3 * (pp.xi_i - 0.5) * bracket_i3
        total += t_br
        terms["bracket"] = t_br
    return total, terms
