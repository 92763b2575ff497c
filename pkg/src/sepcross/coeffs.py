"""Separatrix expansion coefficients at fixed z.

The quantities computed here feed the jump predictors:

* Theta_i = -loop integral of f_h, A_i = loop integral of F_z;
* a = 1/lambda and b_i, the regularized period constants of
  T = -a_i ln|h| + b_i;
* d_i, g_i, the constant terms of the (t - T/2)-weighted orbit
  integrals of f_h and F_z, extracted by log-grid extrapolation.

Index convention throughout: position 0, 1, 2 of each array holds the
G1, G2, G3 value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitDiverged, ModelError, UnsupportedRegime
from .model import SystemDef
from .portrait import (
    SaddleChart,
    SeparatrixGeometry,
    _trace_branch,
    find_saddle,
    orbit_average,
    orbit_quadrature,
    periodic_orbit,
    trace_separatrices,
)

_DOMAINS = ("G1", "G2", "G3")


@dataclass(frozen=True)
class SeparatrixCoefficients:
    z: np.ndarray
    a: float
    lam: float
    b: np.ndarray          # (3,)
    theta: np.ndarray      # (3,)
    A: np.ndarray          # (3, dim_z)
    d: np.ndarray          # (3,)
    g: np.ndarray          # (3, dim_z)
    S: np.ndarray          # (3,)
    f_zC: np.ndarray       # (dim_z,)
    section: dict          # rotate_deg / flip metadata
    first_loop: int = 2    # well rounded first after the eta section
    diagnostics: dict = field(default_factory=dict)

    def theta_ratio(self, i, j):
        """theta_{ij} = Theta_i / Theta_j with 1-based domain indices."""
        return self.theta[i - 1] / self.theta[j - 1]

    def require_same_section(self, other):
        if self.section != other.section:
            raise FitDiverged(
                "mixing coefficient bundles with different section conventions")


def field_closures(sys: SystemDef, chart: SaddleChart):
    """f_h(p, q) and per-component F_z closures at chart.z, eps = 0."""
    z = chart.z
    dhc = chart.dh_C_dz
    f_zC = np.asarray(sys.f_z(chart.p_C, chart.q_C, z, 0.0), dtype=float)

    def f_h(p, q):
        fz0 = sys.f_z(p, q, z, 0.0)
        dE_dz = np.asarray(sys.dH_dz(p, q, z), dtype=float) - dhc
        return (
            sys.dH_dp(p, q, z) * sys.f_p(p, q, z, 0.0)
            + sys.dH_dq(p, q, z) * sys.f_q(p, q, z, 0.0)
            + float(np.dot(dE_dz, fz0))
        )

    def make_Fz(k):
        def Fz_k(p, q):
            return float(sys.f_z(p, q, z, 0.0)[k]) - f_zC[k]
        return Fz_k

    return f_h, [make_Fz(k) for k in range(sys.dim_z)], f_zC


def loop_integrals(sys: SystemDef, chart: SaddleChart,
                   geometry: SeparatrixGeometry, delta=None, rtol=1e-13):
    """(Theta, A) from time integrals of f_h and F_z along l_1, l_2.

    Returns (theta, A, diagnostics); index 3 values are sums of the loop
    values.  Tail magnitudes (the truncated near-saddle contribution,
    bounded by |integrand at the cut| / lambda) go into diagnostics.

    The cut radius cannot go below the integrator's energy drift
    (sqrt(drift/lambda) limits the closest approach to the saddle), so
    the default is 1e-7 * scale with tightened tolerances.
    """
    if delta is None:
        delta = 1e-7 * chart.scale
    f_h, Fz_comps, _ = field_closures(sys, chart)
    integrands = [lambda t, p, q: f_h(p, q)]
    for Fk in Fz_comps:
        integrands.append(lambda t, p, q, Fk=Fk: Fk(p, q))

    C = chart.C
    lam = chart.lam
    fields = [f_h] + Fz_comps

    def tail_term(x, loop_scale):
        """Integral of one field over the truncated exponential approach.

        The integrand vanishes at C like dist^m; with dist ~ exp(-lam t)
        the cut-off remainder is g(x) / (m lam).  m is measured from a
        radial half-step toward C.
        """
        mid = C + 0.5 * (np.asarray(x[:2]) - C)
        out = []
        for gfun in fields:
            g_end = gfun(x[0], x[1])
            g_mid = gfun(mid[0], mid[1])
            if abs(g_end) < 1e-13 * loop_scale:
                out.append(0.0)
                continue
            if abs(g_mid) < 1e-16 * loop_scale or g_mid * g_end <= 0:
                out.append(g_end / lam)
                continue
            m = math.log(abs(g_end) / abs(g_mid)) / math.log(2.0)
            if m < 0.1:
                raise ModelError(
                    "loop integrand does not vanish at the saddle; "
                    "tail estimate diverges")
            m = min(max(m, 0.5), 4.0)
            out.append(g_end / (m * lam))
        return np.array(out)

    theta = np.zeros(3)
    A = np.zeros((3, sys.dim_z))
    tails = {}
    for idx in (1, 2):
        sign = geometry.branch_sign[idx]
        _, _, _, integrals, ends = _trace_branch(
            sys, chart, sign, delta, integrands=integrands, rtol=rtol,
            atol=1e-16)
        loop_scale = max(np.max(np.abs(integrals)), 1e-6)
        # add both truncated exponential tails (outgoing and incoming)
        tail = tail_term(ends[0], loop_scale) + tail_term(ends[1], loop_scale)
        integrals = integrals + tail
        theta[idx - 1] = -integrals[0]
        A[idx - 1] = integrals[1:]
        tails[idx] = float(np.max(np.abs(tail)))
    theta[2] = theta[0] + theta[1]
    A[2] = A[0] + A[1]
    return theta, A, {"delta": delta, "tail_corrections": tails}


def _geometric_h_grid(h_top, h_bottom, n):
    ratio = (h_bottom / h_top) ** (1.0 / (n - 1))
    return h_top * ratio ** np.arange(n)


def _domain_h(sys, chart, domain, frac_grid, S3):
    """Signed energies |h| = frac * S3, clipped to the well depth for G1/G2."""
    if domain == "G3":
        return frac_grid * S3
    from .portrait import ray_direction, _energy_along_ray
    # well depth along the section ray limits |h|
    import scipy.optimize as opt
    e = ray_direction(chart, domain)

    def E(r):
        return _energy_along_ray(sys, chart, e, r)

    res = opt.minimize_scalar(E, bounds=(1e-8 * chart.scale, 10 * chart.scale),
                              method="bounded")
    depth = abs(res.fun)
    scale = min(S3, 0.5 * depth / frac_grid[0])
    return -frac_grid * scale


def period_constants(sys: SystemDef, chart: SaddleChart,
                     geometry: SeparatrixGeometry, n_levels=14, rtol=1e-12):
    """a and the b_i intercepts of T = -a_i ln|h| + b_i."""
    a = chart.a
    a_i = np.array([a, a, 2.0 * a])
    frac = _geometric_h_grid(1e-3, 1e-3 * 2.0 ** -(n_levels - 1), n_levels)
    b = np.zeros(3)
    diags = {}
    for di, domain in enumerate(_DOMAINS):
        hs = _domain_h(sys, chart, domain, frac, geometry.S3)
        Ts = np.array([orbit_average(sys, chart, domain, h, rtol=rtol)[0]
                       for h in hs])
        la = np.log(np.abs(hs))
        y = Ts + a_i[di] * la
        # model b + c*h*ln|h| + c'*h + c''*(h*ln|h|)^2, weighted toward
        # the small-h end where the omitted orders are negligible
        X = np.column_stack([np.ones_like(hs), hs * la, hs, (hs * la) ** 2])
        w = 1.0 / np.sqrt(np.abs(hs) / np.abs(hs[-1]))
        coef, *_ = np.linalg.lstsq(X * w[:, None], y * w, rcond=None)
        fitted = X @ coef
        resid = float(np.max(np.abs(fitted - y)))
        if resid > 1e-4 * (1.0 + abs(coef[0])):
            raise FitDiverged(
                f"period fit in {domain} has residual {resid:.3g}")
        b[di] = coef[0]
        diags[domain] = {"h_grid": hs.tolist(), "residual": resid}
    return a, b, diags


def _weighted_fit(hs, Ws, alpha_fixed=None):
    """Fit W = alpha*ln|h| + beta + subleading powers of sqrt|h| and h.

    When ``alpha_fixed`` is given the ln|h| slope is pinned to that value
    (it is known exactly from the loop integrals) and only the remaining
    terms are fitted, which removes the slope/intercept trade-off from beta.
    """
    la = np.log(np.abs(hs))
    ah = np.abs(hs)
    sh = np.sqrt(ah)
    cols = [np.ones_like(hs), sh, sh * la, ah * la, ah, ah * la * la]
    y = Ws
    if alpha_fixed is None:
        cols = [la] + cols
    else:
        y = Ws - alpha_fixed * la
    X = np.column_stack(cols)
    # emphasize the small-h end where the expansion is accurate
    w = 1.0 / np.sqrt(np.abs(hs) / np.abs(hs[-1]))
    coef, *_ = np.linalg.lstsq(X * w[:, None], y * w, rcond=None)
    resid = X @ coef - y
    if alpha_fixed is None:
        return coef[0], coef[1], float(np.max(np.abs(resid)))
    return alpha_fixed, coef[0], float(np.max(np.abs(resid)))


def weighted_constants(sys: SystemDef, chart: SaddleChart,
                       geometry: SeparatrixGeometry, theta, A, a, b,
                       n_levels=17, slope_rtol=0.05, rtol=1e-12):
    """d_i and g_i from (t - T/2)-weighted orbit integrals on an h-grid."""
    f_h, Fz_comps, _ = field_closures(sys, chart)
    frac = _geometric_h_grid(1e-2, 1e-7, n_levels)
    d = np.zeros(3)
    g = np.zeros((3, sys.dim_z))
    diags = {}
    for di, domain in enumerate(_DOMAINS):
        hs = _domain_h(sys, chart, domain, frac, geometry.S3)
        W = np.zeros((len(hs), 1 + sys.dim_z))
        fields = [f_h] + Fz_comps
        integrands = []
        for gfun in fields:
            integrands.append(lambda t, p, q, g=gfun: g(p, q))
            integrands.append(lambda t, p, q, g=gfun: t * g(p, q))
        for k, h in enumerate(hs):
            T, vals = orbit_average(sys, chart, domain, h, integrands,
                                    rtol=rtol)
            # W = integral of (t - T/2) g dt assembled from the moments
            W[k] = vals[1::2] - 0.5 * T * vals[0::2]
        dd = {}
        # f_h column
        if domain == "G3":
            alpha_pred = -a * (theta[1] - theta[0]) / 2.0
        else:
            alpha_pred = 0.0
        alpha, _, _ = _weighted_fit(hs, W[:, 0])
        _, beta, resid = _weighted_fit(hs, W[:, 0], alpha_fixed=alpha_pred)
        if domain == "G3":
            d[2] = -beta - (theta[0] * b[1] - theta[1] * b[0]) / 2.0
        else:
            d[di] = -beta
        tol = slope_rtol * abs(alpha_pred) + 1e-3 * a * (abs(theta[0]) + abs(theta[1]))
        if abs(alpha - alpha_pred) > tol:
            raise FitDiverged(
                f"{domain} f_h weighted slope {alpha:.6g} vs predicted "
                f"{alpha_pred:.6g}")
        dd["f_h"] = {"alpha": alpha, "alpha_pred": alpha_pred,
                     "residual": resid}
        # F_z columns
        for k in range(sys.dim_z):
            if domain == "G3":
                alpha_pred = -a * (A[0][k] - A[1][k]) / 2.0
            else:
                alpha_pred = 0.0
            alpha, _, _ = _weighted_fit(hs, W[:, 1 + k])
            _, beta, resid = _weighted_fit(hs, W[:, 1 + k],
                                           alpha_fixed=alpha_pred)
            if domain == "G3":
                g[2, k] = -beta + (A[0][k] * b[1] - A[1][k] * b[0]) / 2.0
            else:
                g[di, k] = -beta
            tol = (slope_rtol * abs(alpha_pred)
                   + 1e-3 * a * (abs(A[0][k]) + abs(A[1][k]) + 1e-12))
            if abs(alpha - alpha_pred) > tol:
                raise FitDiverged(
                    f"{domain} F_z[{k}] weighted slope {alpha:.6g} vs "
                    f"predicted {alpha_pred:.6g}")
            dd[f"F_z[{k}]"] = {"alpha": alpha, "alpha_pred": alpha_pred,
                               "residual": resid}
        diags[domain] = dd
    return d, g, diags


def area_gradients(sys: SystemDef, z, step=1e-4, rtol=1e-11):
    """dS_j/dz by central differences of the separatrix areas, (3, dim_z)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    grad = np.zeros((3, z.size))
    for k in range(z.size):
        vals = []
        for s in (+1.0, -1.0):
            zs = z.copy()
            zs[k] += s * step
            geo = trace_separatrices(sys, find_saddle(sys, zs), rtol=rtol)
            vals.append(np.array([geo.S1, geo.S2, geo.S3]))
        grad[:, k] = (vals[0] - vals[1]) / (2.0 * step)
    return grad


def bundle(sys: SystemDef, z, rotate_deg=0.0, flip=False, scale=1.0,
           rtol=1e-12, chart=None, geometry=None) -> SeparatrixCoefficients:
    """Full coefficient pipeline at one z value."""
    if chart is None:
        chart = find_saddle(sys, z, rotate_deg=rotate_deg, flip=flip,
                            scale=scale)
    if geometry is None:
        geometry = trace_separatrices(sys, chart, rtol=rtol)
    theta, A, loop_diags = loop_integrals(sys, chart, geometry, rtol=rtol)
    if theta[0] <= 0 or theta[1] <= 0:
        raise UnsupportedRegime(
            f"Theta = {theta[:2]} at z = {z}; only Theta_1, Theta_2 > 0 "
            "regimes are supported")
    a, b, period_diags = period_constants(sys, chart, geometry, rtol=rtol)
    d, g, weighted_diags = weighted_constants(
        sys, chart, geometry, theta, A, a, b, rtol=rtol)
    _, _, f_zC = field_closures(sys, chart)
    S = np.array([geometry.S1, geometry.S2, geometry.S3])
    # which well the G3 flow rounds first after the eta section: the
    # linearized velocity at the section ray points toward it
    H_pp, H_pq, H_qq = sys.d2H(chart.p_C, chart.q_C, chart.z)
    v = np.array([-H_pq * chart.e_eta[0] - H_qq * chart.e_eta[1],
                  H_pp * chart.e_eta[0] + H_pq * chart.e_eta[1]])
    first_loop = 2 if float(v @ chart.e_xi) > 0.0 else 1
    return SeparatrixCoefficients(
        z=np.atleast_1d(np.asarray(z, dtype=float)),
        a=a, lam=chart.lam, b=b, theta=theta, A=A, d=d, g=g, S=S,
        f_zC=f_zC, first_loop=first_loop,
        section={"rotate_deg": rotate_deg, "flip": flip},
        diagnostics={"loops": loop_diags, "periods": period_diags,
                     "weighted": weighted_diags},
    )
