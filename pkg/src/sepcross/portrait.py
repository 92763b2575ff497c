"""Phase portrait of the unperturbed system at fixed z.

Computes the saddle chart (location, eigenvalue, section rays), traces
the two separatrix loops, samples periodic orbits in G1/G2/G3 and
classifies points by domain.

Conventions: the section rays are the bisectors of the unit stable and
unstable eigendirections; the eta ray points into a sector where E > 0
(inside G3) and the positive xi side bounds G2.  Both rays can be
rotated together (``rotate_deg``) and the xi sign can be flipped.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import ModelError, NotASaddle, OnSeparatrix, TopologyError
from .model import SystemDef

_DEFAULT_RTOL = 1e-12
_DEFAULT_ATOL = 1e-14


@dataclass(frozen=True)
class SaddleChart:
    z: np.ndarray
    p_C: float
    q_C: float
    h_C: float
    lam: float          # positive eigenvalue of the (p, q) linearization
    a: float            # 1 / lam
    v_u: np.ndarray     # unit unstable eigendirection, components (p, q)
    v_s: np.ndarray     # unit stable eigendirection
    e_eta: np.ndarray   # section ray into a G3 sector
    e_xi: np.ndarray    # section ray, positive side bounds G2
    dh_C_dz: np.ndarray
    rotate_deg: float = 0.0
    flip: bool = False
    scale: float = 1.0

    @property
    def C(self):
        return np.array([self.p_C, self.q_C])


@dataclass(frozen=True)
class Orbit:
    domain: str          # "G1" | "G2" | "G3"
    h: float
    z: np.ndarray
    start: np.ndarray    # (p, q) on the domain's section ray
    T: float
    sol: object          # scipy dense solution over [0, T]

    def at(self, t):
        return self.sol.sol(np.asarray(t))


@dataclass(frozen=True)
class SeparatrixGeometry:
    loops: dict          # {1: (n,2) polyline, 2: (n,2) polyline}, (p, q) columns
    loop_times: dict     # {1: duration, 2: duration}
    S1: float
    S2: float
    S3: float
    delta: float
    endpoints: dict      # {i: (start_xy, end_xy)}
    branch_sign: dict    # {i: +1 | -1}, sign of the v_u offset that traces loop i


def _rot90(v):
    return np.array([-v[1], v[0]])


def _deterministic_sign(v):
    i = int(np.argmax(np.abs(v)))
    return v if v[i] > 0 else -v


def find_saddle(sys: SystemDef, z, seed=None, rotate_deg=0.0, flip=False,
                tol=1e-12, scale=1.0) -> SaddleChart:
    """Newton search for the saddle of H(., ., z) and its local chart."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x = np.array(seed if seed is not None else sys.saddle_seed, dtype=float)
    converged = False
    for _ in range(80):
        g = np.array([sys.dH_dp(x[0], x[1], z), sys.dH_dq(x[0], x[1], z)])
        if np.linalg.norm(g) < tol:
            converged = True
            break
        Hpp, Hpq, Hqq = sys.d2H(x[0], x[1], z)
        J = np.array([[Hpp, Hpq], [Hpq, Hqq]])
        try:
            step = np.linalg.solve(J, g)
        except np.linalg.LinAlgError:
            raise NotASaddle("singular Hessian during Newton iteration")
        x = x - step
        if not np.all(np.isfinite(x)):
            raise NotASaddle("Newton iteration diverged")
    if not converged:
        raise NotASaddle(f"Newton did not converge from seed {seed}")

    p_C, q_C = float(x[0]), float(x[1])
    Hpp, Hpq, Hqq = sys.d2H(p_C, q_C, z)
    det_hess = Hpp * Hqq - Hpq * Hpq
    if det_hess >= 0.0:
        raise NotASaddle(
            f"critical point at ({p_C:.6g}, {q_C:.6g}) is not a saddle"
        )
    lam = math.sqrt(-det_hess)

    # linearization of (pdot, qdot) = (-H_q, H_p)
    M = np.array([[-Hpq, -Hqq], [Hpp, Hpq]])
    w, V = np.linalg.eig(M)
    iu = int(np.argmax(w.real))
    ist = int(np.argmin(w.real))
    v_u = _deterministic_sign(np.real(V[:, iu]) / np.linalg.norm(V[:, iu]))
    v_s = _deterministic_sign(np.real(V[:, ist]) / np.linalg.norm(V[:, ist]))

    b1 = v_u + v_s
    b1 = b1 / np.linalg.norm(b1)
    b2 = v_u - v_s
    b2 = b2 / np.linalg.norm(b2)

    def quad_E(v):
        return 0.5 * (Hpp * v[0] ** 2 + 2 * Hpq * v[0] * v[1] + Hqq * v[1] ** 2)

    if quad_E(b1) > 0:
        e_eta, e_xi = b1, b2
    else:
        e_eta, e_xi = b2, b1
    if quad_E(e_eta) <= 0 or quad_E(e_xi) >= 0:
        raise NotASaddle("section rays do not separate E-signs at the saddle")

    e_eta = _deterministic_sign(e_eta)
    e_xi = _deterministic_sign(e_xi)

    if rotate_deg:
        # rotate the eta ray spatially, then advance the xi ray by the
        # same *flow time*: near the saddle a ray is crossed at a time
        # set by its hyperbolic parameter, and only flow-generated
        # section families shift every crossing time equally (which is
        # what keeps the extracted constants consistent across rays --
        # an equal spatial rotation of both rays shifts the G3 and well
        # anchors in opposite time directions)
        th = math.radians(rotate_deg)
        R = np.array([[math.cos(th), -math.sin(th)],
                      [math.sin(th), math.cos(th)]])
        basis = np.column_stack([v_u, v_s])
        cu, cs = np.linalg.solve(basis, e_eta)
        e_eta = R @ e_eta
        cu2, cs2 = np.linalg.solve(basis, e_eta)
        if cu2 * cu <= 0 or cs2 * cs <= 0:
            raise NotASaddle(
                f"rotation by {rotate_deg} deg pushes the eta ray out of "
                "its saddle sector")
        lam_delta = 0.5 * math.log((cu2 * cs) / (cu * cs2))
        du, ds = np.linalg.solve(basis, e_xi)
        e_xi = du * math.exp(lam_delta) * v_u + ds * math.exp(-lam_delta) * v_s
        e_xi = e_xi / np.linalg.norm(e_xi)
    if flip:
        e_xi = -e_xi

    h_C = float(sys.H(p_C, q_C, z))
    # validate the ray E-signs on the true Hamiltonian, not just the
    # quadratic form (matters for rotated sections)
    r = 1e-3 * scale
    if sys.H(p_C + r * e_eta[0], q_C + r * e_eta[1], z) - h_C <= 0:
        raise NotASaddle("eta ray does not point into an E > 0 sector")
    for s in (+1, -1):
        if sys.H(p_C + s * r * e_xi[0], q_C + s * r * e_xi[1], z) - h_C >= 0:
            raise NotASaddle("xi axis does not have E < 0 on both sides")

    return SaddleChart(
        z=z, p_C=p_C, q_C=q_C, h_C=h_C, lam=lam, a=1.0 / lam,
        v_u=v_u, v_s=v_s, e_eta=e_eta, e_xi=e_xi,
        dh_C_dz=np.asarray(sys.dH_dz(p_C, q_C, z), dtype=float),
        rotate_deg=rotate_deg, flip=flip, scale=scale,
    )


def _flow_rhs(sys, z):
    dH_dp, dH_dq = sys.dH_dp, sys.dH_dq

    def rhs(t, y):
        return (-dH_dq(y[0], y[1], z), dH_dp(y[0], y[1], z))

    return rhs


def _trace_branch(sys, chart, sign, delta, integrands=(), n_samples=0,
                  rtol=_DEFAULT_RTOL, atol=_DEFAULT_ATOL, return_radius=None):
    """Trace one separatrix loop from C + sign*delta*v_u back to the saddle ball.

    ``integrands`` are callables g(t, p, q) integrated in time along the
    loop.  Returns (t_end, samples or None, area, integrals, endpoints).

    ``return_radius`` (default 3*sqrt(rtol) * scale) must stay above the
    closest approach allowed by the integrator's energy drift,
    ~sqrt(drift/lam), which scales like sqrt(rtol).
    """
    z = chart.z
    C = chart.C
    if return_radius is None:
        return_radius = max(delta, 3.0 * math.sqrt(rtol) * chart.scale)
    x0 = C + sign * delta * chart.v_u
    flow = _flow_rhs(sys, z)

    def rhs(t, y):
        p, q = y[0], y[1]
        pd, qd = flow(t, y)
        out = [pd, qd, p * qd]
        for g in integrands:
            out.append(g(t, p, q))
        return out

    def leave_ball(t, y):
        return ((y[0] - C[0]) ** 2 + (y[1] - C[1]) ** 2
                - return_radius * return_radius)

    leave_ball.terminal = True
    leave_ball.direction = -1

    t_cap = (40.0 * abs(math.log(delta)) + 400.0) / chart.lam
    y0 = [x0[0], x0[1], 0.0] + [0.0] * len(integrands)
    sol = solve_ivp(rhs, (0.0, t_cap), y0, method="DOP853",
                    rtol=rtol, atol=atol, events=leave_ball,
                    dense_output=n_samples > 0)
    if not sol.t_events[0].size:
        raise TopologyError(
            f"separatrix branch (sign {sign:+d}) did not return to the saddle"
        )
    t_end = float(sol.t_events[0][0])
    y_end = sol.y_events[0][0]
    samples = None
    if n_samples:
        ts = np.linspace(0.0, t_end, n_samples)
        samples = sol.sol(ts)[:2].T
    area = float(y_end[2])
    integrals = np.array(y_end[3:], dtype=float)
    return t_end, samples, area, integrals, (x0, y_end[:2].copy())


def _gap_area(points):
    """∮ p dq over straight segments through the listed (p, q) points."""
    s = 0.0
    for a, b in zip(points[:-1], points[1:]):
        s += 0.5 * (a[0] + b[0]) * (b[1] - a[1])
    return s


def trace_separatrices(sys: SystemDef, chart: SaddleChart, delta=None,
                       n_samples=1200, rtol=_DEFAULT_RTOL) -> SeparatrixGeometry:
    """Trace both loops; areas close the near-saddle gap through C itself."""
    if delta is None:
        delta = 1e-6 * chart.scale
    C = chart.C
    loops, times, areas, endpoints, signs = {}, {}, {}, {}, {}
    for sign in (+1, -1):
        t_end, samples, area, _, ends = _trace_branch(
            sys, chart, sign, delta, n_samples=n_samples, rtol=rtol)
        # close through the saddle: end -> C -> start
        area += _gap_area([ends[1], C, ends[0]])
        side = float(np.mean((samples - C) @ chart.e_xi))
        idx = 2 if side > 0 else 1
        if idx in loops:
            raise TopologyError("both separatrix branches lie on the same xi side")
        loops[idx] = np.vstack([samples, C[None, :]])
        times[idx] = t_end
        areas[idx] = abs(area)
        endpoints[idx] = ends
        signs[idx] = sign
    S1, S2 = areas[1], areas[2]
    return SeparatrixGeometry(loops=loops, loop_times=times,
                              S1=S1, S2=S2, S3=S1 + S2,
                              delta=delta, endpoints=endpoints,
                              branch_sign=signs)


def ray_direction(chart: SaddleChart, domain: str):
    if domain == "G3":
        return chart.e_eta
    if domain == "G2":
        return chart.e_xi
    if domain == "G1":
        return -chart.e_xi
    raise ValueError(f"unknown domain {domain!r}")


def _energy_along_ray(sys, chart, e, r):
    p = chart.p_C + r * e[0]
    q = chart.q_C + r * e[1]
    return sys.H(p, q, chart.z) - chart.h_C


def section_start(sys: SystemDef, chart: SaddleChart, domain: str, h: float):
    """Point on the domain's section ray with E = h (nearest to the saddle)."""
    e = ray_direction(chart, domain)
    z = chart.z
    Hpp, Hpq, Hqq = sys.d2H(chart.p_C, chart.q_C, z)
    kappa = Hpp * e[0] ** 2 + 2 * Hpq * e[0] * e[1] + Hqq * e[1] ** 2

    def f(r):
        return _energy_along_ray(sys, chart, e, r) - h

    if domain == "G3":
        if h <= 0:
            raise ModelError("G3 requires h > 0")
        r_guess = math.sqrt(2.0 * h / abs(kappa))
        r_lo = min(r_guess * 1e-3, 1e-9 * chart.scale)
        r_hi = r_guess
        for _ in range(200):
            if f(r_hi) > 0:
                break
            r_hi *= 1.5
        else:
            raise ModelError(f"no G3 section point found for h = {h}")
    else:
        if h >= 0:
            raise ModelError(f"{domain} requires h < 0")
        # locate the ray point past which E starts increasing (well center)
        def dEdr(r):
            p = chart.p_C + r * e[0]
            q = chart.q_C + r * e[1]
            return sys.dH_dp(p, q, z) * e[0] + sys.dH_dq(p, q, z) * e[1]

        r_probe = 1e-4 * chart.scale
        r_far = r_probe
        for _ in range(200):
            if dEdr(r_far) > 0:
                break
            r_far *= 1.4
        else:
            raise ModelError(f"no well center found along the {domain} ray")
        r_center = brentq(dEdr, r_probe, r_far, xtol=1e-14, rtol=1e-14)
        h_min = _energy_along_ray(sys, chart, e, r_center)
        if h <= h_min:
            raise ModelError(
                f"h = {h} below the well minimum {h_min:.6g} in {domain}")
        r_lo = math.sqrt(2.0 * abs(h) / abs(kappa)) * 1e-3
        r_hi = r_center

    r = brentq(f, r_lo, r_hi, xtol=1e-15, rtol=8.9e-16)
    return chart.C + r * e


def _orbit_solve(sys, chart, domain, h, integrands=(), rtol=_DEFAULT_RTOL,
                 atol=_DEFAULT_ATOL, dense=False):
    """One period from the section ray; returns (start, T, y_at_T, sol).

    The period is located as the first section-ray recrossing with the
    starting transversality sign.  The time cap starts from the
    logarithmic period estimate and doubles on a miss, so the solver
    never integrates far past one period.
    """
    start = section_start(sys, chart, domain, h)
    z = chart.z
    e = ray_direction(chart, domain)
    n = _rot90(e)
    C = chart.C
    flow = _flow_rhs(sys, z)

    def rhs(t, y):
        pd, qd = flow(t, y)
        out = [pd, qd]
        for g in integrands:
            out.append(g(t, y[0], y[1]))
        return out

    v0 = flow(0.0, start)
    gdot0 = v0[0] * n[0] + v0[1] * n[1]
    if gdot0 == 0.0:
        raise ModelError("section ray tangent to the flow at the start point")
    direction = 1.0 if gdot0 > 0 else -1.0

    def crossing(t, y):
        return (y[0] - C[0]) * n[0] + (y[1] - C[1]) * n[1]

    crossing.terminal = False
    crossing.direction = direction

    a_i = (2.0 if domain == "G3" else 1.0) / chart.lam
    t_cap = 1.3 * (a_i * max(abs(math.log(abs(h) + 1e-300)), 1.0)
                   + 8.0 / chart.lam)
    y0 = list(start) + [0.0] * len(integrands)
    for _ in range(5):
        sol = solve_ivp(rhs, (0.0, t_cap), y0, method="DOP853",
                        rtol=rtol, atol=atol, events=crossing,
                        dense_output=dense)
        for te, ye in zip(sol.t_events[0], sol.y_events[0]):
            if te < 1e-9:
                continue
            if (ye[0] - C[0]) * e[0] + (ye[1] - C[1]) * e[1] > 0:
                return np.asarray(start), float(te), ye, sol
        t_cap *= 2.0
    raise TopologyError(
        f"orbit at h = {h} in {domain} did not return to its section ray")


def periodic_orbit(sys: SystemDef, chart: SaddleChart, domain: str, h: float,
                   rtol=_DEFAULT_RTOL, atol=_DEFAULT_ATOL) -> Orbit:
    """Closed unperturbed orbit E = h in ``domain``, started on its section ray."""
    start, T, _, sol = _orbit_solve(sys, chart, domain, h,
                                    rtol=rtol, atol=atol, dense=True)
    return Orbit(domain=domain, h=h, z=chart.z, start=start, T=T, sol=sol)


def orbit_average(sys: SystemDef, chart: SaddleChart, domain: str, h: float,
                  integrands=(), rtol=_DEFAULT_RTOL, atol=_DEFAULT_ATOL):
    """(T, integrals over one period) in a single integrator pass."""
    _, T, y_T, _ = _orbit_solve(sys, chart, domain, h, integrands=integrands,
                                rtol=rtol, atol=atol, dense=False)
    return T, np.asarray(y_T[2:], dtype=float)


def orbit_quadrature(sys: SystemDef, chart: SaddleChart, start, T, integrands,
                     rtol=_DEFAULT_RTOL, atol=_DEFAULT_ATOL):
    """Time integrals of ``integrands`` g(t, p, q) along one orbit period."""
    z = chart.z
    flow = _flow_rhs(sys, z)

    def rhs(t, y):
        pd, qd = flow(t, y)
        out = [pd, qd]
        for g in integrands:
            out.append(g(t, y[0], y[1]))
        return out

    y0 = [start[0], start[1]] + [0.0] * len(integrands)
    sol = solve_ivp(rhs, (0.0, T), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise ModelError(f"orbit quadrature failed: {sol.message}")
    end = sol.y[:, -1]
    return end[2:].copy(), end[:2].copy()


def _point_in_polygon(pt, poly):
    x, y = pt
    xs, ys = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(xs, -1), np.roll(ys, -1)
    cross = (ys > y) != (y2 > y)
    denom = np.where(y2 != ys, y2 - ys, 1.0)
    x_at = xs + (y - ys) * (x2 - xs) / denom
    return bool(np.count_nonzero(cross & (x_at > x)) % 2)


def classify(sys: SystemDef, chart: SaddleChart, geometry: SeparatrixGeometry,
             p: float, q: float, on_sep_tol=1e-12):
    """Domain tag and E for a point (error if it sits on a separatrix)."""
    E = float(sys.H(p, q, chart.z) - chart.h_C)
    if abs(E) <= on_sep_tol:
        raise OnSeparatrix(f"point ({p}, {q}) has |E| = {abs(E):.3g}")
    if E > 0:
        return "G3", E
    if _point_in_polygon((p, q), geometry.loops[2]):
        return "G2", E
    if _point_in_polygon((p, q), geometry.loops[1]):
        return "G1", E
    # E < 0 outside both loops only happens outside the portrait region
    raise ModelError(f"point ({p}, {q}) with E < 0 lies in neither loop")
