"""First-order averaged dynamics and adiabatic-invariant measurement.

The averaged system moves the slow variables (h, z) in slow time
tau = eps*t with right-hand side equal to the period average of the
slow fields over the frozen orbit E = h:

    dh/dtau = (1/T) * loop integral of f_h,
    dz/dtau = (1/T) * loop integral of f_z.

Near the separatrix T diverges like -a_i ln|h|, so dh/dtau -> 0
logarithmically while the arrival slow time stays finite; solutions
are glued across h = 0 by stopping at a small |h| floor and adding the
closed-form remainder of dtau = -T(h) dh / Theta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import FitDiverged, MeasurementSuspect, ModelError
from .model import SystemDef
from .portrait import (
    SaddleChart,
    find_saddle,
    orbit_average,
    orbit_quadrature,
    periodic_orbit,
)
from .coeffs import field_closures

_DOMAIN_A = {"G1": 1.0, "G2": 1.0, "G3": 2.0}  # multiple of a = 1/lam in T(h)


@dataclass(frozen=True)
class AveragedState:
    h: float
    z: np.ndarray
    tau: float


@dataclass(frozen=True)
class AveragedLeg:
    domain: str
    tau: np.ndarray          # (n,)
    h: np.ndarray            # (n,)
    z: np.ndarray            # (n, dim_z)


@dataclass(frozen=True)
class AveragedSolution:
    route: tuple             # ordered domain tags, e.g. ("G3", "G2")
    legs: tuple              # AveragedLeg per route entry
    tau_star: float          # arrival slow time (h = 0), nan if no arrival
    z_star: np.ndarray       # z at arrival

    def state(self, tau) -> AveragedState:
        for leg in self.legs:
            lo, hi = leg.tau[0], leg.tau[-1]
            if min(lo, hi) - 1e-12 <= tau <= max(lo, hi) + 1e-12:
                ts = leg.tau
                sign = 1.0 if ts[-1] >= ts[0] else -1.0
                h = float(np.interp(sign * tau, sign * ts, leg.h))
                z = np.array([np.interp(sign * tau, sign * ts, leg.z[:, k])
                              for k in range(leg.z.shape[1])])
                return AveragedState(h=h, z=z, tau=float(tau))
        raise ModelError(f"tau = {tau} outside the solved range")


@dataclass(frozen=True)
class InvariantMeasurement:
    window: tuple            # (t_a, t_b)
    J: float                 # u1-corrected value (primary)
    J_period_averaged: float # cross-check value
    method: str
    scatter: float
    samples: int


class AveragedCache:
    """Memoizes charts, field closures and averaged-RHS evaluations.

    For autonomous systems the RHS depends on h only, so values are
    held on a lazily filled grid in u = ln|h| (1/48 decade spacing,
    doubled for |h| >= 1e-2 where the curvature in u is largest)
    and interpolated with a cubic through the four surrounding nodes;
    the interpolated quantities (Theta_eff = -T*f_h_bar, A_eff and the
    regularized period) vary slowly in u, keeping the error below 1e-8.
    Non-autonomous systems fall back to direct evaluation with an
    exact-key memo.  Fill order is deterministic; reads are pure.
    """

    def __init__(self, sys: SystemDef, orbit_rtol=1e-11, orbit_atol=1e-13):
        self.sys = sys
        self.orbit_rtol = orbit_rtol
        self.orbit_atol = orbit_atol
        self._charts = {}
        self._closures = {}
        self._direct = {}
        self._grid = {}          # (domain, band) -> {node index: values}
        # two density bands: the interpolation error scales with |h|, so
        # |h| >= 1e-2 gets twice the node density
        self._u_split = math.log(1e-2)
        self._du_bands = (math.log(10.0) / 96.0, math.log(10.0) / 48.0)

    def _zkey(self, z):
        return tuple(np.round(np.atleast_1d(z).astype(float), 12))

    def chart_at(self, z) -> SaddleChart:
        key = self._zkey(z)
        if key not in self._charts:
            self._charts[key] = find_saddle(self.sys, np.atleast_1d(z))
        return self._charts[key]

    def closures_at(self, z):
        key = self._zkey(z)
        if key not in self._closures:
            self._closures[key] = field_closures(self.sys, self.chart_at(z))
        return self._closures[key]

    def _evaluate(self, domain, h, z):
        """Direct quadrature: returns (T, fh_bar, fz_bar ndarray)."""
        chart = self.chart_at(z)
        f_h, Fz_comps, f_zC = self.closures_at(z)
        integrands = [lambda t, p, q: f_h(p, q)]
        for Fk in Fz_comps:
            integrands.append(lambda t, p, q, Fk=Fk: Fk(p, q))
        T, vals = orbit_average(self.sys, chart, domain, h, integrands,
                                rtol=self.orbit_rtol, atol=self.orbit_atol)
        fh_bar = vals[0] / T
        fz_bar = vals[1:] / T + f_zC
        return T, fh_bar, fz_bar

    def _smooth(self, domain, h, z):
        """Slowly varying representation (T + a_i ln|h|, Theta_eff, A_eff)."""
        chart = self.chart_at(z)
        _, _, f_zC = self.closures_at(z)
        T, fh_bar, fz_bar = self._evaluate(domain, h, z)
        a_i = _DOMAIN_A[domain] * chart.a
        return np.concatenate([
            [T + a_i * math.log(abs(h)), -T * fh_bar],
            T * (fz_bar - f_zC),
        ])

    def rhs(self, domain, h, z):
        """(fh_bar, fz_bar, T) of the first-order averaged system."""
        if not self.sys.autonomous:
            key = (domain, float(h), self._zkey(z))
            if key not in self._direct:
                self._direct[key] = self._evaluate(domain, h, z)
            T, fh_bar, fz_bar = self._direct[key]
            return fh_bar, fz_bar, T
        chart = self.chart_at(z)
        _, _, f_zC = self.closures_at(z)
        u = math.log(abs(h))
        band = 0 if u >= self._u_split else 1
        du = self._du_bands[band]
        nodes = self._grid.setdefault((domain, band), {})
        j = math.floor(u / du)
        idx = (j - 1, j, j + 1, j + 2)
        for k in idx:
            if k not in nodes:
                hk = math.copysign(math.exp(k * du), h)
                try:
                    nodes[k] = self._smooth(domain, hk, z)
                except ModelError:
                    # grid node outside the well's energy range (deep
                    # orbits near the well bottom): evaluate directly
                    key = (domain, float(h), self._zkey(z))
                    if key not in self._direct:
                        self._direct[key] = self._evaluate(domain, h, z)
                    T, fh_bar, fz_bar = self._direct[key]
                    return fh_bar, fz_bar, T
        us = np.array([k * du for k in idx])
        vals = np.stack([nodes[k] for k in idx])
        # cubic Lagrange through the four surrounding nodes
        out = np.zeros(vals.shape[1])
        for m in range(4):
            L = 1.0
            for n in range(4):
                if n != m:
                    L *= (u - us[n]) / (us[m] - us[n])
            out += L * vals[m]
        a_i = _DOMAIN_A[domain] * chart.a
        T = out[0] - a_i * u
        fh_bar = -out[1] / T
        fz_bar = out[2:] / T + f_zC
        return fh_bar, fz_bar, T


def averaged_rhs(sys: SystemDef, domain, h, z, cache: AveragedCache = None):
    """(fh_bar, fz_bar) at one (domain, h, z); see :class:`AveragedCache`."""
    if cache is None:
        cache = AveragedCache(sys)
    fh_bar, fz_bar, _ = cache.rhs(domain, h, np.atleast_1d(z))
    return fh_bar, fz_bar


def _arrival_remainder(domain, h_edge, T_edge, fh_bar, fz_bar, f_zC, a):
    """Closed-form (dtau, dz) from h = h_edge to h = 0.

    Uses the local model T(h) = -a_i ln|h| + b_eff with b_eff matched at
    the edge, and dtau = -T dh / Theta_eff with Theta_eff, A_eff frozen
    at the edge; the neglected variation is O(h_edge^2 ln h_edge).
    """
    hs = abs(h_edge)
    a_i = _DOMAIN_A[domain] * a
    b_eff = T_edge + a_i * math.log(hs)
    theta_eff = -T_edge * fh_bar
    A_eff = T_edge * (fz_bar - f_zC)
    dtau = (a_i * hs * (1.0 - math.log(hs)) + b_eff * hs) / theta_eff
    dz = f_zC * dtau + A_eff * hs / theta_eff
    return dtau, dz


def solve_averaged(sys: SystemDef, init: AveragedState, route,
                   tau_limit=None, cache: AveragedCache = None,
                   rtol=1e-10, atol=1e-13, h_floor=None,
                   tau_span_cap=1e4, h_final=None) -> AveragedSolution:
    """Integrate the first-order averaged system along ``route``.

    Each leg but the last runs until arrival (h -> 0); the continuation
    restarts in the next domain from (h, z) = (0, z(tau_*)).  The final
    leg stops at ``tau_limit`` when given (before or after init.tau --
    backward integration is supported), at |h| = |h_final| when that is
    given, otherwise at its own arrival.
    """
    if cache is None:
        cache = AveragedCache(sys)
    route = tuple(route)
    if not route:
        raise ModelError("route must name at least one domain")
    dim_z = sys.dim_z
    z0 = np.atleast_1d(np.asarray(init.z, dtype=float))
    if h_floor is None:
        # the closed-form remainder below the floor has relative error
        # O(h_floor ln h_floor), i.e. ~1e-6 of the O(h_floor ln h_floor)
        # remainder itself -- far below the solver tolerance
        h_floor = 1e-7 * max(abs(init.h), 1.0)

    legs = []
    tau_star = math.nan
    z_star = np.full(dim_z, math.nan)
    tau, h, z = float(init.tau), float(init.h), z0.copy()

    for li, domain in enumerate(route):
        last = li == len(route) - 1
        to_arrival = not (last and tau_limit is not None)
        sign_h = 1.0 if domain == "G3" else -1.0

        def hit_final(t, y, _sign=sign_h):
            return _sign * y[0] - abs(h_final)

        hit_final.terminal = True
        hit_final.direction = 0.0

        if li > 0 or h == 0.0:
            # restart just off the separatrix, entry remainder in closed form
            if h == 0.0 and math.isnan(tau_star):
                tau_star, z_star = tau, z.copy()
            h_edge = sign_h * h_floor
            fh_bar, fz_bar, T_edge = cache.rhs(domain, h_edge, z)
            _, _, f_zC = cache.closures_at(z)
            chart = cache.chart_at(z)
            dtau, dz = _arrival_remainder(domain, h_edge, T_edge, fh_bar,
                                          fz_bar, f_zC, chart.a)
            tau, h, z = tau + dtau, h_edge, z + dz

        deep_cap = 2.0 * max(abs(h),
                             abs(h_final) if (last and h_final is not None)
                             else 0.0, 10.0 * h_floor)

        def rhs(t, y, _sign=sign_h, _domain=domain, _cap=deep_cap):
            # the solver probes trial points past the terminal events;
            # clamp |h| between the floor and a deep-side cap so the
            # orbit stays constructible (e.g. above the well bottom)
            h_val = y[0]
            if _sign * h_val < h_floor:
                h_val = _sign * h_floor
            elif _sign * h_val > _cap:
                h_val = _sign * _cap
            fh_bar, fz_bar, _ = cache.rhs(_domain, h_val, y[1:])
            return np.concatenate([[fh_bar], fz_bar])

        def hit_floor(t, y, _sign=sign_h):
            # signed form: monotone through the floor even if the solver
            # strides across h = 0 in one trial step
            return _sign * y[0] - h_floor

        hit_floor.terminal = True
        hit_floor.direction = -1

        if to_arrival:
            span = (tau, tau + tau_span_cap)
            events = [hit_floor]
            if last and h_final is not None:
                events = [hit_floor, hit_final]
        else:
            span = (tau, float(tau_limit))
            events = [hit_floor]
            if abs(span[1] - span[0]) < 1e-15:
                legs.append(AveragedLeg(domain=domain, tau=np.array([tau]),
                                        h=np.array([h]),
                                        z=np.array([z.copy()])))
                break
        sol = solve_ivp(rhs, span, np.concatenate([[h], z]), method="DOP853",
                        rtol=rtol, atol=atol, events=events,
                        dense_output=True)
        if not sol.success and not sol.t_events[0].size:
            raise ModelError(f"averaged integration failed: {sol.message}")
        ts = sol.t
        ys = sol.y
        legs.append(AveragedLeg(domain=domain, tau=ts.copy(),
                                h=ys[0].copy(), z=ys[1:].T.copy()))
        tau, h, z = float(ts[-1]), float(ys[0, -1]), ys[1:, -1].copy()

        if sol.t_events[0].size:
            # at the floor: add the closed-form remainder to h = 0
            te = float(sol.t_events[0][0])
            ye = sol.y_events[0][0]
            tau, h, z = te, float(ye[0]), ye[1:].copy()
            fh_bar, fz_bar, T_edge = cache.rhs(domain, h, z)
            _, _, f_zC = cache.closures_at(z)
            chart = cache.chart_at(z)
            dtau, dz = _arrival_remainder(domain, h, T_edge, fh_bar, fz_bar,
                                          f_zC, chart.a)
            tau, h, z = tau + dtau, 0.0, z + dz
            if math.isnan(tau_star):
                tau_star, z_star = tau, z.copy()
        elif to_arrival and not (len(sol.t_events) > 1
                                 and sol.t_events[1].size):
            raise ModelError(
                f"averaged solution in {domain} never reached the separatrix")

    return AveragedSolution(route=route, legs=tuple(legs),
                            tau_star=tau_star, z_star=z_star)


def first_order_correction(sys: SystemDef, domain, h, z, phi,
                           chart: SaddleChart = None, rtol=1e-11, atol=1e-13):
    """(u_h1, u_z1): the (t - T/2)-weighted averages from the phi-point.

    phi in [0, 2pi) selects the start point at arc-time phi*T/(2pi) from
    the section; u_h1 uses f_h and u_z1 uses F_z (component-wise).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if chart is None:
        chart = find_saddle(sys, z)
    f_h, Fz_comps, _ = field_closures(sys, chart)
    orbit = periodic_orbit(sys, chart, domain, h, rtol=rtol, atol=atol)
    T = orbit.T
    start = orbit.at((phi % (2.0 * math.pi)) * T / (2.0 * math.pi))[:2]
    integrands = [lambda t, p, q: (t - T / 2.0) * f_h(p, q)]
    for Fk in Fz_comps:
        integrands.append(lambda t, p, q, Fk=Fk: (t - T / 2.0) * Fk(p, q))
    vals, _ = orbit_quadrature(sys, chart, start, T, integrands,
                               rtol=rtol, atol=atol)
    return vals[0] / T, vals[1:] / T


def action(sys: SystemDef, chart: SaddleChart, domain, h,
           rtol=1e-11, atol=1e-13):
    """(I, T): adiabatic action I = S(h, z)/(2pi) and the orbit period."""
    T, vals = orbit_average(
        sys, chart, domain, h,
        [lambda t, p, q: p * sys.dH_dp(p, q, chart.z)], rtol=rtol, atol=atol)
    return abs(vals[0]) / (2.0 * math.pi), T


def _action_gradient_z(sys, domain, h, z, step=1e-5, rtol=1e-11):
    """dI/dz at fixed h by central differences (chart recomputed per z)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    grad = np.zeros(z.size)
    for k in range(z.size):
        vals = []
        for s in (+1.0, -1.0):
            zs = z.copy()
            zs[k] += s * step
            ch = find_saddle(sys, zs)
            I, _ = action(sys, ch, domain, h, rtol=rtol)
            vals.append(I)
        grad[k] = (vals[0] - vals[1]) / (2.0 * step)
    return grad


def measure_invariant(sys: SystemDef, traj, window, eps=None,
                      n_samples=3, margin=0.0, suspect_factor=10.0,
                      rtol=1e-11) -> InvariantMeasurement:
    """Improved adiabatic invariant over a trajectory window.

    Primary method evaluates J = I - eps*(dI/dh * u_h1 + dI/dz . u_z1)
    at section events inside the window (phi = 0 there); the cross-check
    averages I(h(t), z(t)) over one full rotation between consecutive
    events.  ``traj`` must expose ``eval(t) -> (p, q, z)`` and
    ``events`` with fields t, h, z, domain (a simulate.TrajectoryRecord
    works; so does any duck-typed stand-in).
    """
    if eps is None:
        eps = getattr(traj, "eps")
    t_a, t_b = window
    events = [ev for ev in traj.events if t_a <= ev.t <= t_b]
    if not events:
        raise ModelError("no section events inside the measurement window")
    domain = events[0].domain
    if any(ev.domain != domain for ev in events):
        raise ModelError("measurement window spans a domain change")
    # only the domain's own section ray carries the phi = 0 anchor
    want = "eta" if domain == "G3" else "xi"
    filtered = [ev for ev in events
                if getattr(ev, "section", want) == want]
    if filtered:
        events = filtered
    picks = [events[int(round(i))] for i in
             np.linspace(0, len(events) - 1, min(n_samples, len(events)))]
    seen = set()

    J_vals = []
    for ev in picks:
        if ev.t in seen:
            continue
        seen.add(ev.t)
        z = np.atleast_1d(np.asarray(ev.z, dtype=float))
        chart = find_saddle(sys, z)
        h = float(ev.h)
        if margin > 0.0 and abs(h) < margin:
            raise ModelError(
                f"window touches the separatrix margin (|E| = {abs(h):.3g})")
        I, T = action(sys, chart, domain, h, rtol=rtol)
        if eps == 0.0:
            J_vals.append(I)
            continue
        u_h1, u_z1 = first_order_correction(sys, domain, h, z, 0.0,
                                            chart=chart, rtol=rtol)
        dI_dh = T / (2.0 * math.pi)
        dI_dz = _action_gradient_z(sys, domain, h, z, rtol=rtol)
        J_vals.append(I - eps * (dI_dh * u_h1 + float(np.dot(dI_dz, u_z1))))
    J_vals = np.array(J_vals)
    J = float(np.mean(J_vals))
    scatter = float(np.max(np.abs(J_vals - J))) if len(J_vals) > 1 else 0.0

    # cross-check: trapezoid average of I over one period (periodic rule)
    if len(events) >= 2:
        t0, t1 = events[0].t, events[1].t
    else:
        _, T0 = action(sys, find_saddle(sys, np.atleast_1d(picks[0].z)),
                       domain, float(picks[0].h), rtol=rtol)
        t0, t1 = picks[0].t, picks[0].t + T0
    ts = np.linspace(t0, t1, 9)[:-1]
    I_samples = []
    for t in ts:
        p, q, z = traj.eval(t)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        chart = find_saddle(sys, z)
        h = float(sys.H(p, q, z) - chart.h_C)
        I, _ = action(sys, chart, domain, h, rtol=rtol)
        I_samples.append(I)
    J_avg = float(np.mean(I_samples))

    if eps > 0.0 and abs(J - J_avg) > suspect_factor * eps * eps:
        raise MeasurementSuspect(
            f"u1-corrected J = {J:.12g} vs period-averaged {J_avg:.12g} "
            f"differ by {abs(J - J_avg):.3g} > {suspect_factor}*eps^2")
    return InvariantMeasurement(window=(t_a, t_b), J=J,
                                J_period_averaged=J_avg,
                                method="u1-corrected", scatter=scatter,
                                samples=len(J_vals))
