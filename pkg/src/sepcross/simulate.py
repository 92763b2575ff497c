"""Full-system integration, crossing extraction and sweep drivers.

Integration runs without solver-side section events: the dense solution
is scanned on a grid finer than a quarter rotation, sign changes of the
section functions are bracketed there, and each event is root-polished
against the exact instantaneous saddle chart.  This keeps the hot
integration loop free of chart bookkeeping while still locating events
to 1e-12 in t.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize_scalar

from .errors import (FitDiverged, ModelError, NotCaptured, SepcrossError,
                     UnsupportedRegime)
from .model import State, SystemDef
from .portrait import _rot90, find_saddle, periodic_orbit
from .averaging import AveragedSolution
from . import jump as jump_mod

_DEFAULT_RTOL = 1e-12
_DEFAULT_ATOL = 1e-14


@dataclass(frozen=True)
class SectionEvent:
    t: float
    p: float
    q: float
    z: np.ndarray
    h: float                 # E = H - h_C at the event
    section: str             # "eta" | "xi"
    domain: str              # "G1" | "G2" | "G3"
    direction: int           # sign of d/dt (section function)


@dataclass
class TrajectoryRecord:
    model: str
    eps: float
    init: State
    t_end: float
    t_grid: np.ndarray
    y_grid: np.ndarray       # (n, 2 + dim_z)
    E_grid: np.ndarray
    events: list
    termination: str
    segments: list = field(default_factory=list, repr=False)

    def eval(self, t):
        """(p, q, z) from the dense solution."""
        for (t0, t1, sol) in self.segments:
            if t0 - 1e-12 <= t <= t1 + 1e-12:
                y = sol(t)
                return float(y[0]), float(y[1]), y[2:].copy()
        raise ModelError(f"t = {t} outside the integrated span")


class _ChartTracker:
    """Charts along a z path, refreshed when z drifts past a threshold."""

    def __init__(self, sys, z0, ztol=1e-3):
        self.sys = sys
        self.ztol = ztol
        self._z = None
        self._chart = None
        self.refresh(z0)

    def refresh(self, z):
        seed = None
        if self._chart is not None:
            seed = (self._chart.p_C, self._chart.q_C)
        self._chart = find_saddle(self.sys, z, seed=seed)
        self._z = np.atleast_1d(np.asarray(z, dtype=float)).copy()
        return self._chart

    def at(self, z, exact=False):
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if self.sys.saddle_is_fixed and self.sys.autonomous and \
                self._chart is not None:
            return self._chart
        if exact or np.max(np.abs(z - self._z)) > self.ztol:
            return self.refresh(z)
        return self._chart


def _full_rhs(sys, eps):
    if sys.fused_rhs is not None:
        fused = sys.fused_rhs
        return lambda t, y: fused(t, y, eps)

    def rhs(t, y):
        p, q = y[0], y[1]
        z = y[2:]
        pd = -sys.dH_dq(p, q, z) + eps * sys.f_p(p, q, z, eps)
        qd = sys.dH_dp(p, q, z) + eps * sys.f_q(p, q, z, eps)
        zd = eps * np.asarray(sys.f_z(p, q, z, eps), dtype=float)
        return np.concatenate([[pd, qd], zd])

    return rhs


def _well_section_direction(sys, chart, side):
    """Sign of d(g_xi)/dt for the saddle-side crossing of the xi ray.

    From the linearized flow at the saddle: v = M (side * e_xi) with
    M = [[-H_pq, -H_qq], [H_pp, H_pq]] in (p, q) coordinates.
    """
    H_pp, H_pq, H_qq = sys.d2H(chart.p_C, chart.q_C, chart.z)
    e = side * chart.e_xi
    v = np.array([-H_pq * e[0] - H_qq * e[1], H_pp * e[0] + H_pq * e[1]])
    n_xi = _rot90(chart.e_xi)
    return 1 if float(n_xi @ v) > 0.0 else -1


def _section_values(sys, chart, p, q, z):
    """(g_eta, g_xi, E) against one frozen chart; accepts arrays."""
    n_eta = _rot90(chart.e_eta)
    n_xi = _rot90(chart.e_xi)
    dp = p - chart.p_C
    dq = q - chart.q_C
    g_eta = dp * n_eta[0] + dq * n_eta[1]
    g_xi = dp * n_xi[0] + dq * n_xi[1]
    E = sys.H(p, q, z) - chart.h_C
    return g_eta, g_xi, E


def integrate_full(sys: SystemDef, init: State, eps: float, t_end: float,
                   rtol=_DEFAULT_RTOL, atol=_DEFAULT_ATOL, h_stop=None,
                   sample_dt=None, chart_ztol=0.02,
                   t_cap=None) -> TrajectoryRecord:
    """Integrate (1-dof + slow variables) with section-event extraction.

    ``h_stop``: terminate once E drops below this value (post-capture
    early exit).  Events are crossings of the section lines through the
    instantaneous saddle; only ray-side eta crossings are kept, both
    xi-ray sides are kept and tagged by domain.
    """
    if t_cap is not None and t_end > t_cap:
        raise ModelError(f"t_end = {t_end} exceeds the configured cap {t_cap}")
    z0 = np.atleast_1d(np.asarray(init.z, dtype=float))
    if not sys.in_box(init.p, init.q, z0):
        raise ModelError("initial state outside the model box")
    rhs = _full_rhs(sys, eps)
    tracker = _ChartTracker(sys, z0, ztol=chart_ztol)
    if sample_dt is None:
        sample_dt = 0.35 / tracker.at(z0).lam

    if sys.saddle_is_fixed:
        # the saddle point never moves, so h_C(z) is exact and the event
        # function stays continuous (a tracker refresh would step it)
        _pC, _qC = tracker.at(z0).p_C, tracker.at(z0).q_C

        def stop_E(t, y):
            return (sys.H(y[0], y[1], y[2:])
                    - sys.H(_pC, _qC, y[2:]) - h_stop)
    else:
        def stop_E(t, y):
            chart = tracker.at(y[2:])
            return sys.H(y[0], y[1], y[2:]) - chart.h_C - h_stop

    stop_E.terminal = True
    stop_E.direction = -1

    def leave_box(t, y):
        g = 1.0
        bp = sys.box.get("p")
        bq = sys.box.get("q")
        if bp is not None:
            g *= (y[0] - bp[0]) * (bp[1] - y[0]) / (bp[1] - bp[0]) ** 2
        if bq is not None:
            g *= (y[1] - bq[0]) * (bq[1] - y[1]) / (bq[1] - bq[0]) ** 2
        return g

    leave_box.terminal = True
    leave_box.direction = -1

    events = [leave_box] + ([stop_E] if h_stop is not None else [])
    y0 = np.concatenate([[init.p, init.q], z0])
    sol = solve_ivp(rhs, (init.t, init.t + t_end), y0, method="DOP853",
                    rtol=rtol, atol=atol, events=events, dense_output=True)
    if sol.status == -1:
        raise ModelError(f"integration failed: {sol.message}")
    termination = "t_end"
    if sol.t_events[0].size:
        termination = "box_exit"
    elif h_stop is not None and sol.t_events[1].size:
        termination = "h_stop"
    t1 = float(sol.t[-1])
    segments = [(float(sol.t[0]), t1, sol.sol)]

    # ----- post-hoc event scan -------------------------------------------
    n = max(int(math.ceil((t1 - init.t) / sample_dt)), 8)
    t_grid = np.linspace(init.t, t1, n + 1)
    yg = sol.sol(t_grid)
    p_g, q_g = yg[0], yg[1]
    z_g = yg[2:]
    g_eta = np.empty(n + 1)
    g_xi = np.empty(n + 1)
    E_g = np.empty(n + 1)
    for i in range(n + 1):
        chart = tracker.at(z_g[:, i])
        ge, gx, E = _section_values(sys, chart, p_g[i], q_g[i], z_g[:, i])
        g_eta[i], g_xi[i], E_g[i] = ge, gx, E

    def g_exact(t, which):
        y = sol.sol(t)
        chart = tracker.at(y[2:], exact=not sys.autonomous)
        ge, gx, _ = _section_values(sys, chart, y[0], y[1], y[2:])
        return ge if which == "eta" else gx

    raw = []
    for which, g_arr in (("eta", g_eta), ("xi", g_xi)):
        idx = np.nonzero(np.sign(g_arr[:-1]) * np.sign(g_arr[1:]) < 0)[0]
        for i in idx:
            ta = t_grid[max(i - 1, 0)] if g_exact(t_grid[i], which) \
                * g_arr[i] < 0 else t_grid[i]
            tb = t_grid[min(i + 2, n)] if g_exact(t_grid[i + 1], which) \
                * g_arr[i + 1] < 0 else t_grid[i + 1]
            try:
                te = brentq(g_exact, ta, tb,
                            args=(which,), xtol=1e-12, rtol=8.9e-16)
            except ValueError:
                continue          # grazing sign change against the exact chart
            raw.append((te, which, 1 if g_arr[i + 1] > g_arr[i] else -1))
    raw.sort()

    out = []
    for te, which, direction in raw:
        y = sol.sol(te)
        z = y[2:].copy()
        chart = tracker.at(z, exact=not sys.autonomous)
        E = float(sys.H(y[0], y[1], z) - chart.h_C)
        dp = np.array([y[0] - chart.p_C, y[1] - chart.q_C])
        if which == "eta":
            if float(dp @ chart.e_eta) <= 0.0:
                continue          # opposite half of the eta line
            domain = "G3"
        else:
            side = float(dp @ chart.e_xi)
            domain = "G3" if E > 0 else ("G2" if side > 0 else "G1")
            if E <= 0 and direction != _well_section_direction(
                    sys, chart, 1.0 if side > 0 else -1.0):
                # a closed well orbit meets the ray twice per rotation;
                # the section counts the saddle-side directed crossing
                continue
        out.append(SectionEvent(t=float(te), p=float(y[0]), q=float(y[1]),
                                z=z, h=E, section=which, domain=domain,
                                direction=direction))

    return TrajectoryRecord(model=sys.name, eps=eps, init=init, t_end=t1,
                            t_grid=t_grid, y_grid=yg.T, E_grid=E_g,
                            events=out, termination=termination,
                            segments=segments)


@dataclass(frozen=True)
class CrossingRecord:
    target: int              # capture domain index, 1 or 2
    t0: float                # last eta event with h > 0
    h0: float
    z0: np.ndarray
    tp0: float               # first xi event in the capture domain
    hp0: float
    zp0: np.ndarray
    xi3: float
    xi_i: float
    valid: bool              # pseudo-phase window flag
    ambiguous: bool          # re-crossing within the settling rounds
    dh_series: np.ndarray    # h increments over the last G3 rounds


def extract_crossing(traj: TrajectoryRecord,
                     coeffs, k: float = 3.0) -> CrossingRecord:
    """Measured crossing data against a coefficient bundle at z_*."""
    eta = [ev for ev in traj.events if ev.section == "eta"]
    if not eta:
        raise NotCaptured("no eta-section events in the trajectory")
    t0_ev = eta[-1]
    if t0_ev.h <= 0:
        raise NotCaptured("trajectory never approached from G3")
    post = [ev for ev in traj.events
            if ev.section == "xi" and ev.t > t0_ev.t and ev.h < 0]
    if len(post) < 3:
        raise NotCaptured("no settled capture after the last approach")
    first = post[0]
    target = 1 if first.domain == "G1" else 2
    settle = post[:3]
    ambiguous = any(ev.domain != first.domain for ev in settle)
    # escape back to G3 before the final approach also taints the run
    ambiguous = ambiguous or any(
        ev.section == "xi" and ev.h < 0 and ev.t < t0_ev.t
        for ev in traj.events)

    eps = traj.eps
    theta_i = coeffs.theta[target - 1]
    pp = jump_mod.pseudo_phase(t0_ev.h, eps, coeffs, target, k=k)
    xi3 = pp.xi3
    xi_i = -first.h / (eps * theta_i)
    valid = pp.valid and not ambiguous

    hs = np.array([ev.h for ev in eta[-11:]])
    return CrossingRecord(target=target, t0=t0_ev.t, h0=t0_ev.h,
                          z0=t0_ev.z.copy(), tp0=first.t, hp0=first.h,
                          zp0=first.z.copy(), xi3=xi3, xi_i=xi_i,
                          valid=valid, ambiguous=ambiguous,
                          dh_series=np.diff(hs))


def _round_mean_E(sys, traj, ta, tb, tracker, n_sub=64):
    ts = np.linspace(ta, tb, n_sub, endpoint=False)
    total = 0.0
    for t in ts:
        p, q, z = traj.eval(t)
        chart = tracker.at(z)
        total += sys.H(p, q, z) - chart.h_C
    return total / n_sub


def rotation_averages(sys: SystemDef, traj: TrajectoryRecord, window,
                      n_sub=64):
    """[(t_mid, mean E)] per full rotation inside the window."""
    t_a, t_b = window
    evs = [ev for ev in traj.events if t_a <= ev.t <= t_b]
    if not evs:
        raise ModelError("no section events inside the window")
    domain = evs[0].domain
    want = "eta" if domain == "G3" else "xi"
    evs = [ev for ev in evs if ev.domain == domain and ev.section == want]
    if len(evs) < 2:
        raise ModelError("window too short: no full rotation")
    tracker = _ChartTracker(sys, evs[0].z)
    out = []
    for k in range(len(evs) - 1):
        ta, tb = evs[k].t, evs[k + 1].t
        out.append((0.5 * (ta + tb),
                    _round_mean_E(sys, traj, ta, tb, tracker, n_sub)))
    return domain, out


def fit_time_shift(sys: SystemDef, traj: TrajectoryRecord,
                   avg: AveragedSolution, window, bound=0.2,
                   min_rounds=5, rounds=None) -> float:
    """Slow-time shift minimizing the round-averaged h mismatch.

    Returns dtau such that the measured rotation-averaged h matches
    h_bar(eps*t + dtau) on the window; golden-section to 1e-10.
    Precomputed ``rounds`` ([(t_mid, mean E)]) skip the rotation
    averaging; ``traj`` then only supplies ``eps``.
    """
    if rounds is None:
        _, rounds = rotation_averages(sys, traj, window)
    if len(rounds) < min_rounds:
        raise ModelError(
            f"window holds {len(rounds)} rounds; need >= {min_rounds}")
    taus = np.array([traj.eps * tm for tm, _ in rounds])
    h_meas = np.array([hm for _, hm in rounds])

    def mismatch(dtau):
        try:
            h_pred = np.array([avg.state(tau + dtau).h for tau in taus])
        except ModelError:
            return 1e6
        return float(np.mean((h_meas - h_pred) ** 2))

    res = minimize_scalar(mismatch, bracket=(-bound, 0.0, bound),
                          method="golden", options={"xtol": 1e-10})
    if not np.isfinite(res.x) or mismatch(res.x) >= 1e6:
        raise FitDiverged("time-shift fit did not converge")
    return float(res.x)


# ---------------------------------------------------------------------------
# Sweep drivers
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    kind: str
    rows: list               # list of dicts, ordered by run id
    meta: dict

    COLUMNS = ("run_id", "eps", "phi0", "xi3", "xi_i", "target",
               "measured_jump", "predicted_jump", "predicted_baseline",
               "valid", "error")
    EXTRA = ("xi_i_meas", "bracket_term", "anchor_z3",
             "measured_z0", "predicted_z0",
             "measured_zp0", "predicted_zp0", "predicted_zp0_avg")

    def columns(self):
        extra = [c for c in self.EXTRA
                 if any(c in row for row in self.rows)]
        return list(self.COLUMNS) + extra

    def to_csv(self, path):
        cols = self.columns()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in cols])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (np.floating, np.integer)):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return v


def phase_starts(sys: SystemDef, chart, h_init, z0, phases):
    """Initial states on the G3 orbit E = h_init at the given phases."""
    orbit = periodic_orbit(sys, chart, "G3", h_init)
    T = orbit.T
    out = []
    for phi in phases:
        y = orbit.at((phi % (2.0 * math.pi)) * T / (2.0 * math.pi))
        out.append(State(p=float(y[0]), q=float(y[1]),
                         z=np.atleast_1d(z0).astype(float), t=0.0))
    return out, T


def _parallel_map(fn, items):
    """Order-preserving map over independent run tasks.

    SEPCROSS_THREADS caps the worker count (default 1 = serial); results
    are merged in task order, so the output is identical either way.
    """
    try:
        n = int(os.environ.get("SEPCROSS_THREADS", "1"))
    except ValueError:
        n = 1
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _well_depth(sys, chart):
    """Smallest |E| at the well bottoms along the two section rays."""
    from scipy.optimize import minimize_scalar
    from .portrait import _energy_along_ray, ray_direction

    depth = math.inf
    for dom in ("G1", "G2"):
        e = ray_direction(chart, dom)
        res = minimize_scalar(
            lambda r: _energy_along_ray(sys, chart, e, r),
            bounds=(1e-8 * chart.scale, 10.0 * chart.scale),
            method="bounded")
        depth = min(depth, abs(float(res.fun)))
    return depth


def _sweep_scales(coeffs, eps, depth, h_init_min=0.1):
    """(h_init, h_stop, t_end) heuristics for one sweep run.

    Both energy scales are set in units of rounds (eps * Theta) so they
    adapt to the model: enough approach rounds for the pre-crossing fits
    and enough captured rounds for the post-crossing ones, capped by the
    well depth.
    """
    th3 = coeffs.theta[2]
    th_min = float(np.min(coeffs.theta[:2]))
    rounds_in = min(max(h_init_min / (eps * th3), 20.0), 60.0)
    h_init = rounds_in * eps * th3
    rounds_post = min(max(0.035 / (eps * th_min), 6.5), 28.0)
    h_stop = -min(0.35 * depth, rounds_post * eps * th_min)
    T_est = -2.0 * coeffs.a * math.log(eps * th3) + abs(coeffs.b[2]) + 8.0
    n_rounds = rounds_in + abs(h_stop) / (eps * th_min) + 12.0
    t_end = 1.8 * T_est * n_rounds
    return h_init, h_stop, t_end


def _anchored_pre_shift(sys, traj, avg, coeffs, eps, h_init, t_cross):
    """(d_pre, d_star): window fit and its drift extrapolation to t_cross.

    The run and the first-order averaged solution drift apart at an
    O(eps) rate per unit slow time; two sub-window fits estimate the
    rate, and d_star extrapolates the shift to the crossing time.
    """
    th3 = coeffs.theta[2]
    lo, hi = 4.0 * eps * th3, 0.96 * h_init
    eta = [ev for ev in traj.events
           if ev.section == "eta" and lo <= ev.h <= hi]
    if len(eta) < 7:
        raise ModelError("too few approach rounds for the anchored fit")
    split = math.sqrt(lo * hi)
    w1 = [ev for ev in eta if ev.h >= split]
    w2 = [ev for ev in eta if ev.h < split]
    d_pre = fit_time_shift(sys, traj, avg, (eta[0].t, eta[-1].t),
                           min_rounds=5)
    if len(w1) < 4 or len(w2) < 4:
        return d_pre, d_pre
    d1 = fit_time_shift(sys, traj, avg, (w1[0].t, w1[-1].t), min_rounds=3)
    d2 = fit_time_shift(sys, traj, avg, (w2[0].t, w2[-1].t), min_rounds=3)
    tc1 = eps * 0.5 * (w1[0].t + w1[-1].t)
    tc2 = eps * 0.5 * (w2[0].t + w2[-1].t)
    slope = (d2 - d1) / (tc2 - tc1)
    return d_pre, d2 + slope * (eps * t_cross - tc2)


def sweep_time_shift(sys: SystemDef, eps_list, n_phases, coeffs=None,
                     k=3.0, z0=None, h_init_min=0.1,
                     rtol=1e-10, atol=1e-12, progress=None) -> SweepResult:
    """Phase sweep measuring the slow-time jump across the crossing.

    Per run: fit the time shift of the rotation-averaged energy against
    the glued averaged solution before and after the crossing; the
    measured jump is d_pre - d_post (the post-crossing anchor moves
    opposite to the fitted shift).  Prediction columns come from the
    closed-form jump at the measured crossing energy; boundary-layer
    section predictors ride along for first-loop captures.
    """
    from .coeffs import bundle
    from .averaging import AveragedCache, AveragedState, solve_averaged

    if z0 is None:
        z0 = np.zeros(sys.dim_z)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if coeffs is None:
        coeffs = bundle(sys, z0)
    chart = find_saddle(sys, z0)
    depth = _well_depth(sys, chart)
    cache = AveragedCache(sys)
    rows = []
    run_id = 0
    for eps in eps_list:
        h_init, h_stop, t_end = _sweep_scales(coeffs, eps, depth,
                                              h_init_min=h_init_min)
        base = {}
        for tgt, dom in ((1, "G1"), (2, "G2")):
            base[tgt] = solve_averaged(
                sys, AveragedState(h=h_init, z=z0, tau=0.0), ["G3", dom],
                cache=cache, h_final=1.35 * h_stop)
        phases = [2.0 * math.pi * (i + 0.5) / n_phases
                  for i in range(n_phases)]
        starts, _ = phase_starts(sys, chart, h_init, z0, phases)

        def one_run(task, _eps=eps, _h_init=h_init, _h_stop=h_stop,
                    _t_end=t_end, _base=base):
            rid, phi, st = task
            row = {"run_id": rid, "eps": _eps, "phi0": phi, "error": None,
                   "valid": False}
            try:
                traj = integrate_full(sys, st, _eps, _t_end, rtol=rtol,
                                      atol=atol, h_stop=_h_stop)
                cr = extract_crossing(traj, coeffs, k=k)
                pp = jump_mod.pseudo_phase(cr.h0, _eps, coeffs, cr.target,
                                           k=k)
                pred = jump_mod.jump_slow(coeffs, pp, _eps, force=True)
                avg = _base[cr.target]
                d_pre, d_star = _anchored_pre_shift(
                    sys, traj, avg, coeffs, _eps, _h_init, cr.t0)
                well = [ev for ev in traj.events
                        if ev.section == "xi" and ev.h < 0]
                post = well[2:]
                d_post = fit_time_shift(sys, traj, avg,
                                        (post[0].t, post[-1].t),
                                        min_rounds=3)
                row.update(xi3=pp.xi3, xi_i=pp.xi_i, xi_i_meas=cr.xi_i,
                           target=cr.target,
                           measured_jump=d_pre - d_post,
                           predicted_jump=pred.dtau,
                           valid=bool(cr.valid))
                if cr.target == coeffs.first_loop:
                    z3s = avg.tau_star - d_star
                    bp = jump_mod.boundary_predictors(
                        coeffs, pp, _eps, z3_star=[z3s],
                        zi_star=[z3s + pred.dz[0]])
                    row.update(anchor_z3=z3s,
                               measured_z0=float(cr.z0[0]),
                               predicted_z0=float(bp.z0[0]),
                               measured_zp0=float(cr.zp0[0]),
                               predicted_zp0=float(bp.zp0[0]),
                               predicted_zp0_avg=float(bp.zp0_from_avg[0]))
            except SepcrossError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            return row

        tasks = [(run_id + i, phi, st)
                 for i, (phi, st) in enumerate(zip(phases, starts))]
        run_id += len(tasks)
        for row in _parallel_map(one_run, tasks):
            rows.append(row)
            if progress:
                progress(row)
    return SweepResult(kind="time_shift", rows=rows,
                       meta={"model": sys.name, "eps": list(eps_list),
                             "n_phases": n_phases, "k": k,
                             "h_init_min": h_init_min})


def sweep_invariant(sys: SystemDef, eps_list, n_phases, k=3.0, z0=None,
                    h_init_min=0.1, rtol=1e-10, atol=1e-12,
                    rotate_deg=0.0, flip=False,
                    progress=None) -> SweepResult:
    """Phase sweep measuring the adiabatic-invariant jump (Hamiltonian
    modes).

    The prediction reconstructs S_i at the arrival point from the
    measured pre-crossing invariant and adds the closed-form jump; the
    slow-fast mode includes the area-bracket term.  Anchors use the base
    averaged solution only: the reconstruction S_i - theta_i3 S_3 is
    first-order insensitive to a common anchor shift because
    dS_i/dtau = Theta_i cancels against theta_i3 * Theta_3.
    """
    from .coeffs import bundle, area_gradients
    from .averaging import (AveragedCache, AveragedState, measure_invariant,
                            solve_averaged)

    if sys.mode not in ("hamiltonian_time", "slow_fast"):
        raise ModelError("invariant sweep needs a Hamiltonian mode")
    if z0 is None:
        z0 = np.zeros(sys.dim_z)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    chart0 = find_saddle(sys, z0)
    cache = AveragedCache(sys)
    rows = []
    run_id = 0
    meta_eps = {}
    depth = _well_depth(sys, chart0)
    probe = bundle(sys, z0, rotate_deg=rotate_deg, flip=flip)
    th_min0 = float(np.min(probe.theta[:2]))
    for eps in eps_list:
        # arrival point of the base averaged solution; coefficients and
        # areas evaluated there
        h_init, h_stop, t_end = _sweep_scales(probe, eps, depth,
                                              h_init_min=h_init_min)
        # invariants are measured away from the separatrix, where the
        # first-order-corrected invariant has settled: go deep into the
        # well and extend the time budget for the extra rounds
        h_stop = -0.35 * depth
        extra = (abs(h_stop) / (eps * th_min0)) * (
            -2.0 * probe.a * math.log(eps * probe.theta[2])
            + abs(probe.b[2]) + 8.0)
        t_end = t_end + 1.8 * extra
        # only the arrival point feeds the predictions, so a loose solve
        # is plenty (the reconstruction S_i - theta_i3 S_3 is first-order
        # insensitive to anchor errors anyway)
        base3 = solve_averaged(sys, AveragedState(h=h_init, z=z0, tau=0.0),
                               ["G3"], cache=cache, rtol=1e-8)
        z_star = base3.z_star
        coeffs = bundle(sys, z_star, rotate_deg=rotate_deg, flip=flip)
        bracket = {1: None, 2: None}
        if sys.mode == "slow_fast":
            grad_S = area_gradients(sys, z_star)
            bracket = {i: jump_mod.area_bracket(grad_S, i) for i in (1, 2)}
        meta_eps[repr(eps)] = {"z_star": list(map(float, z_star)),
                               "tau_star": float(base3.tau_star)}
        phases = [2.0 * math.pi * (i + 0.5) / n_phases
                  for i in range(n_phases)]
        starts, _ = phase_starts(sys, chart0, h_init, z0, phases)
        th3 = coeffs.theta[2]

        def one_run(task, _eps=eps, _h_init=h_init, _h_stop=h_stop,
                    _t_end=t_end, _coeffs=coeffs, _bracket=bracket,
                    _th3=th3):
            rid, phi, st = task
            row = {"run_id": rid, "eps": _eps, "phi0": phi, "error": None,
                   "valid": False}
            try:
                traj = integrate_full(sys, st, _eps, _t_end, rtol=rtol,
                                      atol=atol, h_stop=_h_stop)
                cr = extract_crossing(traj, _coeffs, k=k)
                pp = jump_mod.pseudo_phase(cr.h0, _eps, _coeffs, cr.target,
                                           k=k)
                # measure both invariants away from the separatrix, where
                # the corrected invariant's residual (higher order in the
                # distance) is smallest
                lo = max(4.0 * _eps * _th3, 0.35 * _h_init)
                eta = [ev for ev in traj.events if ev.section == "eta"
                       and lo <= ev.h <= 0.96 * _h_init]
                # the cross-check average carries uncorrected O(eps^2)
                # constants that grow with the slow drift; keep the guard
                # but only against gross errors
                pre = measure_invariant(sys, traj, (eta[0].t, eta[-1].t),
                                        suspect_factor=100.0)
                well = [ev for ev in traj.events
                        if ev.section == "xi" and ev.h < 0]
                deep = [ev for ev in well if ev.h < 0.5 * _h_stop]
                if len(deep) < 4:
                    deep = well[2:]
                post = measure_invariant(sys, traj, (deep[0].t, deep[-1].t),
                                         suspect_factor=100.0)
                total, terms = jump_mod.invariant_jump(
                    _coeffs, pp, _eps, sys.mode, _coeffs.S, pre.J,
                    bracket_i3=_bracket[cr.target], force=True)
                two_pi = 2.0 * math.pi
                row.update(xi3=pp.xi3, xi_i=pp.xi_i, xi_i_meas=cr.xi_i,
                           target=cr.target,
                           measured_jump=two_pi * (post.J - pre.J),
                           predicted_jump=total - two_pi * pre.J,
                           predicted_baseline=(_coeffs.S[cr.target - 1]
                                               - two_pi * pre.J),
                           bracket_term=terms["bracket"],
                           valid=bool(cr.valid))
            except SepcrossError as exc:
                row["error"] = f"{type(exc).__name__}: {exc}"
            return row

        tasks = [(run_id + i, phi, st)
                 for i, (phi, st) in enumerate(zip(phases, starts))]
        run_id += len(tasks)
        for row in _parallel_map(one_run, tasks):
            rows.append(row)
            if progress:
                progress(row)
    return SweepResult(kind="invariant", rows=rows,
                       meta={"model": sys.name, "eps": list(eps_list),
                             "n_phases": n_phases, "k": k,
                             "per_eps": meta_eps,
                             "rotate_deg": rotate_deg, "flip": flip})


def run_sweep(sys: SystemDef, eps_list, n_phases, **kwargs) -> SweepResult:
    """Dispatch to the observable matching the model mode."""
    if sys.mode == "generic":
        return sweep_time_shift(sys, eps_list, n_phases, **kwargs)
    return sweep_invariant(sys, eps_list, n_phases, **kwargs)


@dataclass
class CaptureStats:
    eps: float
    n: int
    n_captured: dict          # {1: count, 2: count}
    n_ambiguous: int
    n_failed: int
    fraction: dict            # {1: p1, 2: p2} over settled runs
    sigma: float              # binomial std of the fraction estimate
    ks_stat: float
    ks_pvalue: float
    xi3: np.ndarray
    rows: list = field(default_factory=list)   # per-run dicts
    seed: int = 0
    theta_i3: dict = None     # {1: Theta_1/Theta_3, 2: ...} at the anchor
    z_star: np.ndarray = None  # averaged arrival point anchoring coeffs

    COLUMNS = ("run_id", "eps", "phi0", "xi3", "xi_i", "target", "valid",
               "error")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row.get(c)) for c in self.COLUMNS])


def capture_fractions(sys: SystemDef, coeffs, eps, n_runs, seed=0,
                      z0=None, h_init=None, rtol=1e-9, atol=1e-11,
                      progress=None) -> CaptureStats:
    """Monte-Carlo capture statistics over random initial phases.

    Runs terminate as soon as the capture has settled; ambiguous and
    failed runs are excluded from the fraction (and reported).  The
    crossing parameter xi3 is tested against uniformity on (0, 1).
    """
    from scipy.stats import kstest

    from .coeffs import bundle
    from .averaging import AveragedState, solve_averaged

    if coeffs.theta[0] <= 0 or coeffs.theta[1] <= 0:
        raise UnsupportedRegime(
            "capture fractions need Theta_1, Theta_2 > 0")
    if z0 is None:
        z0 = np.zeros(sys.dim_z)
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    th3 = coeffs.theta[2]
    th_min = float(np.min(coeffs.theta[:2]))
    if h_init is None:
        h_init = eps * th3 * min(max(0.05 / (eps * th3), 10.0), 25.0)
    h_stop = -6.5 * eps * th_min
    T_est = -2.0 * coeffs.a * math.log(eps * th3) + abs(coeffs.b[2]) + 8.0
    t_end = 1.8 * T_est * (1.5 * h_init / (eps * th3) + 12.0)
    chart = find_saddle(sys, z0)
    # anchor the coefficients at the averaged arrival point: when z
    # drifts, Theta_3 there (not at z0) sets the xi3 scale, and the
    # theta ratios there set the capture fractions
    base3 = solve_averaged(sys, AveragedState(h=1.25 * h_init, z=z0,
                                              tau=0.0), ["G3"], rtol=1e-8)
    z_star = base3.z_star
    if np.all(np.isfinite(z_star)) and not np.allclose(z_star, z0,
                                                       atol=1e-9):
        coeffs = bundle(sys, z_star)
        th3 = coeffs.theta[2]
    else:
        z_star = z0
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * math.pi, n_runs)
    # randomize the starting energy over several per-round energy steps:
    # the arrival pseudo-phase winds once per step, so marginalizing over
    # an energy band removes the finite-h distortion of a fixed-energy
    # start ensemble
    h_starts = h_init * rng.uniform(1.0, 1.5, n_runs)
    starts = [phase_starts(sys, chart, float(h), z0, [phi])[0][0]
              for h, phi in zip(h_starts, phases)]

    def one_run(task):
        rid, phi, st = task
        row = {"run_id": rid, "eps": eps, "phi0": float(phi), "error": None,
               "valid": False}
        try:
            traj = integrate_full(sys, st, eps, t_end, rtol=rtol, atol=atol,
                                  h_stop=h_stop)
            cr = extract_crossing(traj, coeffs)
        except SepcrossError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            return row
        if cr.ambiguous:
            row["error"] = "ambiguous: re-crossed within the settling rounds"
            return row
        row.update(xi3=cr.xi3, xi_i=cr.xi_i, target=cr.target,
                   valid=bool(cr.valid))
        return row

    rows = _parallel_map(one_run,
                         [(i, phases[i], starts[i]) for i in range(n_runs)])
    counts = {1: 0, 2: 0}
    n_amb = 0
    n_fail = 0
    xi3s = []
    for row in rows:
        if row["error"] is not None:
            if row["error"].startswith("ambiguous"):
                n_amb += 1
            else:
                n_fail += 1
            continue
        counts[row["target"]] += 1
        xi3s.append(row["xi3"])
        if progress:
            progress(row)
    n_ok = counts[1] + counts[2]
    if n_ok == 0:
        raise NotCaptured("no settled captures in the ensemble")
    frac = {1: counts[1] / n_ok, 2: counts[2] / n_ok}
    sigma = math.sqrt(max(frac[1] * frac[2], 1e-12) / n_ok)
    xi3s = np.array(xi3s)
    ks = kstest(xi3s, "uniform")
    return CaptureStats(eps=eps, n=n_runs, n_captured=counts,
                        n_ambiguous=n_amb, n_failed=n_fail, fraction=frac,
                        sigma=sigma, ks_stat=float(ks.statistic),
                        ks_pvalue=float(ks.pvalue), xi3=xi3s,
                        rows=rows, seed=seed,
                        theta_i3={1: coeffs.theta_ratio(1, 3),
                                  2: coeffs.theta_ratio(2, 3)},
                        z_star=np.asarray(z_star, dtype=float))
