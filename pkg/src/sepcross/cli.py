"""The ``sepcross`` command line tool.

Subcommands
-----------

portrait
    Saddle chart, separatrix loop polylines and areas as JSON.
coeffs
    Full coefficient bundle (with diagnostics) as JSON.
predict
    Closed-form jump prediction with the component breakdown as JSON.
simulate
    One full trajectory: section events and the extracted crossing
    record as JSON.
sweep
    Phase/epsilon sweep; writes the run table as CSV, a JSON sidecar
    with the resolved config, and a 512-point prediction-curve CSV.
capture
    Monte-Carlo capture statistics: per-run CSV plus a JSON summary.

Model files are TOML with tables ``[model]`` (either ``name`` pointing
into the catalog, or ``H``/``f_p``/``f_q``/``f_z`` expression strings
plus ``mode``/``dim_z``), ``[params]`` and ``[box]`` (keys ``p``, ``q``,
``z``).  ``--model`` also accepts a catalog name directly.

Exit codes: 0 success, 1 runtime error, 2 config error.  Failures print
a machine-readable error JSON to stdout.  The environment variable
``SEPCROSS_THREADS`` caps the sweep worker count (default 1; output is
identical regardless).
"""
from __future__ import annotations

import argparse
import json
import math
import sys as _sysmod

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:            # Python < 3.11
    import tomli as _toml

from . import __version__
from .errors import ConfigError, SepcrossError
from .model import CATALOG, State, build_system
from .portrait import find_saddle, trace_separatrices

_SUBCOMMANDS = ("portrait", "coeffs", "predict", "simulate", "sweep",
                "capture")


def _build_parser():
    ap = argparse.ArgumentParser(
        prog="sepcross",
        description="Separatrix-crossing coefficients, predictions and "
                    "validation sweeps.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True,
                        help="TOML model file or catalog model name")
    common.add_argument("--z", default=None,
                        help="slow variables, comma-separated floats "
                             "(default: zeros)")
    common.add_argument("--out", default=None, help="output file path")
    common.add_argument("--flip-sections", action="store_true",
                        help="flip the xi section ray")
    common.add_argument("--rotate-deg", type=float, default=0.0,
                        help="rotate the eta section ray (degrees)")
    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--eps", action="append", type=float, default=None,
                     help="perturbation size (repeatable)")
    run.add_argument("--k-window", type=float, default=3.0,
                     help="validity window margin k (xi3 within k*sqrt(eps))")
    run.add_argument("--tol-rel", type=float, default=None,
                     help="integrator relative tolerance")
    run.add_argument("--tol-abs", type=float, default=None,
                     help="integrator absolute tolerance")

    sub.add_parser("portrait", parents=[common],
                   help="saddle chart, loops and areas (JSON)")
    sub.add_parser("coeffs", parents=[common],
                   help="coefficient bundle (JSON)")

    p = sub.add_parser("predict", parents=[common, run],
                       help="closed-form jump prediction (JSON)")
    p.add_argument("--target", type=int, choices=(1, 2), required=True,
                   help="capture domain")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--xi", type=float, help="pseudo-phase xi_i in (0, 1)")
    g.add_argument("--h0", type=float,
                   help="energy at the last approach section")

    p = sub.add_parser("simulate", parents=[common, run],
                       help="one full trajectory (JSON)")
    p.add_argument("--phi0", type=float, default=0.0,
                   help="initial phase on the starting orbit")
    p.add_argument("--h-init", type=float, default=None,
                   help="initial energy above the separatrix")

    p = sub.add_parser("sweep", parents=[common, run],
                       help="phase sweep (CSV + JSON sidecar + curve CSV)")
    p.add_argument("--phases", type=int, default=50,
                   help="number of initial phases per eps")

    p = sub.add_parser("capture", parents=[common, run],
                       help="Monte-Carlo capture statistics (CSV + JSON)")
    p.add_argument("--phases", type=int, default=500,
                   help="ensemble size")
    p.add_argument("--seed", type=int, default=0, help="PRNG seed")
    return ap


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_model_config(spec: str) -> dict:
    if spec in CATALOG:
        return {"name": spec}
    if not spec.endswith(".toml"):
        raise ConfigError(
            f"model {spec!r} is neither a catalog name "
            f"({', '.join(sorted(CATALOG))}) nor a .toml file")
    try:
        with open(spec, "rb") as fh:
            data = _toml.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"model file not found: {spec}")
    except _toml.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {spec}: {exc}")
    cfg = dict(data.get("model", {}))
    if not cfg:
        raise ConfigError(f"{spec} has no [model] table")
    if "params" in data:
        cfg["params"] = dict(data["params"])
    if "box" in data:
        cfg["box"] = dict(data["box"])
    return cfg


def _parse_z(text, dim_z):
    if text is None:
        return [0.0] * dim_z
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise ConfigError(f"--z must be comma-separated floats, got {text!r}")
    if len(vals) != dim_z:
        raise ConfigError(
            f"--z has {len(vals)} components; the model has dim_z = {dim_z}")
    return vals


def _resolved_config(args) -> dict:
    cfg = {"command": args.command, "model": args.model,
           "z": getattr(args, "z", None),
           "flip_sections": bool(getattr(args, "flip_sections", False)),
           "rotate_deg": float(getattr(args, "rotate_deg", 0.0))}
    for key in ("eps", "k_window", "tol_rel", "tol_abs", "phases", "seed",
                "target", "xi", "h0", "phi0", "h_init"):
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    return cfg


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_json_ready(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _write_json(path, payload, args):
    doc = {"version": __version__, "config": _resolved_config(args)}
    doc.update(payload)
    with open(path, "w") as fh:
        json.dump(_json_ready(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _eps_list(args, default=(1e-3,)):
    eps = args.eps if args.eps else list(default)
    if any(e <= 0 for e in eps):
        raise ConfigError(f"--eps values must be positive, got {eps}")
    return eps


def _int_tols(args):
    out = {}
    if args.tol_rel is not None:
        out["rtol"] = args.tol_rel
    if args.tol_abs is not None:
        out["atol"] = args.tol_abs
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_portrait(args):
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    chart = find_saddle(sys_, z, rotate_deg=args.rotate_deg,
                        flip=args.flip_sections)
    geo = trace_separatrices(sys_, chart)
    out = args.out or "portrait.json"
    _write_json(out, {
        "saddle": {"p_C": chart.p_C, "q_C": chart.q_C, "h_C": chart.h_C,
                   "lam": chart.lam, "a": chart.a,
                   "v_u": chart.v_u, "v_s": chart.v_s,
                   "e_eta": chart.e_eta, "e_xi": chart.e_xi,
                   "dh_C_dz": chart.dh_C_dz},
        "loops": {str(i): geo.loops[i] for i in (1, 2)},
        "loop_times": {str(i): geo.loop_times[i] for i in (1, 2)},
        "areas": {"S1": geo.S1, "S2": geo.S2, "S3": geo.S3},
    }, args)
    return [out]


def _bundle_for(args, sys_, z):
    from .coeffs import bundle
    return bundle(sys_, z, rotate_deg=args.rotate_deg,
                  flip=args.flip_sections)


def _coeffs_payload(co):
    return {"z": co.z, "a": co.a, "lam": co.lam, "b": co.b,
            "theta": co.theta, "A": co.A, "d": co.d, "g": co.g, "S": co.S,
            "f_zC": co.f_zC, "first_loop": co.first_loop,
            "section": co.section, "diagnostics": co.diagnostics}


def _cmd_coeffs(args):
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    co = _bundle_for(args, sys_, z)
    out = args.out or "coeffs.json"
    _write_json(out, {"coeffs": _coeffs_payload(co)}, args)
    return [out]


def _cmd_predict(args):
    from . import jump
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    eps = _eps_list(args)
    if len(eps) != 1:
        raise ConfigError("predict takes exactly one --eps")
    eps = eps[0]
    co = _bundle_for(args, sys_, z)
    if args.h0 is not None:
        h0 = args.h0
    else:
        if not 0.0 < args.xi < 1.0:
            raise ConfigError(f"--xi must be in (0, 1), got {args.xi}")
        h0 = eps * co.theta[2] * jump.xi3_from_target(co, args.target,
                                                      args.xi)
    pp = jump.pseudo_phase(h0, eps, co, args.target, k=args.k_window)
    pred = jump.jump_slow(co, pp, eps, force=True)
    payload = {
        "coeffs": _coeffs_payload(co),
        "pseudo_phase": {"xi3": pp.xi3, "xi_i": pp.xi_i, "h0": pp.h0,
                         "target": pp.target, "valid": pp.valid,
                         "window": list(pp.window)},
        "jump": {"dz": pred.dz, "dtau": pred.dtau, "terms": pred.terms},
    }
    if args.target == co.first_loop:
        bp = jump.boundary_predictors(co, pp, eps, z3_star=z,
                                      zi_star=np.asarray(z) + pred.dz)
        payload["boundary"] = {"h0": bp.h0, "hp0": bp.hp0,
                               "z0_offset": bp.z0 - np.asarray(z),
                               "zp0_offset": bp.zp0 - np.asarray(z)}
    out = args.out or "predict.json"
    _write_json(out, payload, args)
    return [out]


def _cmd_simulate(args):
    from .simulate import (_sweep_scales, _well_depth, extract_crossing,
                           integrate_full, phase_starts)
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    eps = _eps_list(args)
    if len(eps) != 1:
        raise ConfigError("simulate takes exactly one --eps")
    eps = eps[0]
    co = _bundle_for(args, sys_, z)
    chart = find_saddle(sys_, z, rotate_deg=args.rotate_deg,
                        flip=args.flip_sections)
    h_init, h_stop, t_end = _sweep_scales(co, eps, _well_depth(sys_, chart))
    if args.h_init is not None:
        h_init = args.h_init
    starts, _ = phase_starts(sys_, chart, h_init, z, [args.phi0])
    traj = integrate_full(sys_, starts[0], eps, t_end, h_stop=h_stop,
                          **_int_tols(args))
    payload = {
        "h_init": h_init, "h_stop": h_stop, "t_end": traj.t_end,
        "termination": traj.termination,
        "events": [{"t": ev.t, "p": ev.p, "q": ev.q, "z": ev.z, "h": ev.h,
                    "section": ev.section, "domain": ev.domain,
                    "direction": ev.direction} for ev in traj.events],
    }
    try:
        cr = extract_crossing(traj, co, k=args.k_window)
        payload["crossing"] = {
            "target": cr.target, "t0": cr.t0, "h0": cr.h0, "z0": cr.z0,
            "tp0": cr.tp0, "hp0": cr.hp0, "zp0": cr.zp0, "xi3": cr.xi3,
            "xi_i": cr.xi_i, "valid": cr.valid, "ambiguous": cr.ambiguous,
            "dh_series": cr.dh_series,
        }
    except SepcrossError as exc:
        payload["crossing"] = {"error": f"{type(exc).__name__}: {exc}"}
    out = args.out or "simulate.json"
    _write_json(out, payload, args)
    return [out]


def _curve_csv(path, co_by_eps, eps_list):
    import csv as _csv
    from . import jump
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(("eps", "target", "xi_i", "predicted_jump", "valid"))
        for eps in eps_list:
            co = co_by_eps[eps]
            for target in (1, 2):
                for xi, dtau, valid in jump.prediction_curve(co, eps,
                                                             target):
                    w.writerow((repr(float(eps)), target, repr(float(xi)),
                                repr(float(dtau)), "1" if valid else "0"))


def _cmd_sweep(args):
    from .simulate import run_sweep
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    eps = _eps_list(args)
    if args.phases < 1:
        raise ConfigError("--phases must be >= 1")
    kwargs = dict(z0=z, k=args.k_window, **_int_tols(args))
    if sys_.mode == "generic":
        co = _bundle_for(args, sys_, z)
        kwargs["coeffs"] = co
        co_by_eps = {e: co for e in eps}
    else:
        kwargs["rotate_deg"] = args.rotate_deg
        kwargs["flip"] = args.flip_sections
    res = run_sweep(sys_, eps, args.phases, **kwargs)
    out = args.out or "sweep.csv"
    stem = out[:-4] if out.endswith(".csv") else out
    res.to_csv(out)
    if sys_.mode != "generic":
        # curve uses the per-eps arrival-point coefficient bundles
        from .coeffs import bundle
        co_by_eps = {e: bundle(sys_, res.meta["per_eps"][repr(e)]["z_star"],
                               rotate_deg=args.rotate_deg,
                               flip=args.flip_sections) for e in eps}
    curve = stem + "_curve.csv"
    _curve_csv(curve, co_by_eps, eps)
    sidecar = stem + ".json"
    _write_json(sidecar, {"kind": res.kind, "meta": res.meta,
                          "rows": len(res.rows), "csv": out,
                          "curve_csv": curve}, args)
    return [out, curve, sidecar]


def _cmd_capture(args):
    from .simulate import capture_fractions
    sys_ = build_system(_load_model_config(args.model))
    z = _parse_z(args.z, sys_.dim_z)
    eps = _eps_list(args)
    if len(eps) != 1:
        raise ConfigError("capture takes exactly one --eps")
    eps = eps[0]
    if args.phases < 100:
        raise ConfigError("--phases must be >= 100 for capture statistics")
    co = _bundle_for(args, sys_, z)
    cs = capture_fractions(sys_, co, eps, args.phases, seed=args.seed,
                           z0=z, **_int_tols(args))
    out = args.out or "capture.csv"
    stem = out[:-4] if out.endswith(".csv") else out
    cs.to_csv(out)
    sidecar = stem + ".json"
    n_ok = cs.n_captured[1] + cs.n_captured[2]
    ci = {str(i): [cs.fraction[i] - 3.0 * cs.sigma,
                   cs.fraction[i] + 3.0 * cs.sigma] for i in (1, 2)}
    _write_json(sidecar, {
        "eps": eps, "n": cs.n, "seed": cs.seed,
        "n_captured": {str(k): v for k, v in cs.n_captured.items()},
        "n_ambiguous": cs.n_ambiguous, "n_failed": cs.n_failed,
        "fraction": {str(k): v for k, v in cs.fraction.items()},
        "sigma": cs.sigma, "ci_3sigma": ci,
        "theta_ratio": {"1": co.theta_ratio(1, 3),
                        "2": co.theta_ratio(2, 3)},
        "ks_stat": cs.ks_stat, "ks_pvalue": cs.ks_pvalue,
        "n_settled": n_ok, "csv": out,
    }, args)
    return [out, sidecar]


_DISPATCH = {"portrait": _cmd_portrait, "coeffs": _cmd_coeffs,
             "predict": _cmd_predict, "simulate": _cmd_simulate,
             "sweep": _cmd_sweep, "capture": _cmd_capture}


def main(argv=None) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, 0 on --help/--version
        return int(exc.code or 0)
    try:
        written = _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc),
                          "command": args.command}, sort_keys=True))
        return 2
    except SepcrossError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}, sort_keys=True))
        return 1
    print(json.dumps({"ok": True, "command": args.command,
                      "outputs": written}, sort_keys=True))
    return 0


if __name__ == "__main__":
    _sysmod.exit(main())
