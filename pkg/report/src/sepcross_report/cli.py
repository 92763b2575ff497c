"""Command-line entry point: render a figure from sepcross output tables.

    sepcross-report --kind jump_vs_xi --in sweep.csv --out fig.svg

Kinds: jump_vs_xi (sweep CSV, optional prediction-curve overlay),
residual_scaling (sweep CSV spanning several eps values), capture_hist
(capture CSV).  For jump_vs_xi the curve defaults to the sweep's
``<stem>_curve.csv`` sidecar when present; override with --curve.

Exit codes: 0 success, 1 data error (e.g. no valid rows), 2 bad
arguments or unreadable input.
"""
import argparse
import json
import sys
from pathlib import Path

from . import __version__, render


def _build_parser():
    p = argparse.ArgumentParser(prog="sepcross-report",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"%(prog)s {__version__}")
    p.add_argument("--kind", required=True,
                   choices=("jump_vs_xi", "residual_scaling", "capture_hist"))
    p.add_argument("--in", dest="infile", required=True,
                   help="input CSV written by sepcross sweep/capture")
    p.add_argument("--out", required=True, help="output figure path (.svg, "
                   ".png, ... — any matplotlib-supported format)")
    p.add_argument("--curve", default=None,
                   help="prediction-curve CSV for the jump_vs_xi overlay")
    p.add_argument("--title", default=None)
    return p


def _default_curve(infile):
    path = Path(infile)
    cand = path.with_name(path.stem + "_curve.csv")
    return cand if cand.is_file() else None


def _render(args):
    if args.kind == "jump_vs_xi":
        rows = render.load_sweep(args.infile)
        curve_path = Path(args.curve) if args.curve else \
            _default_curve(args.infile)
        curve = render.load_curve(curve_path) if curve_path else None
        return render.jump_vs_xi(rows, curve_rows=curve, title=args.title)
    if args.kind == "residual_scaling":
        return render.residual_scaling(render.load_sweep(args.infile),
                                       title=args.title)
    return render.capture_hist(render.load_capture(args.infile),
                               title=args.title)


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        fig, meta = _render(args)
    except FileNotFoundError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}))
        return 2
    except render.ReportError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}))
        return 1
    fig.savefig(args.out)
    print(json.dumps({"ok": True, "kind": args.kind, "out": args.out,
                      "meta": render_safe(meta)}, sort_keys=True))
    return 0


def render_safe(meta):
    """JSON-ready copy of a meta dict (string keys, plain floats)."""
    if isinstance(meta, dict):
        return {str(k): render_safe(v) for k, v in meta.items()}
    if isinstance(meta, (list, tuple)):
        return [render_safe(v) for v in meta]
    return meta


if __name__ == "__main__":
    sys.exit(main())
