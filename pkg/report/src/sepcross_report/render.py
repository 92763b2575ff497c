"""Loaders and figure builders for sepcross output tables.

All loaders open their inputs read-only and never modify them.  Each
figure builder returns ``(fig, meta)`` where ``meta`` is a dict of the
numbers shown on the figure, so callers (and tests) can check them
without parsing the rendered file.
"""
import csv
import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VALIDITY_FILTER = "valid == 1 and error is empty"


class ReportError(Exception):
    """Raised when the input tables cannot support the requested figure."""


def _opt_float(text):
    if text is None or text == "":
        return None
    return float(text)


def _opt_int(text):
    if text is None or text == "":
        return None
    return int(text)


def load_sweep(path):
    """Load a ``sepcross sweep`` CSV into a list of typed row dicts."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "measured_jump" not in reader.fieldnames:
            raise ReportError(f"{path}: not a sweep table "
                              "(missing measured_jump column)")
        for raw in reader:
            row = dict(raw)
            for col in ("eps", "phi0", "xi3", "xi_i", "xi_i_meas",
                        "measured_jump", "predicted_jump",
                        "predicted_baseline"):
                if col in row:
                    row[col] = _opt_float(row[col])
            row["target"] = _opt_int(raw.get("target"))
            row["valid"] = raw.get("valid") == "1"
            row["error"] = raw.get("error") or ""
            rows.append(row)
    return rows


def load_curve(path):
    """Load a ``sepcross sweep`` prediction-curve CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "xi_i" not in reader.fieldnames:
            raise ReportError(f"{path}: not a prediction-curve table")
        for raw in reader:
            rows.append({"eps": float(raw["eps"]),
                         "target": int(raw["target"]),
                         "xi_i": float(raw["xi_i"]),
                         "predicted_jump": _opt_float(raw["predicted_jump"]),
                         "valid": raw["valid"] == "1"})
    return rows


def load_capture(path):
    """Load a ``sepcross capture`` CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "xi3" not in reader.fieldnames:
            raise ReportError(f"{path}: not a capture table")
        for raw in reader:
            rows.append({"eps": _opt_float(raw.get("eps")),
                         "phi0": _opt_float(raw.get("phi0")),
                         "xi3": _opt_float(raw.get("xi3")),
                         "xi_i": _opt_float(raw.get("xi_i")),
                         "target": _opt_int(raw.get("target")),
                         "valid": raw.get("valid") == "1",
                         "error": raw.get("error") or ""})
    return rows


def _settled(rows):
    good, grey = [], []
    for r in rows:
        if r["valid"] and not r["error"]:
            good.append(r)
        else:
            grey.append(r)
    return good, grey


def _xi_of(row):
    xm = row.get("xi_i_meas")
    return xm if xm is not None else row.get("xi_i")


def jump_vs_xi(rows, curve_rows=None, title=None):
    """Measured jumps vs pseudo-phase, with the prediction-curve overlay.

    Invalid rows are drawn greyed out, never dropped.  Raises ReportError
    when no row passes the validity filter.
    """
    good, grey = _settled(rows)
    good = [r for r in good if r["measured_jump"] is not None
            and _xi_of(r) is not None]
    if not good:
        raise ReportError(
            f"no rows pass the validity filter ({VALIDITY_FILTER})")
    grey = [r for r in grey if r["measured_jump"] is not None
            and _xi_of(r) is not None]

    eps_values = sorted({r["eps"] for r in good})
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    cmap = plt.get_cmap("viridis")
    colors = {e: cmap(i / max(1, len(eps_values) - 1))
              for i, e in enumerate(eps_values)}

    if grey:
        ax.scatter([_xi_of(r) for r in grey],
                   [r["measured_jump"] for r in grey],
                   s=12, color="0.75", alpha=0.6, zorder=1,
                   label=f"outside window (n={len(grey)})")
    for e in eps_values:
        sub = [r for r in good if r["eps"] == e]
        ax.scatter([_xi_of(r) for r in sub],
                   [r["measured_jump"] for r in sub],
                   s=14, color=colors[e], zorder=3,
                   label=f"measured, eps={e:g}")

    n_curves = 0
    if curve_rows:
        keys = sorted({(r["eps"], r["target"]) for r in curve_rows})
        for e, target in keys:
            pts = [(r["xi_i"], r["predicted_jump"]) for r in curve_rows
                   if r["eps"] == e and r["target"] == target and r["valid"]
                   and r["predicted_jump"] is not None]
            if not pts:
                continue
            pts.sort()
            xs, ys = zip(*pts)
            ax.plot(xs, ys, color=colors.get(e, "k"), lw=1.2, zorder=2,
                    linestyle="-" if target == 1 else "--",
                    label=f"predicted, eps={e:g}, G{target}")
            n_curves += 1

    ax.set_xlabel(r"pseudo-phase $\xi_i$")
    ax.set_ylabel("jump")
    ax.set_title(title or "jump vs pseudo-phase")
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    meta = {"n_valid": len(good), "n_invalid": len(grey),
            "eps": eps_values, "n_curves": n_curves}
    return fig, meta


def residual_scaling(rows, title=None):
    """Log-log RMS residual vs eps with the least-squares slope annotated.

    Residuals are measured minus predicted jumps over valid rows, with the
    per-eps median removed before taking the RMS (time-shift sweeps carry a
    systematic per-eps offset).
    """
    good, _ = _settled(rows)
    good = [r for r in good if r["measured_jump"] is not None
            and r["predicted_jump"] is not None]
    if not good:
        raise ReportError(
            f"no rows pass the validity filter ({VALIDITY_FILTER})")
    by_eps = {}
    for r in good:
        by_eps.setdefault(r["eps"], []).append(
            r["measured_jump"] - r["predicted_jump"])
    by_eps = {e: v for e, v in by_eps.items() if len(v) >= 2}
    if len(by_eps) < 2:
        raise ReportError("residual_scaling needs valid rows at two or more "
                          "eps values")
    eps_values = sorted(by_eps)
    rms = {}
    for e in eps_values:
        resid = np.asarray(by_eps[e])
        resid = resid - np.median(resid)
        rms[e] = float(np.sqrt(np.mean(resid ** 2)))
    slope = float(np.polyfit(np.log(eps_values),
                             np.log([rms[e] for e in eps_values]), 1)[0])
    annotation = f"slope = {slope:.15g}"

    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.loglog(eps_values, [rms[e] for e in eps_values], "o-", color="C0")
    ax.annotate(annotation, xy=(0.05, 0.92), xycoords="axes fraction")
    ax.set_xlabel(r"$\varepsilon$")
    ax.set_ylabel("RMS residual (median-adjusted)")
    ax.set_title(title or "residual scaling")
    fig.tight_layout()
    meta = {"slope": slope, "annotation": annotation, "rms": rms,
            "eps": eps_values}
    return fig, meta


def capture_hist(rows, bins=20, title=None):
    """Histogram of the crossing parameter xi3 with capture fractions.

    A capture run counts as settled when it has a capture target, no
    error, and a crossing parameter; the xi-window flag does not apply
    here.
    """
    good, grey = [], []
    for r in rows:
        if not r["error"] and r["target"] is not None \
                and r["xi3"] is not None:
            good.append(r)
        else:
            grey.append(r)
    if not good:
        raise ReportError("no rows pass the validity filter "
                          "(target set and error is empty)")
    xi3 = np.array([r["xi3"] for r in good])
    counts = {}
    for r in good:
        counts[r["target"]] = counts.get(r["target"], 0) + 1
    total = sum(counts.values())
    fractions = {t: c / total for t, c in sorted(counts.items())}

    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.hist(xi3, bins=bins, range=(0.0, 1.0), color="C0", alpha=0.8)
    ax.axhline(len(xi3) / bins, color="0.4", lw=1.0, linestyle="--",
               label="uniform")
    text = ", ".join(f"G{t}: {f:.3f}" for t, f in fractions.items())
    ax.annotate(f"capture fractions  {text}\nsettled n={total}, "
                f"excluded n={len(grey)}",
                xy=(0.04, 0.9), xycoords="axes fraction", fontsize=8)
    ax.set_xlabel(r"$\xi_3$")
    ax.set_ylabel("count")
    ax.set_title(title or "capture statistics")
    ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    meta = {"n_settled": total, "n_excluded": len(grey),
            "fractions": fractions}
    return fig, meta
