"""Perturbed one-degree-of-freedom systems.

A :class:`SystemDef` bundles the unperturbed Hamiltonian H(p, q, z), the
perturbations f_p, f_q, f_z and every partial derivative the rest of the
library needs.  Systems come from a small built-in catalog or from
expression strings (see :mod:`sepcross.exprdsl`).

Modes:

* ``generic`` -- arbitrary smooth perturbations;
* ``hamiltonian_time`` -- H = H(p, q, tau) with z = (tau,), f_z = 1 and
  no direct momentum/coordinate perturbation;
* ``slow_fast`` -- H = H(p, q, y, x) with z = (y, x) and the slow pair
  driven by f_z = (-dH/dx, dH/dy).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import exprdsl
from .errors import ConfigError, ModelError

MODES = ("generic", "hamiltonian_time", "slow_fast")


@dataclass(frozen=True)
class State:
    p: float
    q: float
    z: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class FieldSample:
    """E, f_h, F_z and friends at one phase-space point (perturbations at eps=0)."""

    H: float
    h_C: float
    E: float
    dE_dp: float
    dE_dq: float
    dE_dz: np.ndarray
    f_h: float
    f_zC: np.ndarray
    F_z: np.ndarray


@dataclass(frozen=True)
class SystemDef:
    name: str
    mode: str
    dim_z: int
    params: dict

    H: Callable
    dH_dp: Callable
    dH_dq: Callable
    dH_dz: Callable  # -> ndarray(dim_z)
    d2H: Callable    # -> (H_pp, H_pq, H_qq)

    f_p: Callable    # (p, q, z, eps) -> float
    f_q: Callable
    f_z: Callable    # (p, q, z, eps) -> ndarray(dim_z)

    box: dict = field(default_factory=dict)
    saddle_seed: tuple = (0.1, 0.1)
    # position of the saddle and the section rays do not depend on z
    saddle_is_fixed: bool = False
    # H and the eps=0 perturbation fields do not depend on z at all
    # (enables caching z-independent quantities across a run)
    autonomous: bool = False
    # optional fast path for the full-system integrator
    fused_rhs: Optional[Callable] = None

    def in_box(self, p, q, z):
        bp = self.box.get("p")
        bq = self.box.get("q")
        if bp is not None and not (bp[0] <= p <= bp[1]):
            return False
        if bq is not None and not (bq[0] <= q <= bq[1]):
            return False
        bz = self.box.get("z")
        if bz is not None:
            for val, (lo, hi) in zip(np.atleast_1d(z), bz):
                if not (lo <= val <= hi):
                    return False
        return True


def derived_fields(sys: SystemDef, chart, s: State) -> FieldSample:
    """E, grad E, f_h, F_z, f_{z,C} at ``s`` with perturbations at eps = 0.

    ``chart`` must be a saddle chart computed at ``s.z`` (supplies the
    saddle location and h_C).
    """
    p, q, z = s.p, s.q, np.asarray(s.z, dtype=float)
    Hval = sys.H(p, q, z)
    E = Hval - chart.h_C
    dE_dp = sys.dH_dp(p, q, z)
    dE_dq = sys.dH_dq(p, q, z)
    # dh_C/dz = dH/dz at the saddle (critical-point envelope)
    dE_dz = np.asarray(sys.dH_dz(p, q, z), dtype=float) - chart.dh_C_dz
    fz0 = np.asarray(sys.f_z(p, q, z, 0.0), dtype=float)
    f_zC = np.asarray(sys.f_z(chart.p_C, chart.q_C, z, 0.0), dtype=float)
    f_h = (
        dE_dp * sys.f_p(p, q, z, 0.0)
        + dE_dq * sys.f_q(p, q, z, 0.0)
        + float(np.dot(dE_dz, fz0))
    )
    return FieldSample(
        H=Hval, h_C=chart.h_C, E=E,
        dE_dp=dE_dp, dE_dq=dE_dq, dE_dz=dE_dz,
        f_h=f_h, f_zC=f_zC, F_z=fz0 - f_zC,
    )


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------

def _duffing_dissipative(params):
    gamma = float(params.get("gamma", 1.0))

    def H(p, q, z):
        return 0.5 * p * p - 0.5 * q * q + 0.25 * q ** 4

    def fused(t, y, eps):
        p, q = y[0], y[1]
        return (q - q ** 3 - eps * gamma * p, p, eps)

    return SystemDef(
        name="duffing_dissipative",
        mode="generic",
        dim_z=1,
        params={"gamma": gamma},
        H=H,
        dH_dp=lambda p, q, z: p,
        dH_dq=lambda p, q, z: -q + q ** 3,
        dH_dz=lambda p, q, z: np.zeros(1),
        d2H=lambda p, q, z: (1.0, 0.0, -1.0 + 3.0 * q * q),
        f_p=lambda p, q, z, eps: -gamma * p,
        f_q=lambda p, q, z, eps: 0.0,
        f_z=lambda p, q, z, eps: np.ones(1),
        box={"p": (-4.0, 4.0), "q": (-4.0, 4.0)},
        saddle_seed=(0.1, 0.1),
        saddle_is_fixed=True,
        autonomous=True,
        fused_rhs=fused,
    )


def _duffing_breathing_asym(params):
    c = float(params.get("c", 0.2))
    zeta0 = float(params.get("zeta0", 1.0))
    zeta1 = float(params.get("zeta1", 0.5))

    def zeta(tau):
        return zeta0 + zeta1 * tau

    def V(q):
        return -0.5 * q * q + (c / 3.0) * q ** 3 + 0.25 * q ** 4

    def dV(q):
        return q * (-1.0 + c * q + q * q)

    def H(p, q, z):
        return 0.5 * p * p + zeta(z[0]) * V(q)

    def fused(t, y, eps):
        p, q = y[0], y[1]
        return (-zeta(y[2]) * dV(q), p, eps)

    return SystemDef(
        name="duffing_breathing_asym",
        mode="hamiltonian_time",
        dim_z=1,
        params={"c": c, "zeta0": zeta0, "zeta1": zeta1},
        H=H,
        dH_dp=lambda p, q, z: p,
        dH_dq=lambda p, q, z: zeta(z[0]) * dV(q),
        dH_dz=lambda p, q, z: np.array([zeta1 * V(q)]),
        d2H=lambda p, q, z: (1.0, 0.0, zeta(z[0]) * (-1.0 + 2.0 * c * q + 3.0 * q * q)),
        f_p=lambda p, q, z, eps: 0.0,
        f_q=lambda p, q, z, eps: 0.0,
        f_z=lambda p, q, z, eps: np.ones(1),
        box={"p": (-4.0, 4.0), "q": (-4.0, 4.0), "z": [(-1.5, 20.0)]},
        saddle_seed=(0.05, 0.05),
        saddle_is_fixed=True,
        fused_rhs=fused,
    )


def _duffing_slowfast(params):
    """Asymmetric quartic well coupled to a slow Hamiltonian pair (y, x).

    H = p^2/2 + (1 + beta*y) V(q) + x q^2/2 + y^2/2 with
    V = -q^2/2 + (c/3) q^3 + q^4/4.  The saddle sits at (p, q) = (0, 0)
    for every z, and on the separatrix dE/dt reduces to eps * y q^2/2,
    so both wells shrink (Theta_1, Theta_2 > 0) throughout y < 0; the
    slow flow ydot = -eps q^2/2 < 0 keeps the system in that regime.
    The q^3 asymmetry makes the slow-area brackets {S_i, S_3} nonzero.
    """
    beta = float(params.get("beta", 0.4))
    c = float(params.get("c", 0.2))

    def V0(q):
        return -0.5 * q * q + (c / 3.0) * q ** 3 + 0.25 * q ** 4

    def dV0(q):
        return -q + c * q * q + q ** 3

    def H(p, q, z):
        y, x = z[0], z[1]
        return (0.5 * p * p + (1.0 + beta * y) * V0(q)
                + 0.5 * x * q * q + 0.5 * y * y)

    def fused(t, yv, eps):
        p, q, y, x = yv[0], yv[1], yv[2], yv[3]
        return (
            -((1.0 + beta * y) * dV0(q) + x * q),
            p,
            -eps * 0.5 * q * q,
            eps * (y + beta * V0(q)),
        )

    return SystemDef(
        name="duffing_slowfast",
        mode="slow_fast",
        dim_z=2,
        params={"beta": beta, "c": c},
        H=H,
        dH_dp=lambda p, q, z: p,
        dH_dq=lambda p, q, z: (1.0 + beta * z[0]) * dV0(q) + z[1] * q,
        dH_dz=lambda p, q, z: np.array([beta * V0(q) + z[0],
                                        0.5 * q * q]),
        d2H=lambda p, q, z: (1.0, 0.0,
                             (1.0 + beta * z[0]) * (-1.0 + 2.0 * c * q
                                                    + 3.0 * q * q) + z[1]),
        f_p=lambda p, q, z, eps: 0.0,
        f_q=lambda p, q, z, eps: 0.0,
        # z = (y, x): ydot = -dH/dx, xdot = dH/dy
        f_z=lambda p, q, z, eps: np.array([-0.5 * q * q,
                                           z[0] + beta * V0(q)]),
        box={"p": (-4.0, 4.0), "q": (-4.0, 4.0),
             "z": [(-2.0, 0.8), (-0.6, 0.6)]},
        saddle_seed=(0.0, 0.05),
        saddle_is_fixed=True,
        fused_rhs=fused,
    )


CATALOG = {
    "duffing_dissipative": _duffing_dissipative,
    "duffing_breathing_asym": _duffing_breathing_asym,
    "duffing_slowfast": _duffing_slowfast,
}


# ---------------------------------------------------------------------------
# Expression-defined systems
# ---------------------------------------------------------------------------

def _zvars(dim_z):
    return [f"z{i + 1}" for i in range(dim_z)]


def _compile(text, dim_z, params, extra_ok=()):
    names = ["p", "q", "eps", "tau"] + _zvars(dim_z) + list(params) + list(extra_ok)
    expr = exprdsl.parse(text, variables=names)
    # parameters fold to constants; tau is an alias for z1
    env_params = {k: float(v) for k, v in params.items()}

    def subst(e):
        if isinstance(e, exprdsl.Var):
            if e.name in env_params:
                return exprdsl.Const(env_params[e.name])
            if e.name == "tau":
                return exprdsl.Var("z1")
            return e
        if isinstance(e, exprdsl.Neg):
            return exprdsl.Neg(subst(e.arg))
        if isinstance(e, exprdsl.Call):
            return exprdsl.Call(e.fn, subst(e.arg))
        if isinstance(e, exprdsl.Bin):
            return exprdsl.Bin(e.op, subst(e.left), subst(e.right))
        return e

    return exprdsl.constant_fold(subst(expr))


def _fn_of_state(expr, dim_z, with_eps):
    args = ["p", "q"] + _zvars(dim_z) + (["eps"] if with_eps else [])
    raw = exprdsl.compile_fn(expr, args)
    if with_eps:
        return lambda p, q, z, eps: raw(p, q, *z, eps)
    return lambda p, q, z: raw(p, q, *z)


def build_expression_system(config):
    """Build a SystemDef from the expression strings in ``config``."""
    params = {k: float(v) for k, v in config.get("params", {}).items()}
    mode = config.get("mode", "generic")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    dim_z = int(config.get("dim_z", 2 if mode == "slow_fast" else 1))
    if dim_z < 1:
        raise ConfigError("dim_z must be >= 1")
    if mode == "hamiltonian_time" and dim_z != 1:
        raise ConfigError("hamiltonian_time mode requires dim_z = 1")
    if mode == "slow_fast" and dim_z != 2:
        raise ConfigError("slow_fast mode requires dim_z = 2")

    if "H" not in config:
        raise ConfigError("expression model requires an 'H' entry")
    H_expr = _compile(config["H"], dim_z, params)
    zv = _zvars(dim_z)
    dHp = exprdsl.differentiate(H_expr, "p")
    dHq = exprdsl.differentiate(H_expr, "q")
    dHz = [exprdsl.differentiate(H_expr, v) for v in zv]
    d2 = (
        exprdsl.differentiate(dHp, "p"),
        exprdsl.differentiate(dHp, "q"),
        exprdsl.differentiate(dHq, "q"),
    )

    if mode == "hamiltonian_time":
        fp_expr = exprdsl.Const(0.0)
        fq_expr = exprdsl.Const(0.0)
        fz_exprs = [exprdsl.Const(1.0)]
    elif mode == "slow_fast":
        fp_expr = exprdsl.Const(0.0)
        fq_expr = exprdsl.Const(0.0)
        # z = (y, x) = (z1, z2): ydot = -dH/dx, xdot = dH/dy
        fz_exprs = [exprdsl.Neg(dHz[1]), dHz[0]]
    else:
        fp_expr = _compile(config.get("f_p", "0"), dim_z, params)
        fq_expr = _compile(config.get("f_q", "0"), dim_z, params)
        raw_fz = config.get("f_z", ["1"] * dim_z)
        if isinstance(raw_fz, str):
            raw_fz = [raw_fz]
        if len(raw_fz) != dim_z:
            raise ConfigError(f"f_z must have {dim_z} components")
        fz_exprs = [_compile(s, dim_z, params) for s in raw_fz]

    Hf = _fn_of_state(H_expr, dim_z, with_eps=False)
    dHpf = _fn_of_state(dHp, dim_z, with_eps=False)
    dHqf = _fn_of_state(dHq, dim_z, with_eps=False)
    dHzf = [_fn_of_state(e, dim_z, with_eps=False) for e in dHz]
    d2f = [_fn_of_state(e, dim_z, with_eps=False) for e in d2]
    fpf = _fn_of_state(fp_expr, dim_z, with_eps=True)
    fqf = _fn_of_state(fq_expr, dim_z, with_eps=True)
    fzf = [_fn_of_state(e, dim_z, with_eps=True) for e in fz_exprs]

    state_vars = {"p", "q"}
    used = set()
    for e in [H_expr, fp_expr, fq_expr] + fz_exprs:
        used |= exprdsl.free_vars(e)
    autonomous = not (used - state_vars)

    box = {}
    raw_box = config.get("box", {})
    if "p" in raw_box:
        box["p"] = tuple(raw_box["p"])
    if "q" in raw_box:
        box["q"] = tuple(raw_box["q"])
    if "z" in raw_box:
        box["z"] = [tuple(b) for b in raw_box["z"]]

    return SystemDef(
        name=config.get("name", "expression"),
        mode=mode,
        dim_z=dim_z,
        params=params,
        H=Hf,
        dH_dp=dHpf,
        dH_dq=dHqf,
        dH_dz=lambda p, q, z: np.array([f(p, q, z) for f in dHzf]),
        d2H=lambda p, q, z: (d2f[0](p, q, z), d2f[1](p, q, z), d2f[2](p, q, z)),
        f_p=fpf,
        f_q=fqf,
        f_z=lambda p, q, z, eps: np.array([f(p, q, z, eps) for f in fzf]),
        box=box,
        saddle_seed=tuple(config.get("saddle_seed", (0.1, 0.1))),
        saddle_is_fixed=autonomous,
        autonomous=autonomous,
    )


def build_system(config) -> SystemDef:
    """Build a SystemDef from a model config (catalog name or expressions)."""
    if isinstance(config, str):
        config = {"name": config}
    name = config.get("name")
    if name in CATALOG:
        sys = CATALOG[name](config.get("params", {}))
        raw_box = config.get("box")
        if raw_box:
            box = dict(sys.box)
            if "p" in raw_box:
                box["p"] = tuple(raw_box["p"])
            if "q" in raw_box:
                box["q"] = tuple(raw_box["q"])
            if "z" in raw_box:
                box["z"] = [tuple(b) for b in raw_box["z"]]
            object.__setattr__(sys, "box", box)
        return sys
    if "H" in config:
        return build_expression_system(config)
    if name is None:
        raise ConfigError("model config needs a catalog 'name' or an 'H' expression")
    raise ModelError(f"unknown catalog model {name!r}")
