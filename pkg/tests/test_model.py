import math

import numpy as np
import pytest

from sepcross.errors import ConfigError, ModelError
from sepcross.model import State, build_system, derived_fields
from sepcross.portrait import find_saddle, trace_separatrices


def test_catalog_duffing_dissipative():
    sys = build_system("duffing_dissipative")
    assert sys.mode == "generic"
    assert sys.dim_z == 1
    z = np.array([0.0])
    assert sys.H(0.0, 1.0, z) == pytest.approx(-0.25)
    assert sys.f_p(1.0, 0.5, z, 0.0) == pytest.approx(-1.0)   # -gamma p
    assert sys.f_q(1.0, 0.5, z, 0.0) == 0.0
    assert np.allclose(sys.f_z(1.0, 0.5, z, 0.0), [1.0])


def test_catalog_breathing_mode():
    sys = build_system("duffing_breathing_asym")
    assert sys.mode == "hamiltonian_time"
    assert sys.dim_z == 1
    assert np.allclose(sys.f_z(0.3, 0.4, np.array([0.1]), 0.0), [1.0])


def test_catalog_slowfast_mode():
    sys = build_system("duffing_slowfast")
    assert sys.mode == "slow_fast"
    assert sys.dim_z == 2
    # f_z = (-dH/dx, dH/dy) at eps = 0, checked by finite differences
    p, q = 0.3, 0.7
    z = np.array([-0.2, 0.1])
    step = 1e-6
    dH_dy = (sys.H(p, q, z + [step, 0]) - sys.H(p, q, z - [step, 0])) / (2 * step)
    dH_dx = (sys.H(p, q, z + [0, step]) - sys.H(p, q, z - [0, step])) / (2 * step)
    fz = sys.f_z(p, q, z, 0.0)
    assert fz[0] == pytest.approx(-dH_dx, abs=1e-8)
    assert fz[1] == pytest.approx(dH_dy, abs=1e-8)


def test_build_system_errors():
    with pytest.raises(ModelError):
        build_system("no_such_model")
    with pytest.raises(ConfigError):
        build_system({})


def test_expression_system():
    sys = build_system({
        "H": "p^2/2 - q^2/2 + q^4/4",
        "f_p": "-p",
        "f_q": "0",
        "f_z": ["1"],
        "mode": "generic",
        "dim_z": 1,
    })
    z = np.array([0.0])
    ref = build_system("duffing_dissipative")
    for pt in [(0.0, 1.0), (0.5, -0.3), (1.2, 0.7)]:
        assert sys.H(*pt, z) == pytest.approx(ref.H(*pt, z), abs=1e-14)
        assert sys.dH_dq(*pt, z) == pytest.approx(ref.dH_dq(*pt, z), abs=1e-12)


def test_derived_fields_examples(duff_sys):
    chart = find_saddle(duff_sys, np.array([0.0]))
    at_saddle = derived_fields(duff_sys, chart, State(0.0, 0.0, np.array([0.0])))
    assert at_saddle.f_h == 0.0
    assert np.allclose(at_saddle.F_z, 0.0)

    fs = derived_fields(duff_sys, chart, State(1.0, 1.0, np.array([0.0])))
    assert fs.E == pytest.approx(0.25, abs=1e-14)
    assert fs.f_h == pytest.approx(-1.0, abs=1e-12)   # dE/dp * f_p = 1 * (-1)
    assert np.allclose(fs.f_zC, [1.0])
    assert np.allclose(fs.F_z, 0.0)


def test_E_sign_change_across_separatrix(duff_sys):
    chart = find_saddle(duff_sys, np.array([0.0]))
    geo = trace_separatrices(duff_sys, chart)
    loop = geo.loops[2]
    mid = loop[len(loop) // 2]
    # outward normal via the loop tangent
    nxt = loop[len(loop) // 2 + 1]
    tan = nxt - mid
    nrm = np.array([-tan[1], tan[0]])
    nrm /= np.linalg.norm(nrm)
    z = np.array([0.0])
    d = 1e-3
    Ep = duff_sys.H(*(mid + d * nrm), z) - chart.h_C
    Em = duff_sys.H(*(mid - d * nrm), z) - chart.h_C
    assert Ep * Em < 0


def test_fields_vanish_at_saddle_linearly(duff_sys):
    chart = find_saddle(duff_sys, np.array([0.0]))
    z = np.array([0.0])
    rs = np.geomspace(1e-4, 1e-1, 8)
    vals = []
    rng = np.random.default_rng(1)
    for r in rs:
        worst = 0.0
        for _ in range(16):
            ang = rng.uniform(0, 2 * math.pi)
            pt = State(r * math.cos(ang), r * math.sin(ang), z)
            worst = max(worst, abs(derived_fields(duff_sys, chart, pt).f_h))
        vals.append(worst)
    slope = np.polyfit(np.log(rs), np.log(vals), 1)[0]
    assert slope >= 1.0


def test_slowfast_f_zC_matches_hC_gradient(slowfast_sys):
    z = np.array([-0.2, 0.1])
    chart = find_saddle(slowfast_sys, z)
    fs = derived_fields(slowfast_sys, chart,
                        State(chart.p_C + 0.3, chart.q_C + 0.4, z))
    step = 1e-6

    def h_C(zv):
        return find_saddle(slowfast_sys, zv).h_C

    dhC_dy = (h_C(z + [step, 0]) - h_C(z - [step, 0])) / (2 * step)
    dhC_dx = (h_C(z + [0, step]) - h_C(z - [0, step])) / (2 * step)
    assert fs.f_zC[0] == pytest.approx(-dhC_dx, abs=1e-6)
    assert fs.f_zC[1] == pytest.approx(dhC_dy, abs=1e-6)


def test_box_enforced():
    sys = build_system({"name": "duffing_dissipative",
                        "box": {"q": [-1.5, 1.5]}})
    assert sys.in_box(0.0, 1.0, np.array([0.0]))
    assert not sys.in_box(0.0, 2.0, np.array([0.0]))
