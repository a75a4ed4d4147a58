import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmgsim.metrics import vuf
from mmgsim.plant import (
    PHASE_ROT,
    EssFilter,
    Load,
    NetworkTopology,
    PhasorNetwork,
    PlantSolveError,
    SingularNetworkError,
    Sources,
    ThreePhaseInverter,
    apply_ess_injection,
    build_admittance,
    compensable_extra_load,
    invert_admittance,
    load_admittance,
    operating_point,
    three_phase_inverter_dispatch,
    waveform_sample,
)

W0 = 2 * math.pi * 60
VN = 120 * math.sqrt(2)
FIXTURE_EXTRA = Load(1681.5032958984375, -3642.4292313748615)


def topo(**kw):
    return NetworkTopology(VN, W0, **kw)


def mesh_phase_a(t: NetworkTopology, e3: complex, e_pv: complex):
    """Loop-current solve of the phase-a ladder (ESS open).

    Ladder, left to right: E3, series Zf + Z_line, shunt Z_pcc, series Z_tie,
    shunt Z_s, series Zf, E_pv. Mesh currents clockwise.
    """
    zf = t.filter_z
    z_pcc = 1 / (load_admittance(t.balanced_load.p, t.balanced_load.q, VN)
                 + load_admittance(t.extra_load_a.p, t.extra_load_a.q, VN))
    z_s = 1 / load_admittance(t.single_phase_load.p, t.single_phase_load.q, VN)
    Z = np.array([
        [zf + t.line_z + z_pcc, -z_pcc, 0],
        [-z_pcc, z_pcc + t.tie_z + z_s, -z_s],
        [0, -z_s, z_s + zf],
    ])
    i1, i2, i3 = np.linalg.solve(Z, np.array([e3, 0, -e_pv]))
    return e3 - zf * i1, z_pcc * (i1 - i2), z_s * (i2 - i3)


def mesh_phase_b(t: NetworkTopology, e: complex):
    z_pcc = 1 / load_admittance(t.balanced_load.p, t.balanced_load.q, VN)
    i = e / (t.filter_z + t.line_z + z_pcc)
    return e - t.filter_z * i, z_pcc * i


def test_fixture_nodal_matches_mesh_oracle():
    t = topo(extra_load_a=FIXTURE_EXTRA)
    src = Sources(170 + 3j, cmath.rect(172, 0.05))
    st_ = PhasorNetwork(t).solve(src)
    for got, want in zip(st_.v["a"], mesh_phase_a(t, src.e3, src.e_pv)):
        assert abs(got - want) < 1e-9
    for ph in ("b", "c"):
        for got, want in zip(st_.v[ph], mesh_phase_b(t, src.e3 * PHASE_ROT[ph])):
            assert abs(got - want) < 1e-9
    assert st_.kcl_residual < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 2), st.floats(0.05, 2), st.floats(0.05, 2), st.floats(0.05, 2),
       st.floats(100, 5000), st.floats(-2000, 2000), st.floats(-0.5, 0.5))
def test_random_three_bus_matches_mesh_oracle(lr, lx, tr, tx, p, q, delta):
    t = topo(line_z=complex(lr, lx), tie_z=complex(tr, tx), single_phase_load=Load(p, q))
    src = Sources(175 + 0j, cmath.rect(165, delta))
    st_ = PhasorNetwork(t).solve(src)
    for got, want in zip(st_.v["a"], mesh_phase_a(t, src.e3, src.e_pv)):
        assert abs(got - want) < 1e-9
    assert st_.kcl_residual < 1e-9


def test_voltage_divider():
    Y = build_admittance(2, [(0, 1, 1 + 1j)], {0: 1.0, 1: 1 / (10 + 2j)})
    v = invert_admittance(Y) @ np.array([100.0 + 0j, 0])
    # source 100 V behind 1 ohm, then 1+1j line, 10+2j load
    assert v[1] == pytest.approx(100 * (10 + 2j) / (1 + 1 + 1j + 10 + 2j), abs=1e-12)


def test_zero_injections_zero_voltages():
    st_ = PhasorNetwork(topo()).solve(Sources(0j, 0j, 0j))
    assert all(v == 0 for ph in st_.v.values() for v in ph)


def test_singular_network_rejected():
    with pytest.raises(SingularNetworkError):
        PhasorNetwork(topo(line_z=0j))
    with pytest.raises(SingularNetworkError):
        invert_admittance(np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=complex))


def test_balanced_system_has_no_unbalance():
    # a practically open tie isolates the single-phase MG
    isolated = PhasorNetwork(topo(tie_z=1e12 + 0j)).solve(Sources(VN + 0j, 0j))
    assert vuf(*isolated.pcc_voltages()) < 1e-10
    coupled = PhasorNetwork(topo()).solve(Sources(VN + 0j, 0j))
    assert vuf(*coupled.pcc_voltages()) > 0.1


def test_phase_a_load_raises_phase_a_power():
    st_ = PhasorNetwork(topo(extra_load_a=Load(1500, 300), tie_z=1e12 + 0j)).solve(
        Sources(VN + 0j, 0j))
    p = [st_.pcc_power(ph).real for ph in "abc"]
    assert p[0] > p[1] and p[1] == pytest.approx(p[2], rel=1e-12)


def test_q3ph_is_sum_of_phase_outputs():
    st_ = PhasorNetwork(topo(extra_load_a=FIXTURE_EXTRA)).solve(Sources(VN + 0j, VN + 0j))
    assert st_.q_pv3ph == pytest.approx(sum(st_.inverter3_power(p).imag for p in "abc"), abs=1e-6)


def test_power_conservation():
    t = topo(extra_load_a=FIXTURE_EXTRA)
    src = Sources(172 + 0j, cmath.rect(170, 0.04), cmath.rect(12, 2.0))
    st_ = PhasorNetwork(t).solve(src)
    zf = t.filter_z
    gen = 0.0
    for ph in "abc":
        e = src.e3 * PHASE_ROT[ph]
        gen += 0.5 * (e * ((e - st_.bus(ph, "T")) / zf).conjugate()).real
    gen += 0.5 * (src.e_pv * ((src.e_pv - st_.bus("a", "S")) / zf).conjugate()).real
    gen += -st_.s_ess_absorbed.real
    consumed = losses = 0.0
    for ph in "abc":
        i_line = st_.feeder_current(ph)
        losses += 0.5 * abs(i_line) ** 2 * t.line_z.real
        losses += 0.5 * abs((src.e3 * PHASE_ROT[ph] - st_.bus(ph, "T")) / zf) ** 2 * zf.real
        y = load_admittance(t.balanced_load.p, t.balanced_load.q, VN)
        if ph == "a":
            y += load_admittance(t.extra_load_a.p, t.extra_load_a.q, VN)
        consumed += 0.5 * abs(st_.bus(ph, "PCC")) ** 2 * y.real
    losses += 0.5 * abs(st_.i_tie) ** 2 * t.tie_z.real
    losses += 0.5 * abs(st_.i_pv) ** 2 * zf.real
    consumed += st_.s_load.real
    assert gen == pytest.approx(consumed + losses, rel=1e-6)
    # single-phase bus balance: PV + ESS - load - export = 0
    bus = st_.s_pv.real - st_.s_ess_absorbed.real - st_.s_load.real - st_.s_export.real
    assert abs(bus) < 1e-6 * st_.s_load.real


def test_constant_power_loads_converge_and_satisfy_kcl():
    t = topo(balanced_load=Load(2500, 1000, "p"), single_phase_load=Load(800, 500, "p"))
    net = PhasorNetwork(t)
    st_ = net.solve(Sources(VN + 0j, VN + 0j))
    assert 1 < st_.iterations <= net.MAX_ITER
    assert st_.kcl_residual < 1e-9
    assert st_.s_load == pytest.approx(complex(800, 500), rel=1e-6)
    warm = net.solve(Sources(VN + 0j, VN + 0j), warm=st_.v)
    assert warm.iterations <= st_.iterations
    assert abs(warm.bus("a", "S") - st_.bus("a", "S")) < 1e-6


def test_constant_power_collapse_reports_error():
    t = topo(balanced_load=Load(2e6, 0, "p"))
    with pytest.raises(PlantSolveError):
        PhasorNetwork(t).solve(Sources(VN + 0j, VN + 0j))


@pytest.mark.parametrize("ph, t, expected", [(170 + 0j, 0.0, 170.0), (cmath.rect(170, -math.pi / 2), 0.0, 0.0)])
def test_waveform_sample(ph, t, expected):
    assert waveform_sample(ph, W0, t) == pytest.approx(expected, abs=1e-12)


def test_waveform_rms():
    ph = cmath.rect(170, 0.3)
    t = np.arange(10000) / (60 * 10000)
    y = np.array([waveform_sample(ph, W0, tk) for tk in t])
    assert math.sqrt(np.mean(y * y)) == pytest.approx(170 / math.sqrt(2), abs=1e-6)


def test_ess_injection_zero_matches_absent_case():
    net = PhasorNetwork(topo())
    src = Sources(VN + 0j, VN + 0j)
    src2, clamped = apply_ess_injection(src, 0j, 60)
    assert not clamped
    assert net.solve(src2).v == net.solve(src).v


def test_ess_injection_in_phase_delivers_half_v_i():
    net = PhasorNetwork(topo())
    src = Sources(VN + 0j, VN + 0j)
    v_s = net.solve(src).bus("a", "S")
    for _ in range(50):  # align the injection with the resulting bus voltage
        src, _ = apply_ess_injection(src, 10 * v_s / abs(v_s), 60)
        v_s = net.solve(src).bus("a", "S")
    st_ = net.solve(src)
    assert -st_.s_ess_absorbed.real == pytest.approx(0.5 * abs(v_s) * 10, rel=1e-9)


def test_ess_injection_clamped():
    src, clamped = apply_ess_injection(Sources(VN + 0j, VN + 0j), 100j, 60)
    assert clamped and abs(src.i_ess) == pytest.approx(60)


def test_three_phase_dispatch_regulates_positive_sequence():
    t = topo(extra_load_a=FIXTURE_EXTRA)
    net = PhasorNetwork(t)
    inv = ThreePhaseInverter(VN)
    src = Sources(inv.emf, VN + 0j)
    for _ in range(5000):
        st_ = net.solve(src)
        src = Sources(three_phase_inverter_dispatch(inv, st_, 1e-4), src.e_pv)
    assert abs(net.solve(src).sequence().v_pos) == pytest.approx(VN, rel=1e-6)


def test_ess_filter_exact_rl_step():
    f = EssFilter(1.5e-3, 0.05, 1e-4)
    for _ in range(100000):
        f.step(10.0, 0.0)
    assert f.i == pytest.approx(10.0 / 0.05, rel=1e-6)


def test_compensable_extra_load_condition():
    t = topo()
    ld = compensable_extra_load(1500.0, t)
    y = load_admittance(ld.p, ld.q, VN)
    assert abs(1 + t.tie_z * y) == pytest.approx(1.0, abs=1e-12)
    assert ld.q < 0


def test_fixture_operating_point_vuf():
    op = operating_point(topo(extra_load_a=FIXTURE_EXTRA), 3000.0)
    assert op.vuf == pytest.approx(4.3, abs=0.1)
    assert op.state.kcl_residual < 1e-9
