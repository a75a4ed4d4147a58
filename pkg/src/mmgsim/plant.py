"""Fundamental-frequency phasor model of the islanded multi-microgrid.

Topology (4-wire, each phase solved independently)::

    3ph inverter EMF --Zf-- T --Z_line-- PCC ---- balanced load (+ extra load on a)
                                          |
                                   (phase a only)
                                          |
                                        Z_tie
                                          |
    1ph PV EMF ----------Zf-------------- S ---- single-phase load
                                          |
                                         ESS (controlled current source)

Nodes are ``T``, ``PCC`` on every phase, plus ``S`` on phase a. Sources are
represented as Norton equivalents, loads as shunt admittances (or
constant-power injections resolved by fixed-point iteration), and ``Y V = I``
is solved per phase every plant step.

Numeric defaults for impedances and loads are fixture choices; only the
filter values and the ratings come from the published parameter table.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .signal_blocks import A_OP, fortescue

PHASES = ("a", "b", "c")
PHASE_ROT = {"a": 1.0 + 0j, "b": A_OP * A_OP, "c": A_OP}


class SingularNetworkError(ValueError):
    pass


class PlantSolveError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# generic nodal solve
# --------------------------------------------------------------------------

def build_admittance(n_bus: int, branches, shunts) -> np.ndarray:
    """Nodal admittance matrix from ``(i, j, z)`` series branches and ``{bus: y}`` shunts."""
    Y = np.zeros((n_bus, n_bus), dtype=complex)
    for i, j, z in branches:
        if z == 0:
            raise SingularNetworkError(f"zero impedance branch {i}-{j}")
        y = 1.0 / z
        Y[i, i] += y
        Y[j, j] += y
        Y[i, j] -= y
        Y[j, i] -= y
    for bus, y in shunts.items():
        Y[bus, bus] += y
    return Y


def invert_admittance(Y: np.ndarray) -> np.ndarray:
    if np.linalg.cond(Y) > 1e12:
        raise SingularNetworkError("nodal admittance matrix is singular")
    return np.linalg.inv(Y)


def load_admittance(p: float, q: float, v_rated: float) -> complex:
    """Constant-impedance load drawing ``p + jq`` at peak voltage ``v_rated``."""
    return complex(p, -q) / (0.5 * v_rated * v_rated)


def complex_power(v: complex, i: complex) -> complex:
    """``S = 1/2 V conj(I)`` for peak phasors; Q > 0 for lagging current."""
    return 0.5 * v * i.conjugate()


def waveform_sample(phasor: complex, w0: float, t: float) -> float:
    """Instantaneous value ``Re{X e^{j w0 t}}``."""
    return (phasor * cmath.exp(1j * w0 * t)).real


# --------------------------------------------------------------------------
# topology
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Load:
    p: float  # W at rated voltage
    q: float  # VAR at rated voltage, > 0 inductive
    model: str = "z"  # "z" constant impedance, "p" constant power

    def __post_init__(self):
        if self.model not in ("z", "p"):
            raise ValueError(f"unknown load model {self.model!r}")


@dataclass(frozen=True)
class NetworkTopology:
    v_nominal: float  # peak phase voltage
    w0: float
    filter_l: float = 1.5e-3
    filter_r: float = 0.05
    line_z: complex = 0.2 + 0.1j
    tie_z: complex = 0.2 + 0.1j
    balanced_load: Load = Load(2500.0, 1000.0)
    extra_load_a: Load = Load(0.0, 0.0)
    single_phase_load: Load = Load(800.0, 500.0)

    @property
    def filter_z(self) -> complex:
        return complex(self.filter_r, self.w0 * self.filter_l)

    def validate(self) -> None:
        for name in ("line_z", "tie_z", "filter_z"):
            if getattr(self, name) == 0:
                raise SingularNetworkError(f"{name} must be nonzero")
        if self.v_nominal <= 0 or self.w0 <= 0:
            raise ValueError("v_nominal and w0 must be positive")


BUSES = {"a": ("T", "PCC", "S"), "b": ("T", "PCC"), "c": ("T", "PCC")}


@dataclass
class Sources:
    """Source setpoints for one solve.

    ``e3`` is the phase-a EMF of the three-phase inverter (b, c follow the
    positive sequence), ``e_pv`` the single-phase PV EMF, ``i_ess`` the ESS
    current injected into bus S (generator convention).
    """

    e3: complex
    e_pv: complex
    i_ess: complex = 0j


@dataclass
class PlantState:
    """Solved node voltages and derived flows for one step."""

    v: dict
    sources: Sources
    topology: NetworkTopology
    kcl_residual: float
    iterations: int = 1

    def bus(self, phase: str, name: str) -> complex:
        return self.v[phase][BUSES[phase].index(name)]

    # flows --------------------------------------------------------------
    def feeder_current(self, phase: str) -> complex:
        """Current from the three-phase MG feeder into the PCC."""
        return (self.bus(phase, "T") - self.bus(phase, "PCC")) / self.topology.line_z

    def pcc_voltages(self) -> tuple[complex, complex, complex]:
        return tuple(self.bus(p, "PCC") for p in PHASES)

    def pcc_power(self, phase: str) -> complex:
        return complex_power(self.bus(phase, "PCC"), self.feeder_current(phase))

    def inverter3_power(self, phase: str) -> complex:
        return complex_power(self.bus(phase, "T"), self.feeder_current(phase))

    @property
    def q_pv3ph(self) -> float:
        return sum(self.inverter3_power(p).imag for p in PHASES)

    @property
    def i_pv(self) -> complex:
        return (self.sources.e_pv - self.bus("a", "S")) / self.topology.filter_z

    @property
    def s_pv(self) -> complex:
        return complex_power(self.bus("a", "S"), self.i_pv)

    @property
    def i_load(self) -> complex:
        vs = self.bus("a", "S")
        ld = self.topology.single_phase_load
        if ld.model == "z":
            return load_admittance(ld.p, ld.q, self.topology.v_nominal) * vs
        return (2.0 * complex(ld.p, ld.q) / vs).conjugate()

    @property
    def s_load(self) -> complex:
        return complex_power(self.bus("a", "S"), self.i_load)

    @property
    def i_tie(self) -> complex:
        """Export current from the single-phase bus towards PCC phase a."""
        return (self.bus("a", "S") - self.bus("a", "PCC")) / self.topology.tie_z

    @property
    def s_export(self) -> complex:
        return complex_power(self.bus("a", "S"), self.i_tie)

    @property
    def s_ess_absorbed(self) -> complex:
        """ESS power in the load convention (positive P = charging)."""
        return complex_power(self.bus("a", "S"), -self.sources.i_ess)

    def sequence(self):
        return fortescue(*self.pcc_voltages())


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

class PhasorNetwork:
    """Per-phase nodal solver for the fixed multi-microgrid topology."""

    MAX_ITER = 50
    REL_TOL = 1e-8

    def __init__(self, topology: NetworkTopology):
        topology.validate()
        self.topology = topology
        self._build()

    def _build(self) -> None:
        t = self.topology
        zf, vr = t.filter_z, t.v_nominal
        self._yf = 1.0 / zf
        self.Y: dict[str, np.ndarray] = {}
        self.Z: dict[str, list[list[complex]]] = {}
        for ph in PHASES:
            buses = BUSES[ph]
            idx = {b: k for k, b in enumerate(buses)}
            branches = [(idx["T"], idx["PCC"], t.line_z)]
            shunts = {idx["T"]: self._yf}
            pcc_loads = [t.balanced_load] + ([t.extra_load_a] if ph == "a" else [])
            y_pcc = sum(
                (load_admittance(ld.p, ld.q, vr) for ld in pcc_loads if ld.model == "z"),
                0j,
            )
            shunts[idx["PCC"]] = y_pcc
            if ph == "a":
                branches.append((idx["PCC"], idx["S"], t.tie_z))
                ld = t.single_phase_load
                y_s = load_admittance(ld.p, ld.q, vr) if ld.model == "z" else 0j
                shunts[idx["S"]] = self._yf + y_s
            Y = build_admittance(len(buses), branches, shunts)
            self.Y[ph] = Y
            self.Z[ph] = invert_admittance(Y).tolist()
        self._p_loads = self._constant_power_loads()

    def _constant_power_loads(self):
        """(phase, bus index, S) for every constant-power load."""
        t = self.topology
        out = []
        if t.balanced_load.model == "p":
            out += [(ph, 1, complex(t.balanced_load.p, t.balanced_load.q)) for ph in PHASES]
        if t.extra_load_a.model == "p":
            out.append(("a", 1, complex(t.extra_load_a.p, t.extra_load_a.q)))
        if t.single_phase_load.model == "p":
            out.append(("a", 2, complex(t.single_phase_load.p, t.single_phase_load.q)))
        return out

    def with_topology(self, topology: NetworkTopology) -> "PhasorNetwork":
        return PhasorNetwork(topology)

    def _injections(self, src: Sources) -> dict[str, list[complex]]:
        yf = self._yf
        inj = {}
        for ph in PHASES:
            vec = [src.e3 * PHASE_ROT[ph] * yf, 0j]
            if ph == "a":
                vec.append(src.e_pv * yf + src.i_ess)
            inj[ph] = vec
        return inj

    @staticmethod
    def _matvec(M, x):
        return [sum(m * xi for m, xi in zip(row, x)) for row in M]

    def solve(self, src: Sources, warm: dict | None = None) -> PlantState:
        base = self._injections(src)
        iterations = 1
        if not self._p_loads:
            v = {ph: self._matvec(self.Z[ph], base[ph]) for ph in PHASES}
            inj = base
        else:
            v = warm or {ph: self._matvec(self.Z[ph], base[ph]) for ph in PHASES}
            for iterations in range(1, self.MAX_ITER + 1):
                inj = {ph: list(vec) for ph, vec in base.items()}
                for ph, k, s in self._p_loads:
                    vk = v[ph][k]
                    if abs(vk) < 1e-9:
                        raise PlantSolveError("constant-power load at collapsed voltage")
                    inj[ph][k] -= (2.0 * s / vk).conjugate()
                new = {ph: self._matvec(self.Z[ph], inj[ph]) for ph in PHASES}
                delta = max(abs(n - o) for ph in PHASES for n, o in zip(new[ph], v[ph]))
                scale = max(abs(x) for ph in PHASES for x in new[ph]) or 1.0
                v = new
                if delta <= self.REL_TOL * scale:
                    break
            else:
                raise PlantSolveError(
                    f"constant-power load iteration did not converge in {self.MAX_ITER} "
                    f"iterations (last change {delta:.3e} V)"
                )
        resid = 0.0
        for ph in PHASES:
            r = self._matvec(self.Y[ph].tolist(), v[ph])
            resid = max(resid, max(abs(a - b) for a, b in zip(r, inj[ph])))
        return PlantState(v, src, self.topology, resid, iterations)


# --------------------------------------------------------------------------
# source models
# --------------------------------------------------------------------------

@dataclass
class ThreePhaseInverter:
    """Grid-forming three-phase PV inverter (slack of the islanded system).

    Holds frequency and phase reference; its EMF magnitude is trimmed by a
    slow integral regulator so the PCC positive-sequence voltage stays at
    nominal. Its per-phase powers are whatever the network solve gives.
    """

    v_nominal: float
    tau: float = 0.02
    e_mag: float = 0.0

    def __post_init__(self):
        if self.e_mag == 0.0:
            self.e_mag = self.v_nominal

    @property
    def emf(self) -> complex:
        return complex(self.e_mag, 0.0)


def three_phase_inverter_dispatch(inv: ThreePhaseInverter, state: PlantState, dt: float) -> complex:
    """Update the three-phase EMF from the solved state; returns the new EMF phasor."""
    v_pos = abs(state.sequence().v_pos)
    inv.e_mag += (dt / inv.tau) * (inv.v_nominal - v_pos)
    return inv.emf


@dataclass
class SinglePhasePvInverter:
    """Grid-forming single-phase PV inverter on bus S.

    EMF magnitude follows the voltage command from the power balance
    regulator; the EMF angle is trimmed so the terminal active power equals
    the MPPT power (a P-delta loop, time constant ``tau`` at nominal
    stiffness).
    """

    v_nominal: float
    filter_x: float
    p_set: float
    v_cmd: float = 0.0
    delta: float = 0.0
    tau: float = 0.01

    def __post_init__(self):
        if self.v_cmd == 0.0:
            self.v_cmd = self.v_nominal

    @property
    def emf(self) -> complex:
        return cmath.rect(self.v_cmd, self.delta)

    def dispatch(self, state: PlantState, dt: float) -> complex:
        stiffness = 0.5 * self.v_nominal ** 2 / self.filter_x  # W/rad
        self.delta += (dt / self.tau) * (self.p_set - state.s_pv.real) / stiffness
        return self.emf


@dataclass
class EssFilter:
    """Averaged ESS inverter output stage: series R-L into bus S.

    ``L di/dt = v_inv - v_bus - R i`` with ``i`` flowing out of the ESS;
    integrated exactly for piecewise-constant voltages.
    """

    l: float
    r: float
    dt: float
    i: float = 0.0
    _a: float = field(init=False, repr=False)
    _b: float = field(init=False, repr=False)

    def __post_init__(self):
        self._a = math.exp(-self.r * self.dt / self.l)
        self._b = (1.0 - self._a) / self.r if self.r > 0 else self.dt / self.l

    def step(self, v_inv: float, v_bus: float) -> float:
        self.i = self._a * self.i + self._b * (v_inv - v_bus)
        return self.i


def apply_ess_injection(src: Sources, i_cmd: complex, ceiling: float) -> tuple[Sources, bool]:
    """Set the ESS injection, clamping its magnitude to ``ceiling`` (A peak)."""
    mag = abs(i_cmd)
    clamped = mag > ceiling
    if clamped:
        i_cmd = i_cmd * (ceiling / mag)
    return Sources(src.e3, src.e_pv, i_cmd), clamped


# --------------------------------------------------------------------------
# steady-state operating point and fixture generation
# --------------------------------------------------------------------------

@dataclass
class OperatingPoint:
    state: PlantState
    e3: float
    delta_pv: float
    vuf: float


def operating_point(
    topology: NetworkTopology,
    p_mppt: float,
    v_d_ref: float | None = None,
    p_rpc: float = 0.0,
    q_ess_ref: float = 0.0,
) -> OperatingPoint:
    """Algebraic steady state with the ESS following its power references.

    The ESS current is aligned to the bus-S voltage as the dq references
    prescribe (``i_d = 2P/V_d``, ``i_q = -2Q/V_d``) with
    ``P = p_mppt - P_load + p_rpc``; the PV inverter delivers ``p_mppt`` and
    the three-phase inverter holds the PCC positive sequence at nominal.
    """
    from scipy.optimize import fsolve

    net = PhasorNetwork(topology)
    vn = topology.v_nominal
    vd = v_d_ref if v_d_ref is not None else vn

    def build(x):
        e3, delta, ang = x
        src = Sources(complex(e3, 0.0), cmath.rect(vd, delta))
        st = net.solve(src)
        p_load = st.s_load.real
        p_ref = p_mppt - p_load + p_rpc
        i_abs = complex(2.0 * p_ref / vd, -2.0 * q_ess_ref / vd) * cmath.exp(1j * ang)
        return net.solve(Sources(src.e3, src.e_pv, -i_abs))

    def residual(x):
        st = build(x)
        vs = st.bus("a", "S")
        return [
            abs(st.sequence().v_pos) - vn,
            (st.s_pv.real - p_mppt) / vn,
            math.remainder(cmath.phase(vs) - x[2], 2 * math.pi),
        ]

    x, _, ok, msg = fsolve(residual, [vn * 1.05, 0.05, 0.0], xtol=1e-13, full_output=True)
    if ok != 1:
        raise PlantSolveError(f"operating point did not converge: {msg}")
    st = build(x)
    seq = st.sequence()
    return OperatingPoint(st, float(x[0]), float(x[1]), abs(seq.v_neg) / abs(seq.v_pos) * 100.0)


def compensable_extra_load(p_extra: float, topology: NetworkTopology) -> Load:
    """Phase-a extra load that the controllers can balance exactly.

    At the controlled equilibrium the single-phase bus and PCC phase a sit
    at equal magnitude and the single-phase MG exports exactly the extra
    phase-a load. Both hold only if ``|1 + Z_tie dY| = 1``; for a given
    conductance this fixes the (capacitive) susceptance.
    """
    vn = topology.v_nominal
    g = p_extra / (0.5 * vn * vn)
    if g == 0:
        return Load(0.0, 0.0)
    # |c + d b|^2 = 1 with c = 1 + Z g, d = jZ; take the smaller root
    z = topology.tie_z
    c, d = 1.0 + z * g, 1j * z
    qa = abs(d) ** 2
    qb = 2.0 * (c * d.conjugate()).real
    qc = abs(c) ** 2 - 1.0
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        raise ValueError(f"no compensable susceptance for {p_extra} W on this tie line")
    b = (-qb - math.sqrt(disc)) / (2.0 * qa)
    y = complex(g, b)
    s = 0.5 * vn * vn * y.conjugate()
    return Load(s.real, s.imag)


def fit_unbalance(
    topology: NetworkTopology,
    p_mppt: float,
    target_vuf: float = 4.3,
    tol: float = 1e-4,
    p_max: float = 6000.0,
) -> tuple[Load, float]:
    """Bisect the compensable phase-a extra load until the uncontrolled VUF hits ``target_vuf``."""

    def vuf_for(p):
        topo = replace(topology, extra_load_a=compensable_extra_load(p, topology))
        return operating_point(topo, p_mppt).vuf

    lo, hi = 0.0, p_max
    if vuf_for(hi) < target_vuf:
        raise ValueError(f"target VUF {target_vuf}% unreachable below {p_max} W extra load")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        v = vuf_for(mid)
        if abs(v - target_vuf) < tol:
            break
        lo, hi = (mid, hi) if v < target_vuf else (lo, mid)
    return compensable_extra_load(mid, topology), v
