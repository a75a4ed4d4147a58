"""Multi-function ESS controller.

Outer loops (run at the control rate, each an IA regulator):

* RPC  - drives the measured single-phase load reactive power to its
  reference by trimming the ESS active power.
* RPSA - drives the single-phase PV inverter reactive power to its
  rating-proportional share of the three-phase inverter's output by setting
  the ESS reactive power.
* PBR  - drives the bus-S voltage magnitude towards PCC phase a by moving
  the voltage command shared by the ESS and the single-phase PV inverter.

The power references become dq current references, then an instantaneous
current reference at the PLL angle, tracked by a PR current loop at the
plant rate.

Sign conventions: ESS powers and dq currents are in the load convention
(positive P charges the battery, positive Q absorbs reactive power). The
inner loop works with the current flowing out of the ESS into bus S.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .ia import IaState, ia_reset, ia_step
from .signal_blocks import LowPass, Pll, PrController, Sogi, single_phase_dq


class VoltageGuardError(ValueError):
    """Voltage reference too low to form current references."""


@dataclass(frozen=True)
class EssRatings:
    p_mppt: float
    p_rated_1ph: float
    p_rated_3ph: float
    q_l_ref: float
    v_ess_nominal: float  # peak
    p_l_ref: float

    def __post_init__(self):
        for name in ("p_rated_1ph", "p_rated_3ph", "v_ess_nominal"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def sharing_ratio(self) -> float:
        return self.p_rated_3ph / self.p_rated_1ph


@dataclass
class PowerMeasurement:
    p_avg: float
    q_avg: float


@dataclass
class EssReferences:
    p_ess_ref: float = 0.0
    q_ess_ref: float = 0.0
    v_d_ref: float = 0.0
    i_d_ref: float = 0.0
    i_q_ref: float = 0.0


# --------------------------------------------------------------------------
# control laws
# --------------------------------------------------------------------------

def measure_power(v_dq, i_dq, lpf_p: LowPass, lpf_q: LowPass) -> PowerMeasurement:
    """Filtered single-phase P and Q from voltage-aligned dq samples.

    ``p = LPF(v_d i_d / 2)``, ``q = LPF(-v_d i_q / 2)``.
    """
    v_d = v_dq[0]
    i_d, i_q = i_dq
    return PowerMeasurement(lpf_p.step(0.5 * v_d * i_d), lpf_q.step(-0.5 * v_d * i_q))


def rpc_step(q_meas: float, q_ref: float, ia: IaState) -> float:
    return ia_step(ia, q_ref, q_meas)


def ess_active_ref(p_mppt: float, p_load: float, p_rpc: float) -> float:
    """ESS active power reference: PV surplus plus the RPC trim."""
    return (p_mppt - p_load) + p_rpc


def rpsa_target(q_3ph: float, ratings: EssRatings) -> float:
    return q_3ph / (ratings.p_rated_3ph / ratings.p_rated_1ph)


def rpsa_step(q_3ph: float, q_1ph_meas: float, ratings: EssRatings, ia: IaState) -> float:
    return ia_step(ia, rpsa_target(q_3ph, ratings), q_1ph_meas)


def pbr_step(v_phase_mag: float, v_s_mag: float, v_nominal: float, ia: IaState) -> float:
    return ia_step(ia, v_phase_mag, v_s_mag) + v_nominal


def current_refs(p_ess_ref: float, q_ess_ref: float, v_d_ref: float,
                 v_min_guard: float = 0.0) -> tuple[float, float]:
    """dq current references ``(2P/V, -2Q/V)``."""
    if not v_d_ref >= v_min_guard or v_d_ref <= 0:
        raise VoltageGuardError(f"v_d_ref={v_d_ref:.3f} V below guard {v_min_guard:.3f} V")
    return 2.0 * p_ess_ref / v_d_ref, -2.0 * q_ess_ref / v_d_ref


def current_loop_step(i_ref: float, i_measured: float, pr: PrController,
                      v_ff: float = 0.0, v_dc: float = 300.0) -> float:
    """Inverter voltage command: PR on the current error plus bus-voltage feedforward,
    limited to the dc-link voltage."""
    v = pr.step(i_ref - i_measured) + v_ff
    return max(-v_dc, min(v_dc, v))


# --------------------------------------------------------------------------
# controller assembly
# --------------------------------------------------------------------------

@dataclass
class LoopGains:
    k_i: float
    k_d: float
    k_i_scale: float = 1.0
    limit: float | None = None

    def make_state(self) -> IaState:
        lim = None if self.limit is None else (-self.limit, self.limit)
        return IaState(self.k_i * self.k_i_scale, self.k_d, lim)


@dataclass
class Samples:
    """Instantaneous measurements delivered to the controller each plant step."""

    v_s: float
    i_load: float
    i_pv: float
    v_pcc_a: float
    v_3ph: tuple[float, float, float]
    i_3ph: tuple[float, float, float]


class _PowerMeter:
    """SOGI-based single-phase P/Q meter, rotation invariant."""

    def __init__(self, w0, dt, k):
        self.sv, self.si = Sogi(w0, dt, k), Sogi(w0, dt, k)

    def step(self, v, i):
        va, vb = self.sv.step(v)
        ia, ib = self.si.step(i)
        return 0.5 * (va * ia + vb * ib), 0.5 * (vb * ia - va * ib)


@dataclass
class EssController:
    ratings: EssRatings
    rpc_gains: LoopGains
    rpsa_gains: LoopGains
    pbr_gains: LoopGains
    pr_gains: dict
    w0: float
    dt: float
    w_lpf: float
    sogi_k: float = math.sqrt(2.0)
    pll_bandwidth: float | None = None
    v_dc: float = 300.0
    current_limit: float = math.inf
    guard_fraction: float = 0.2

    enabled: dict = field(default_factory=lambda: {"rpc": False, "rpsa": False, "pbr": False})
    refs: EssReferences = field(default_factory=EssReferences)
    diagnostics: list = field(default_factory=list)

    def __post_init__(self):
        w0, dt, k = self.w0, self.dt, self.sogi_k
        self.sogi_vs = Sogi(w0, dt, k)
        self.sogi_il = Sogi(w0, dt, k)
        self.sogi_ipv = Sogi(w0, dt, k)
        self.sogi_vpa = Sogi(w0, dt, k)
        self.sogi_iess = Sogi(w0, dt, k)
        self.pll = Pll(w0, dt, self.pll_bandwidth)
        lp = lambda: LowPass(self.w_lpf, dt)
        self.lpf_pl, self.lpf_ql, self.lpf_q3 = lp(), lp(), lp()
        self.lpf_ppv, self.lpf_qpv = lp(), lp()
        self.lpf_vpa, self.lpf_vs = lp(), lp()
        self.q3_meters = [_PowerMeter(w0, dt, k) for _ in range(3)]
        self.ia = {
            "rpc": self.rpc_gains.make_state(),
            "rpsa": self.rpsa_gains.make_state(),
            "pbr": self.pbr_gains.make_state(),
        }
        self.outputs = {"rpc": 0.0, "rpsa": 0.0, "pbr": 0.0}
        self.pr = PrController(
            self.pr_gains["k_p"], self.pr_gains["k_r"], self.pr_gains["w_c"], w0, dt
        )
        self.load_meas = PowerMeasurement(0.0, 0.0)
        self.pv_meas = PowerMeasurement(0.0, 0.0)
        self.q3_meas = 0.0
        self.v_pa_mag = 0.0
        self.v_s_mag = 0.0
        self.theta = 0.0
        self.refs.v_d_ref = self.ratings.v_ess_nominal
        self.p_mppt = self.ratings.p_mppt

    # -- events -----------------------------------------------------------
    def enable(self, loop: str) -> None:
        ia_reset(self.ia[loop])
        self.outputs[loop] = 0.0
        self.enabled[loop] = True

    # -- plant-rate measurement ---------------------------------------------
    def measure(self, s: Samples) -> None:
        vsa, vsb = self.sogi_vs.step(s.v_s)
        self.theta = self.pll.track_single(vsa, vsb)
        th = self.theta
        v_dq = single_phase_dq(vsa, vsb, th)
        il_dq = single_phase_dq(*self.sogi_il.step(s.i_load), th)
        ipv_dq = single_phase_dq(*self.sogi_ipv.step(s.i_pv), th)
        self.load_meas = measure_power(v_dq, il_dq, self.lpf_pl, self.lpf_ql)
        self.pv_meas = measure_power(v_dq, ipv_dq, self.lpf_ppv, self.lpf_qpv)
        q3 = 0.0
        for meter, v, i in zip(self.q3_meters, s.v_3ph, s.i_3ph):
            q3 += meter.step(v, i)[1]
        self.q3_meas = self.lpf_q3.step(q3)
        self.sogi_vpa.step(s.v_pcc_a)
        self.v_pa_mag = self.lpf_vpa.step(self.sogi_vpa.magnitude)
        self.v_s_mag = self.lpf_vs.step(self.sogi_vs.magnitude)

    # -- control-rate outer loops -------------------------------------------
    def control(self, t: float) -> EssReferences:
        r = self.ratings
        if self.enabled["rpc"]:
            self.outputs["rpc"] = rpc_step(self.load_meas.q_avg, r.q_l_ref, self.ia["rpc"])
        if self.enabled["rpsa"]:
            self.outputs["rpsa"] = rpsa_step(self.q3_meas, self.pv_meas.q_avg, r, self.ia["rpsa"])
        if self.enabled["pbr"]:
            v_d_ref = pbr_step(self.v_pa_mag, self.v_s_mag, r.v_ess_nominal, self.ia["pbr"])
        else:
            v_d_ref = r.v_ess_nominal
        p_ref = ess_active_ref(self.p_mppt, self.load_meas.p_avg, self.outputs["rpc"])
        q_ref = self.outputs["rpsa"]
        try:
            i_d, i_q = current_refs(p_ref, q_ref, v_d_ref, self.guard_fraction * r.v_ess_nominal)
        except VoltageGuardError as exc:
            self.diagnostics.append((t, "voltage_guard", str(exc)))
            return self.refs
        mag = math.hypot(i_d, i_q)
        if mag > self.current_limit:
            i_d, i_q = i_d * self.current_limit / mag, i_q * self.current_limit / mag
        self.refs = EssReferences(p_ref, q_ref, v_d_ref, i_d, i_q)
        return self.refs

    # -- plant-rate inner loop ----------------------------------------------
    def current_reference(self) -> float:
        """Instantaneous ESS output-current reference at the present PLL angle."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return -(self.refs.i_d_ref * c - self.refs.i_q_ref * s)

    def sogi_iess_phasor(self, i_out: float, t: float) -> complex:
        """Track the ESS output current and return its fundamental phasor at ``t``."""
        self.sogi_iess.step(i_out)
        return self.sogi_iess.phasor(t)

    def inner_step(self, i_out_measured: float, v_bus: float) -> float:
        return current_loop_step(self.current_reference(), i_out_measured, self.pr,
                                 v_ff=v_bus, v_dc=self.v_dc)
