"""Scenario configuration and the fixed-step simulation loop.

Configurations are INI files. Every section and key is required unless a
default is listed in :data:`SCHEMA`; unknown sections or keys are rejected.
All violations are collected and reported together in one
:class:`ConfigError`.

Per plant step the loop:

1. solves the phasor network for the present source setpoints;
2. samples the instantaneous measurements at ``t``;
3. runs the controller's SOGI/PLL/filter blocks;
4. on control ticks, steps the IA loops and refreshes current references;
5. runs the PR current loop and the ESS output filter, and converts the
   ESS current back to a phasor for the next solve;
6. dispatches the three-phase and single-phase PV inverters;
7. logs telemetry on logging ticks.
"""

from __future__ import annotations

import configparser
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .ess_control import EssController, EssRatings, LoopGains, Samples
from .plant import (
    PHASES,
    EssFilter,
    Load,
    NetworkTopology,
    PhasorNetwork,
    PlantSolveError,
    SinglePhasePvInverter,
    Sources,
    ThreePhaseInverter,
    apply_ess_injection,
    three_phase_inverter_dispatch,
)

log = logging.getLogger(__name__)

DEFAULT_SCENARIO = Path(__file__).parent / "scenarios" / "default.cfg"


class ConfigError(ValueError):
    """Invalid scenario configuration; ``errors`` lists every violation."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


class SimulationError(RuntimeError):
    pass


_REQ = object()

# section -> key -> (type, default)
SCHEMA = {
    "simulation": {
        "dt_plant": (float, _REQ),
        "dt_ctrl": (float, _REQ),
        "dt_log": (float, _REQ),
        "horizon": (float, _REQ),
        "seed": (int, 0),
        "load_jitter": (float, 0.0),
    },
    "network": {
        "v_nominal_rms": (float, _REQ),
        "frequency_hz": (float, _REQ),
        "filter_l": (float, _REQ),
        "filter_r": (float, _REQ),
        "line_r": (float, _REQ),
        "line_x": (float, _REQ),
        "tie_r": (float, _REQ),
        "tie_x": (float, _REQ),
        "switching_frequency_hz": (float, _REQ),
        "inverter_3ph_tau": (float, 0.02),
        "pv_1ph_tau": (float, 0.01),
    },
    "loads": {
        "balanced_p_w": (float, _REQ),
        "balanced_q_var": (float, _REQ),
        "extra_a_p_w": (float, 0.0),
        "extra_a_q_var": (float, 0.0),
        "single_phase_p_w": (float, _REQ),
        "single_phase_q_var": (float, _REQ),
        "model": (str, "z"),
    },
    "ratings": {
        "p_mppt_w": (float, _REQ),
        "p_rated_1ph_w": (float, _REQ),
        "p_rated_3ph_w": (float, _REQ),
        "p_load_ref_w": (float, _REQ),
        "q_load_ref_var": (float, _REQ),
        "v_ess_nominal_rms": (float, _REQ),
        "v_dc": (float, _REQ),
        "ess_current_limit_a": (float, _REQ),
    },
    "pr": {
        "k_p": (float, _REQ),
        "w_c": (float, _REQ),
        "k_r1": (float, _REQ),
        "k_r3": (float, 0.0),
        "k_r5": (float, 0.0),
        "k_r7": (float, 0.0),
    },
    "measurement": {
        "w_lpf": (float, _REQ),
        "sogi_k": (float, math.sqrt(2.0)),
        "pll_bandwidth": (float, 0.0),
    },
    "events": {"schedule": (str, "")},
    "output": {"dir": (str, "results"), "csv_name": (str, "telemetry.csv")},
}
for _loop in ("rpc", "rpsa", "pbr"):
    SCHEMA[f"ia.{_loop}"] = {
        "k_i": (float, _REQ),
        "k_d": (float, _REQ),
        "k_i_scale": (float, 1.0),
        "limit": (float, 0.0),
    }

EVENT_ARGS = {
    "enable_rpc": 0,
    "enable_rpsa": 0,
    "enable_pbr": 0,
    "set_mppt": 1,
    "set_load": 3,
}
LOAD_TARGETS = ("balanced", "extra_a", "single_phase")


@dataclass(frozen=True)
class Event:
    t: float
    action: str
    args: tuple = ()


@dataclass
class ScenarioConfig:
    values: dict
    events: list[Event]
    source: str = "<string>"

    def __getitem__(self, section):
        return self.values[section]

    @property
    def w0(self) -> float:
        return 2.0 * math.pi * self.values["network"]["frequency_hz"]

    @property
    def v_nominal(self) -> float:
        return math.sqrt(2.0) * self.values["network"]["v_nominal_rms"]

    def with_overrides(self, **sections) -> "ScenarioConfig":
        """Copy with ``{section: {key: value}}`` overrides applied (no re-validation)."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for s, kv in sections.items():
            vals[s].update(kv)
        return ScenarioConfig(vals, list(self.events), self.source)


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _parse_events(text: str, errors: list) -> list[Event]:
    events = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            t = float(parts[0])
        except ValueError:
            errors.append(f"events: line {lineno}: bad time {parts[0]!r}")
            continue
        if len(parts) < 2:
            errors.append(f"events: line {lineno}: missing action")
            continue
        action, args = parts[1], parts[2:]
        if action not in EVENT_ARGS:
            errors.append(f"events: line {lineno}: unknown action {action!r}")
            continue
        if len(args) != EVENT_ARGS[action]:
            errors.append(f"events: line {lineno}: {action} takes {EVENT_ARGS[action]} arguments")
            continue
        if action == "set_load":
            if args[0] not in LOAD_TARGETS:
                errors.append(f"events: line {lineno}: load target must be one of {LOAD_TARGETS}")
                continue
            try:
                args = (args[0], float(args[1]), float(args[2]))
            except ValueError:
                errors.append(f"events: line {lineno}: bad load values")
                continue
        elif action == "set_mppt":
            try:
                args = (float(args[0]),)
            except ValueError:
                errors.append(f"events: line {lineno}: bad power value")
                continue
        events.append(Event(t, action, tuple(args)))
    return sorted(events, key=lambda e: e.t)


def _is_multiple(x: float, base: float) -> bool:
    n = round(x / base)
    return n >= 1 and abs(n * base - x) <= 1e-9 * max(1.0, x)


def _semantic_checks(v: dict, events: list[Event], errors: list) -> None:
    sim, net, rat = v["simulation"], v["network"], v["ratings"]
    dt = sim["dt_plant"]
    for key in ("dt_plant", "dt_ctrl", "dt_log", "horizon"):
        if not sim[key] > 0:
            errors.append(f"simulation.{key} must be positive")
    if dt > 0:
        if sim["dt_ctrl"] < dt:
            errors.append("simulation.dt_ctrl must be >= simulation.dt_plant")
        elif not _is_multiple(sim["dt_ctrl"], dt):
            errors.append("simulation.dt_ctrl must be an integer multiple of dt_plant")
        if sim["dt_log"] > 0 and not _is_multiple(sim["dt_log"], dt):
            errors.append("simulation.dt_log must be an integer multiple of dt_plant")
        if sim["horizon"] > 0 and not _is_multiple(sim["horizon"], dt):
            errors.append("simulation.horizon must be an integer multiple of dt_plant")
        if net["switching_frequency_hz"] > 0 and dt * net["switching_frequency_hz"] < 1.0 - 1e-9:
            errors.append("simulation.dt_plant must not be shorter than one switching period "
                          "(averaged inverter models)")
        if net["frequency_hz"] > 0 and 7 * 2 * math.pi * net["frequency_hz"] * dt >= math.pi:
            errors.append("simulation.dt_plant too large for the 7th-harmonic resonator")
    if not 0 <= sim["load_jitter"] < 0.5:
        errors.append("simulation.load_jitter must be in [0, 0.5)")
    for key in ("v_nominal_rms", "frequency_hz", "filter_l", "switching_frequency_hz",
                "inverter_3ph_tau", "pv_1ph_tau"):
        if not net[key] > 0:
            errors.append(f"network.{key} must be positive")
    for key in ("filter_r", "line_r", "tie_r"):
        if net[key] < 0:
            errors.append(f"network.{key} must be >= 0")
    if net["line_r"] == 0 and net["line_x"] == 0:
        errors.append("network line impedance must be nonzero")
    if net["tie_r"] == 0 and net["tie_x"] == 0:
        errors.append("network tie impedance must be nonzero")
    if v["loads"]["model"] not in ("z", "p"):
        errors.append("loads.model must be 'z' or 'p'")
    for key in ("p_rated_1ph_w", "p_rated_3ph_w", "v_ess_nominal_rms", "v_dc",
                "ess_current_limit_a"):
        if not rat[key] > 0:
            errors.append(f"ratings.{key} must be positive")
    if rat["p_mppt_w"] < 0:
        errors.append("ratings.p_mppt_w must be >= 0")
    for loop in ("rpc", "rpsa", "pbr"):
        sec = v[f"ia.{loop}"]
        for key in ("k_i", "k_d", "k_i_scale", "limit"):
            if sec[key] < 0:
                errors.append(f"ia.{loop}.{key} must be >= 0")
    pr = v["pr"]
    for key in pr:
        if pr[key] < 0:
            errors.append(f"pr.{key} must be >= 0")
    if not pr["w_c"] > 0:
        errors.append("pr.w_c must be positive")
    m = v["measurement"]
    if not m["w_lpf"] > 0:
        errors.append("measurement.w_lpf must be positive")
    elif dt > 0 and m["w_lpf"] * dt >= 2:
        errors.append("measurement.w_lpf too high for dt_plant")
    if not m["sogi_k"] > 0:
        errors.append("measurement.sogi_k must be positive")
    if m["pll_bandwidth"] < 0:
        errors.append("measurement.pll_bandwidth must be >= 0")
    for ev in events:
        if ev.t < 0 or (sim["horizon"] > 0 and ev.t >= sim["horizon"]):
            errors.append(f"event {ev.action} at t={ev.t} outside [0, horizon)")
        elif dt > 0 and abs(round(ev.t / dt) * dt - ev.t) > 1e-9 * max(1.0, ev.t):
            errors.append(f"event {ev.action} at t={ev.t} not aligned to dt_plant")


def parse_config(text: str, source: str = "<string>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    errors: list[str] = []
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: {exc}"]) from exc

    for sec in cp.sections():
        if sec not in SCHEMA:
            errors.append(f"unknown section [{sec}]")
    values: dict = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        present = cp[sec] if cp.has_section(sec) else {}
        for key in present:
            if key not in keys:
                errors.append(f"unknown key {sec}.{key}")
        for key, (typ, default) in keys.items():
            if key in present:
                raw = present[key]
                try:
                    val = typ(raw)
                except ValueError:
                    errors.append(f"{sec}.{key}: cannot parse {raw!r} as {typ.__name__}")
                    continue
                if typ is float and not math.isfinite(val):
                    errors.append(f"{sec}.{key} must be finite")
                    continue
                values[sec][key] = val
            elif default is _REQ:
                errors.append(f"missing required key {sec}.{key}")
            else:
                values[sec][key] = default

    events = _parse_events(values["events"].get("schedule", ""), errors)
    if not errors:
        _semantic_checks(values, events, errors)
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(values, events, source)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    return parse_config(text, str(path))


def default_config() -> ScenarioConfig:
    return load_config(DEFAULT_SCENARIO)


# --------------------------------------------------------------------------
# model assembly
# --------------------------------------------------------------------------

def build_topology(cfg: ScenarioConfig, rng: np.random.Generator | None = None) -> NetworkTopology:
    net, ld = cfg["network"], cfg["loads"]
    model = ld["model"]
    bal = Load(ld["balanced_p_w"], ld["balanced_q_var"], model)
    jitter = cfg["simulation"]["load_jitter"]
    if jitter > 0 and rng is not None:
        f = 1.0 + jitter * rng.standard_normal()
        bal = Load(bal.p * f, bal.q * f, model)
    return NetworkTopology(
        v_nominal=cfg.v_nominal,
        w0=cfg.w0,
        filter_l=net["filter_l"],
        filter_r=net["filter_r"],
        line_z=complex(net["line_r"], net["line_x"]),
        tie_z=complex(net["tie_r"], net["tie_x"]),
        balanced_load=bal,
        extra_load_a=Load(ld["extra_a_p_w"], ld["extra_a_q_var"], model),
        single_phase_load=Load(ld["single_phase_p_w"], ld["single_phase_q_var"], model),
    )


def build_controller(cfg: ScenarioConfig) -> EssController:
    rat, pr, m, sim = cfg["ratings"], cfg["pr"], cfg["measurement"], cfg["simulation"]
    v_ess = math.sqrt(2.0) * rat["v_ess_nominal_rms"]
    ratings = EssRatings(
        p_mppt=rat["p_mppt_w"],
        p_rated_1ph=rat["p_rated_1ph_w"],
        p_rated_3ph=rat["p_rated_3ph_w"],
        q_l_ref=rat["q_load_ref_var"],
        v_ess_nominal=v_ess,
        p_l_ref=rat["p_load_ref_w"],
    )

    def gains(loop):
        s = cfg[f"ia.{loop}"]
        return LoopGains(s["k_i"], s["k_d"], s["k_i_scale"], s["limit"] or None)

    k_r = {1: pr["k_r1"], 3: pr["k_r3"], 5: pr["k_r5"], 7: pr["k_r7"]}
    return EssController(
        ratings=ratings,
        rpc_gains=gains("rpc"),
        rpsa_gains=gains("rpsa"),
        pbr_gains=gains("pbr"),
        pr_gains={"k_p": pr["k_p"], "w_c": pr["w_c"], "k_r": {k: g for k, g in k_r.items() if g > 0}},
        w0=cfg.w0,
        dt=sim["dt_plant"],
        w_lpf=m["w_lpf"],
        sogi_k=m["sogi_k"],
        pll_bandwidth=m["pll_bandwidth"] or None,
        v_dc=rat["v_dc"],
        current_limit=rat["ess_current_limit_a"],
    )


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    records: list
    summary: metrics.RunSummary
    event_log: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    kcl_residual_max: float = 0.0
    ess_energy_wh: float = 0.0
    wall_time_s: float = 0.0
    csv_path: Path | None = None

    def csv_text(self) -> str:
        return metrics.csv_text(self.records)


def _enable_time(cfg: ScenarioConfig) -> float:
    times = [e.t for e in cfg.events if e.action.startswith("enable_")]
    return min(times) if times else cfg["simulation"]["horizon"]


def run(cfg: ScenarioConfig, horizon: float | None = None, out_dir=None,
        progress: bool = False) -> RunResult:
    """Simulate the scenario; optionally write the telemetry CSV to ``out_dir``.

    On a runtime failure the rows logged so far are still written before
    :class:`SimulationError` propagates.
    """
    sim = cfg["simulation"]
    dt = sim["dt_plant"]
    horizon = sim["horizon"] if horizon is None else horizon
    if not horizon > 0:
        raise ConfigError(["horizon must be positive"])
    sim_run = _Run(cfg, dt, int(round(horizon / dt)))
    t0 = time.perf_counter()
    try:
        sim_run.execute(progress)
    except (PlantSolveError, SimulationError, ValueError) as exc:
        _write_csv(cfg, sim_run.records, out_dir)
        raise SimulationError(
            f"aborted at step {sim_run.k} (t={sim_run.k * dt:.4f} s): {exc}; "
            f"{len(sim_run.records)} rows preserved"
        ) from exc
    wall = time.perf_counter() - t0
    energy_wh = sim_run.energy_j / 3600.0
    summary = metrics.summarize(sim_run.records, _enable_time(cfg), wall, energy_wh,
                                sharing_target=sim_run.ctl.ratings.sharing_ratio)
    result = RunResult(sim_run.records, summary, sim_run.event_log, sim_run.ctl.diagnostics,
                       sim_run.kcl_max, energy_wh, wall)
    result.csv_path = _write_csv(cfg, sim_run.records, out_dir)
    return result


def _write_csv(cfg, records, out_dir):
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / cfg["output"]["csv_name"]
    metrics.emit_csv(records, path)
    return path


class _Run:
    """Mutable state of one simulation; :meth:`execute` advances it to the horizon."""

    def __init__(self, cfg: ScenarioConfig, dt: float, n_steps: int):
        sim, rat = cfg["simulation"], cfg["ratings"]
        self.cfg, self.dt, self.n_steps = cfg, dt, n_steps
        self.ctrl_every = int(round(sim["dt_ctrl"] / dt))
        self.log_every = int(round(sim["dt_log"] / dt))
        self.topo = build_topology(cfg, np.random.default_rng(sim["seed"]))
        self.net = PhasorNetwork(self.topo)
        self.ctl = build_controller(cfg)
        vn = cfg.v_nominal
        self.inv3 = ThreePhaseInverter(vn, tau=cfg["network"]["inverter_3ph_tau"])
        self.pv1 = SinglePhasePvInverter(vn, self.topo.filter_z.imag, rat["p_mppt_w"],
                                         tau=cfg["network"]["pv_1ph_tau"])
        self.ess_f = EssFilter(self.topo.filter_l, self.topo.filter_r, dt)
        self.ceiling = rat["ess_current_limit_a"]
        self.src = Sources(self.inv3.emf, self.pv1.emf, 0j)
        self.events: dict[int, list[Event]] = {}
        for ev in cfg.events:
            self.events.setdefault(int(round(ev.t / dt)), []).append(ev)
        self.event_log: list = []
        self.records: list = []
        self.kcl_max = 0.0
        self.energy_j = 0.0
        self.k = 0

    def _apply_event(self, ev: Event, t: float) -> None:
        if ev.action.startswith("enable_"):
            self.ctl.enable(ev.action[len("enable_"):])
        elif ev.action == "set_mppt":
            self.ctl.p_mppt = self.pv1.p_set = ev.args[0]
        elif ev.action == "set_load":
            target, p, q = ev.args
            name = "extra_load_a" if target == "extra_a" else f"{target}_load"
            self.topo = replace(self.topo, **{name: Load(p, q, self.cfg["loads"]["model"])})
            self.net = PhasorNetwork(self.topo)
        self.event_log.append((t, ev.action, ev.args))
        log.info("t=%.4f s event %s %s", t, ev.action, ev.args)

    def _record(self, t, st) -> metrics.TelemetryRecord:
        ctl = self.ctl
        s_ess = st.s_ess_absorbed
        s_pcc = [st.pcc_power(ph) for ph in PHASES]
        v_pcc = st.pcc_voltages()
        return metrics.TelemetryRecord(
            t_s=t,
            vuf_pct=metrics.vuf(*v_pcc),
            p_pcc_a_w=s_pcc[0].real, p_pcc_b_w=s_pcc[1].real, p_pcc_c_w=s_pcc[2].real,
            q_pcc_a_var=s_pcc[0].imag, q_pcc_b_var=s_pcc[1].imag, q_pcc_c_var=s_pcc[2].imag,
            q_pv3ph_var=st.q_pv3ph,
            q_pv1ph_var=st.s_pv.imag,
            p_ess_w=s_ess.real,
            q_ess_var=s_ess.imag,
            v_pcc_a_mag_v=abs(v_pcc[0]),
            v_pcc_b_mag_v=abs(v_pcc[1]),
            v_pcc_c_mag_v=abs(v_pcc[2]),
            controller_enabled_rpc=int(ctl.enabled["rpc"]),
            controller_enabled_rpsa=int(ctl.enabled["rpsa"]),
            controller_enabled_pbr=int(ctl.enabled["pbr"]),
            q_load_meas_var=ctl.load_meas.q_avg,
            p_load_meas_w=ctl.load_meas.p_avg,
            q_pv1ph_meas_var=ctl.pv_meas.q_avg,
            q_pv3ph_meas_var=ctl.q3_meas,
            v_d_ref_v=ctl.refs.v_d_ref,
            kcl_residual=st.kcl_residual,
        )

    def execute(self, progress: bool = False) -> None:
        dt, ctl, w0 = self.dt, self.ctl, self.cfg.w0
        warm = None
        for k in range(self.n_steps + 1):
            self.k = k
            t = k * dt
            for ev in self.events.get(k, ()):
                self._apply_event(ev, t)
                warm = None

            st = self.net.solve(self.src, warm)
            if self.net._p_loads:
                warm = st.v
            self.kcl_max = max(self.kcl_max, st.kcl_residual)

            # instantaneous samples at t
            e = complex(math.cos(w0 * t), math.sin(w0 * t))
            line_z = self.topo.line_z
            samples = Samples(
                v_s=(st.v["a"][2] * e).real,
                i_load=(st.i_load * e).real,
                i_pv=(st.i_pv * e).real,
                v_pcc_a=(st.v["a"][1] * e).real,
                v_3ph=tuple((st.v[ph][0] * e).real for ph in PHASES),
                i_3ph=tuple(((st.v[ph][0] - st.v[ph][1]) / line_z * e).real for ph in PHASES),
            )
            ctl.measure(samples)
            if k % self.ctrl_every == 0:
                ctl.control(t)

            if k % self.log_every == 0:
                self.records.append(self._record(t, st))
                if progress and k % (self.log_every * 1000) == 0:
                    log.info("t=%.2f s vuf=%.3f%%", t, self.records[-1].vuf_pct)
            if k == self.n_steps:
                break
            self.energy_j += st.s_ess_absorbed.real * dt

            # inner current loop and ESS output stage
            v_inv = ctl.inner_step(self.ess_f.i, samples.v_s)
            self.ess_f.step(v_inv, samples.v_s)
            i_phasor = ctl.sogi_iess_phasor(self.ess_f.i, t + dt)
            src, clamped = apply_ess_injection(self.src, i_phasor, self.ceiling)
            if clamped:
                ctl.diagnostics.append((t, "ess_current_clamped", abs(i_phasor)))

            # source dispatch
            self.pv1.v_cmd = ctl.refs.v_d_ref
            e3 = three_phase_inverter_dispatch(self.inv3, st, dt)
            epv = self.pv1.dispatch(st, dt)
            if not all(math.isfinite(x) for x in (e3.real, epv.real, epv.imag,
                                                  src.i_ess.real, src.i_ess.imag)):
                raise SimulationError("non-finite source state")
            self.src = Sources(e3, epv, src.i_ess)
