"""Unbalance, power-balance and sharing metrics, telemetry records and CSV output."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

import numpy as np

from .signal_blocks import fortescue

CSV_COLUMNS = (
    "t_s", "vuf_pct",
    "p_pcc_a_w", "p_pcc_b_w", "p_pcc_c_w",
    "q_pcc_a_var", "q_pcc_b_var", "q_pcc_c_var",
    "q_pv3ph_var", "q_pv1ph_var", "p_ess_w", "q_ess_var",
    "v_pcc_a_mag_v", "v_pcc_b_mag_v", "v_pcc_c_mag_v",
    "controller_enabled_rpc", "controller_enabled_rpsa", "controller_enabled_pbr",
)


class DegenerateSequenceError(ValueError):
    """Positive-sequence voltage is (numerically) zero."""


def vuf(v_a: complex, v_b: complex, v_c: complex, eps: float = 1e-9) -> float:
    """Voltage unbalance factor ``100 |V-| / |V+|`` in percent."""
    seq = fortescue(v_a, v_b, v_c)
    pos = abs(seq.v_pos)
    if pos < eps:
        raise DegenerateSequenceError(f"|V+| = {pos:.3e} V, VUF undefined")
    return 100.0 * abs(seq.v_neg) / pos


def vuf_from_waveforms(t: np.ndarray, v_abc: np.ndarray, w0: float) -> float:
    """VUF from sampled three-phase waveforms.

    Positive and negative sequence magnitudes come from the cycle-averaged
    Park transform at ``+w0 t`` and ``-w0 t``. ``t`` should span an
    integer number of fundamental cycles.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v_abc, dtype=float)
    shift = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])

    def avg_dq(sign):
        ang = sign * w0 * t[:, None] + shift[None, :]
        d = (2.0 / 3.0) * np.sum(v * np.cos(ang), axis=1)
        q = -(2.0 / 3.0) * np.sum(v * np.sin(ang), axis=1)
        return math.hypot(d.mean(), q.mean())

    pos = avg_dq(+1.0)
    if pos < 1e-9:
        raise DegenerateSequenceError("positive sequence is zero")
    return 100.0 * avg_dq(-1.0) / pos


def per_phase_pcc_power(state) -> list[complex]:
    """Complex power delivered into the PCC on each phase."""
    return [state.pcc_power(ph) for ph in ("a", "b", "c")]


def max_relative_deviation(values) -> float:
    """``max_i |x_i - mean| / |mean|``."""
    arr = np.asarray(values, dtype=float)
    mean = arr.mean()
    if mean == 0:
        return math.inf if np.any(arr) else 0.0
    return float(np.max(np.abs(arr - mean)) / abs(mean))


@dataclass
class TelemetryRecord:
    t_s: float
    vuf_pct: float
    p_pcc_a_w: float
    p_pcc_b_w: float
    p_pcc_c_w: float
    q_pcc_a_var: float
    q_pcc_b_var: float
    q_pcc_c_var: float
    q_pv3ph_var: float
    q_pv1ph_var: float
    p_ess_w: float
    q_ess_var: float
    v_pcc_a_mag_v: float
    v_pcc_b_mag_v: float
    v_pcc_c_mag_v: float
    controller_enabled_rpc: int
    controller_enabled_rpsa: int
    controller_enabled_pbr: int
    # diagnostics kept in memory only
    q_load_meas_var: float = 0.0
    p_load_meas_w: float = 0.0
    q_pv1ph_meas_var: float = 0.0
    q_pv3ph_meas_var: float = 0.0
    v_d_ref_v: float = 0.0
    kcl_residual: float = 0.0


def _fmt(x) -> str:
    if isinstance(x, int):
        return str(x)
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def csv_text(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_csv(records, path) -> None:
    """Write telemetry with a fixed column order and six-decimal formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(csv_text(records))


def records_to_arrays(records) -> dict[str, np.ndarray]:
    names = [f.name for f in fields(TelemetryRecord)]
    return {n: np.array([getattr(r, n) for r in records], dtype=float) for n in names}


@dataclass
class RunSummary:
    vuf_before_pct: float
    vuf_after_pct: float
    sharing_ratio: float
    p_pcc_deviation: float
    q_pcc_deviation: float
    q_load_var: float
    ess_energy_wh: float
    kcl_residual_max: float
    wall_time_s: float
    vuf_convergence_s: float = math.nan
    sharing_convergence_s: float = math.nan
    balance_convergence_s: float = math.nan

    def format(self) -> str:
        def f(x, scale=1.0, spec="8.3f"):
            return f"{'n/a':>8}" if math.isnan(x) else format(scale * x, spec)

        return "\n".join([
            f"VUF before control   {f(self.vuf_before_pct)} %",
            f"VUF after control    {f(self.vuf_after_pct)} %",
            f"Q sharing ratio      {f(self.sharing_ratio)}",
            f"PCC P deviation      {f(self.p_pcc_deviation, 100)} %",
            f"PCC Q deviation      {f(self.q_pcc_deviation, 100)} %",
            f"single-phase load Q  {f(self.q_load_var, 1, '8.1f')} VAR",
            f"ESS energy           {self.ess_energy_wh:8.3f} Wh",
            f"max KCL residual     {self.kcl_residual_max:8.2e} A",
            f"VUF settles (0.5 %)  {f(self.vuf_convergence_s)} s after enable",
            f"sharing settles (5%) {f(self.sharing_convergence_s)} s after enable",
            f"balance settles (2%) {f(self.balance_convergence_s)} s after enable",
            f"wall time            {self.wall_time_s:8.2f} s",
        ])


def settling_time(t: np.ndarray, ok: np.ndarray, t_start: float) -> float:
    """Time from ``t_start`` until ``ok`` holds for every later sample (nan if never)."""
    after = t >= t_start
    if not after.any() or not ok[after][-1]:
        return math.nan
    bad = np.flatnonzero(after & ~ok)
    if bad.size == 0:
        return 0.0
    return float(t[bad[-1] + 1] - t_start)


def summarize(records, t_enable: float, wall_time_s: float, ess_energy_wh: float,
              settle: float = 3.0, sharing_target: float = 4.0) -> RunSummary:
    """Means over the 2 s before the first enable and over everything ``settle`` s after it."""
    a = records_to_arrays(records)
    t = a["t_s"]
    before = (t >= max(0.0, t_enable - 2.0)) & (t < t_enable)
    after = t >= t_enable + settle
    if not before.any():
        before = t < t_enable

    def mean(name, mask):
        return float(a[name][mask].mean()) if mask.any() else math.nan

    p = [mean(f"p_pcc_{ph}_w", after) for ph in "abc"]
    q = [mean(f"q_pcc_{ph}_var", after) for ph in "abc"]
    q1 = mean("q_pv1ph_var", after)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = a["q_pv3ph_var"] / a["q_pv1ph_var"]
        p_all = np.stack([a[f"p_pcc_{ph}_w"] for ph in "abc"])
        p_dev = np.max(np.abs(p_all - p_all.mean(0)), axis=0) / np.abs(p_all.mean(0))
    return RunSummary(
        vuf_before_pct=mean("vuf_pct", before),
        vuf_after_pct=mean("vuf_pct", after),
        sharing_ratio=mean("q_pv3ph_var", after) / q1 if q1 else math.nan,
        p_pcc_deviation=max_relative_deviation(p),
        q_pcc_deviation=max_relative_deviation(q),
        q_load_var=mean("q_load_meas_var", after),
        ess_energy_wh=ess_energy_wh,
        kcl_residual_max=float(a["kcl_residual"].max()) if len(t) else 0.0,
        wall_time_s=wall_time_s,
        vuf_convergence_s=settling_time(t, a["vuf_pct"] <= 0.5, t_enable),
        sharing_convergence_s=settling_time(t, np.abs(ratio / sharing_target - 1.0) <= 0.05, t_enable),
        balance_convergence_s=settling_time(t, p_dev <= 0.02, t_enable),
    )
