"""Discrete-time signal processing primitives shared by the controllers.

All blocks are small state machines stepped once per sample. They hold no
global state, so independent simulations can own independent instances.

Conventions
-----------
* Phasors are complex peak amplitudes, ``x(t) = Re{X e^{j w0 t}}``.
* dq transforms are amplitude invariant and d-axis aligned: a cosine of peak
  ``V`` at angle ``theta`` maps to ``(d, q) = (V, 0)``.
* A current lagging the voltage by 90 degrees has negative q, so the
  measured reactive power ``-1/2 v_d i_q`` is positive for inductive loads.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi
A_OP = cmath.exp(1j * TWO_PI / 3.0)  # Fortescue rotation operator


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite input to signal block: {v!r}")


def _tustin(A: np.ndarray, B: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear discretization of ``x' = A x + B u``.

    Returns ``(Ad, Bd)`` for ``x[n] = Ad x[n-1] + Bd (u[n] + u[n-1])``.
    """
    eye = np.eye(A.shape[0])
    M = np.linalg.inv(eye - A * h / 2.0)
    return M @ (eye + A * h / 2.0), M @ B * (h / 2.0)


def prewarped_step(w: float, dt: float) -> float:
    """Effective step that makes the bilinear map exact at angular frequency ``w``."""
    return 2.0 * math.tan(w * dt / 2.0) / w


# --------------------------------------------------------------------------
# first-order low pass
# --------------------------------------------------------------------------

@dataclass
class LowPass:
    """One-pole low pass ``w/(s + w)``.

    Discretized with the exact zero-order-hold pole, ``y += (1 - e^{-w dt}) (x - y)``,
    which reproduces the analytic step response sample for sample and has
    unity DC gain.
    """

    w_lpf: float
    dt: float
    y_prev: float = 0.0
    _alpha: float = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (self.w_lpf > 0 and self.dt > 0):
            raise ValueError("LowPass needs w_lpf > 0 and dt > 0")
        if self.w_lpf * self.dt >= 2.0:
            raise ValueError("LowPass needs w_lpf*dt < 2")
        self._alpha = 1.0 - math.exp(-self.w_lpf * self.dt)

    def step(self, x: float) -> float:
        _check_finite(x)
        self.y_prev += self._alpha * (x - self.y_prev)
        return self.y_prev

    def reset(self, value: float = 0.0) -> None:
        self.y_prev = value


# --------------------------------------------------------------------------
# SOGI quadrature signal generator
# --------------------------------------------------------------------------

@dataclass
class Sogi:
    """Second-order generalized integrator.

    State equations (``x1`` in-phase, ``x2`` quadrature)::

        x1' = w0 (k (v - x1) - x2)
        x2' = w0 x1

    Discretized by Tustin, prewarped at ``w0``. In steady state on a
    sinusoid at ``w0``, ``x1`` equals the input and ``x2`` is the same wave
    delayed by 90 degrees.
    """

    w0: float
    dt: float
    k_sogi: float = math.sqrt(2.0)
    x1: float = 0.0
    x2: float = 0.0
    v_prev: float = 0.0
    _ad: tuple = field(init=False, repr=False)
    _bd: tuple = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.w0 <= 0 or self.k_sogi <= 0 or self.dt <= 0:
            raise ValueError("Sogi needs w0, k_sogi, dt > 0")
        w, k = self.w0, self.k_sogi
        A = np.array([[-k * w, -w], [w, 0.0]])
        B = np.array([k * w, 0.0])
        Ad, Bd = _tustin(A, B, prewarped_step(w, self.dt))
        self._ad = tuple(float(a) for a in Ad.ravel())
        self._bd = (float(Bd[0]), float(Bd[1]))

    def step(self, v: float) -> tuple[float, float]:
        _check_finite(v)
        a11, a12, a21, a22 = self._ad
        u = v + self.v_prev
        x1 = a11 * self.x1 + a12 * self.x2 + self._bd[0] * u
        x2 = a21 * self.x1 + a22 * self.x2 + self._bd[1] * u
        self.x1, self.x2, self.v_prev = x1, x2, v
        return x1, x2

    @property
    def magnitude(self) -> float:
        return math.hypot(self.x1, self.x2)

    def phasor(self, t: float) -> complex:
        """Fundamental phasor of the tracked signal referred to ``e^{j w0 t}``."""
        return complex(self.x1, self.x2) * cmath.exp(-1j * self.w0 * t)


# --------------------------------------------------------------------------
# reference-frame transforms
# --------------------------------------------------------------------------

def single_phase_dq(v_inphase: float, v_quadrature: float, theta: float) -> tuple[float, float]:
    """Rotate an orthogonal (alpha, beta) pair by ``-theta`` into (d, q)."""
    _check_finite(v_inphase, v_quadrature, theta)
    c, s = math.cos(theta), math.sin(theta)
    return v_inphase * c + v_quadrature * s, -v_inphase * s + v_quadrature * c


def dq_to_single_phase(d: float, q: float, theta: float) -> tuple[float, float]:
    """Inverse of :func:`single_phase_dq`; returns (in-phase, quadrature)."""
    c, s = math.cos(theta), math.sin(theta)
    return d * c - q * s, d * s + q * c


_SHIFT = 2.0 * math.pi / 3.0


def abc_to_dq(v_a: float, v_b: float, v_c: float, theta: float) -> tuple[float, float, float]:
    """Amplitude-invariant Park transform, returns ``(d, q, zero)``."""
    _check_finite(v_a, v_b, v_c, theta)
    ca, cb, cc = math.cos(theta), math.cos(theta - _SHIFT), math.cos(theta + _SHIFT)
    sa, sb, sc = math.sin(theta), math.sin(theta - _SHIFT), math.sin(theta + _SHIFT)
    d = (2.0 / 3.0) * (v_a * ca + v_b * cb + v_c * cc)
    q = -(2.0 / 3.0) * (v_a * sa + v_b * sb + v_c * sc)
    return d, q, (v_a + v_b + v_c) / 3.0


def dq_to_abc(d: float, q: float, zero: float, theta: float) -> tuple[float, float, float]:
    return tuple(
        d * math.cos(theta - k * _SHIFT) - q * math.sin(theta - k * _SHIFT) + zero
        for k in (0, 1, -1)
    )


# --------------------------------------------------------------------------
# phase locked loop
# --------------------------------------------------------------------------

@dataclass
class Pll:
    """Synchronous-reference-frame PLL with a PI loop filter.

    The loop is fed the q-axis component normalised by the magnitude, i.e.
    approximately the phase error in radians, so the gains do not depend on
    the signal amplitude. Default natural frequency is ``w0/3`` (20 Hz at
    60 Hz) with damping 0.707: fast enough to lock within a few cycles,
    slow enough to keep unbalance ripple out of the angle.
    """

    w0: float
    dt: float
    bandwidth: float | None = None
    damping: float = 1.0 / math.sqrt(2.0)
    theta: float = 0.0
    w_est: float = field(default=0.0)
    integrator: float = 0.0
    magnitude: float = 0.0
    kp: float = field(init=False)
    ki: float = field(init=False)

    def __post_init__(self) -> None:
        wn = self.bandwidth if self.bandwidth is not None else self.w0 / 3.0
        self.kp = 2.0 * self.damping * wn
        self.ki = wn * wn
        if self.w_est == 0.0:
            self.w_est = self.w0

    def step(self, phase_error: float) -> float:
        """Advance one sample given the normalised q-axis error; returns theta."""
        _check_finite(phase_error)
        self.integrator += self.ki * phase_error * self.dt
        self.w_est = self.w0 + self.kp * phase_error + self.integrator
        self.theta = (self.theta + self.w_est * self.dt) % TWO_PI
        return self.theta

    def _error(self, d: float, q: float) -> float:
        self.magnitude = math.hypot(d, q)
        if self.magnitude < 1e-9:
            return 0.0
        return q / self.magnitude

    def track_single(self, v_inphase: float, v_quadrature: float) -> float:
        """Lock to a single-phase signal given as SOGI outputs.

        Returns the angle estimate for the current sample; ``theta`` is left
        holding the prediction for the next one.
        """
        theta_k = self.theta
        d, q = single_phase_dq(v_inphase, v_quadrature, theta_k)
        self.step(self._error(d, q))
        return theta_k

    def track_three(self, v_a: float, v_b: float, v_c: float) -> float:
        theta_k = self.theta
        d, q, _ = abc_to_dq(v_a, v_b, v_c, theta_k)
        self.step(self._error(d, q))
        return theta_k

    @property
    def frequency_hz(self) -> float:
        return self.w_est / TWO_PI


# --------------------------------------------------------------------------
# symmetrical components
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceComponents:
    v_pos: complex
    v_neg: complex
    v_zero: complex

    def phases(self) -> tuple[complex, complex, complex]:
        """Rebuild the (a, b, c) phasors."""
        p, n, z = self.v_pos, self.v_neg, self.v_zero
        a, a2 = A_OP, A_OP * A_OP
        return p + n + z, a2 * p + a * n + z, a * p + a2 * n + z


def fortescue(v_a: complex, v_b: complex, v_c: complex) -> SequenceComponents:
    a, a2 = A_OP, A_OP * A_OP
    return SequenceComponents(
        v_pos=(v_a + a * v_b + a2 * v_c) / 3.0,
        v_neg=(v_a + a2 * v_b + a * v_c) / 3.0,
        v_zero=(v_a + v_b + v_c) / 3.0,
    )


# --------------------------------------------------------------------------
# quasi proportional-resonant controller
# --------------------------------------------------------------------------

@dataclass
class _Resonator:
    order: int
    k_r: float
    w: float
    ad: tuple
    bd: tuple
    c: float
    z1: float = 0.0
    z2: float = 0.0


class PrController:
    """Quasi-PR controller with harmonic resonators.

    ``G(s) = k_p + sum_k 2 k_r,k w_c s / (s^2 + 2 w_c s + (k w0)^2)``

    Each resonator is realised in controllable form (``z1' = z2``,
    ``z2' = -(k w0)^2 z1 - 2 w_c z2 + e``, output ``2 k_r w_c z2``) and
    discretized by Tustin prewarped at its own centre frequency, so the
    resonant peaks sit exactly on the harmonics.
    """

    def __init__(self, k_p: float, k_r: dict[int, float], w_c: float, w0: float, dt: float):
        if any(v < 0 for v in k_r.values()):
            raise ValueError("resonant gains must be >= 0")
        for order in k_r:
            if order * w0 * dt >= math.pi:
                raise ValueError(f"dt too large for resonator at harmonic {order}")
        self.k_p, self.w_c, self.w0, self.dt = k_p, w_c, w0, dt
        self.e_prev = 0.0
        self.resonators: list[_Resonator] = []
        for order, gain in sorted(k_r.items()):
            wk = order * w0
            A = np.array([[0.0, 1.0], [-wk * wk, -2.0 * w_c]])
            B = np.array([0.0, 1.0])
            ad, bd = _tustin(A, B, prewarped_step(wk, dt))
            self.resonators.append(_Resonator(
                order, gain, wk, tuple(float(a) for a in ad.ravel()),
                (float(bd[0]), float(bd[1])), 2.0 * gain * w_c))

    def step(self, error: float) -> float:
        _check_finite(error)
        u = error + self.e_prev
        out = self.k_p * error
        for r in self.resonators:
            a11, a12, a21, a22 = r.ad
            z1 = a11 * r.z1 + a12 * r.z2 + r.bd[0] * u
            z2 = a21 * r.z1 + a22 * r.z2 + r.bd[1] * u
            r.z1, r.z2 = z1, z2
            out += r.c * z2
        self.e_prev = error
        return out

    def reset(self) -> None:
        self.e_prev = 0.0
        for r in self.resonators:
            r.z1 = r.z2 = 0.0

    def analytic_response(self, omega: float) -> complex:
        s = 1j * omega
        g = complex(self.k_p)
        for r in self.resonators:
            g += 2.0 * r.k_r * self.w_c * s / (s * s + 2.0 * self.w_c * s + r.w * r.w)
        return g

    def discrete_response(self, omega: float) -> complex:
        """Frequency response of the discrete realisation at ``z = e^{j omega dt}``."""
        z = cmath.exp(1j * omega * self.dt)
        g = complex(self.k_p)
        for r in self.resonators:
            ad = np.array(r.ad).reshape(2, 2)
            x = np.linalg.solve(z * np.eye(2) - ad, np.array(r.bd)) * (z + 1.0)
            g += r.c * x[1]
        return g
