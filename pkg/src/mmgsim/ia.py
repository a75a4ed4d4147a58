"""Incremental algorithm (IA) regulator shared by the RPC, RPSA and PBR loops.

Each step moves the control signal by an increment proportional to the
current error and adds a derivative term taken on the control signal itself::

    e_k = sp - pv
    u_k = clamp(u_{k-1} + k_i e_k)
    U_k = u_k + k_d (u_k - u_{k-1})

Only ``u_{k-1}`` is stored; there is no error sum, so a saturated loop has
nothing to unwind once the error changes sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class IaState:
    """State and gains of one IA loop.

    ``k_i`` is the per-step increment gain and carries the whole
    error-to-output unit conversion for the loop it is used in.
    """

    k_i: float
    k_d: float
    output_limits: tuple[float, float] | None = None
    u_prev: float = 0.0

    def __post_init__(self) -> None:
        if self.k_i < 0 or self.k_d < 0:
            raise ValueError("IA gains must be non-negative")
        if self.output_limits is not None:
            lo, hi = self.output_limits
            if not lo < hi:
                raise ValueError("IA output_limits must satisfy min < max")
            self.u_prev = min(max(self.u_prev, lo), hi)


def ia_step(state: IaState, sp: float, pv: float) -> float:
    """Advance the loop one step and return ``U_output``."""
    if not (math.isfinite(sp) and math.isfinite(pv)):
        raise ValueError(f"non-finite IA input sp={sp!r} pv={pv!r}")
    u = state.u_prev + state.k_i * (sp - pv)
    if state.output_limits is not None:
        lo, hi = state.output_limits
        u = min(max(u, lo), hi)
    out = u + state.k_d * (u - state.u_prev)
    state.u_prev = u
    return out


def ia_reset(state: IaState) -> IaState:
    state.u_prev = 0.0
    return state
