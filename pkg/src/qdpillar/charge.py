"""Two-state charge-occupation model of an optically pumped quantum dot.

The dot jumps from empty ("0") to hole-charged ("h") at the pump rate
``gamma`` and the hole tunnels out after a mean time ``t_hole``.  All
functions here are closed-form and operate on SI units (seconds, 1/s).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .errors import ValidationError


@dataclass(frozen=True)
class TwoHoleRates:
    """Optional h -> hh pumping and hh -> h relaxation."""

    gamma2: float = 0.0
    t_hole2: float = 1.0

    def __post_init__(self):
        if not self.gamma2 >= 0:
            raise ValidationError("gamma2 must be >= 0", "charge", "gamma2_hz")
        if not self.t_hole2 > 0:
            raise ValidationError("t_hole2 must be > 0", "charge", "t_hole2_s")


@dataclass(frozen=True)
class ChargeModelParams:
    gamma: float
    t_hole: float
    two_hole: Optional[TwoHoleRates] = None

    def __post_init__(self):
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ValidationError(f"gamma must be finite and >= 0, got {self.gamma}",
                                  "charge", "gamma_hz")
        if not (self.t_hole > 0 and math.isfinite(self.t_hole)):
            raise ValidationError(f"t_hole must be finite and > 0, got {self.t_hole}",
                                  "charge", "t_hole_s")

    @classmethod
    def from_occupancy(cls, p_h_mean: float, t_hole: float) -> "ChargeModelParams":
        """Pump rate that gives a stationary hole occupancy ``p_h_mean``."""
        if not 0 <= p_h_mean < 1:
            raise ValidationError("p_h_mean must lie in [0, 1)")
        return cls(gamma=p_h_mean / ((1.0 - p_h_mean) * t_hole), t_hole=t_hole)


@dataclass(frozen=True)
class OccupationDynamics:
    p_h_mean: float
    tau_eff: float
    bunching_amplitude: Optional[float] = None  # g2(0) - 1 = 1/<P_h> - 1

    def __post_init__(self):
        if self.bunching_amplitude is None:
            a = (1.0 - self.p_h_mean) / self.p_h_mean if self.p_h_mean > 0 else math.inf
            object.__setattr__(self, "bunching_amplitude", a)


def steady_state(params: ChargeModelParams) -> OccupationDynamics:
    """Stationary hole occupancy and relaxation time of the 0 <-> h chain."""
    if params.two_hole is not None and params.two_hole.gamma2 > 0:
        raise ValidationError("closed-form steady state covers the two-state model only; "
                              "use the Monte Carlo simulator for the two-hole extension")
    total_rate = params.gamma + 1.0 / params.t_hole
    tau_eff = 1.0 / total_rate
    # 1/<P_h> - 1 = 1/(gamma T_h), without the cancellation as <P_h> -> 1
    amp = 1.0 / (params.gamma * params.t_hole) if params.gamma > 0 else math.inf
    return OccupationDynamics(params.gamma * tau_eff, tau_eff, amp)


def occupation_at(params: ChargeModelParams, p_h_initial: float, t: float) -> float:
    """Hole occupancy at time ``t`` starting from ``p_h_initial``."""
    if not 0.0 <= p_h_initial <= 1.0:
        raise ValidationError(f"p_h_initial must be in [0, 1], got {p_h_initial}")
    if not t >= 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    ss = steady_state(params)
    if t == 0:
        return p_h_initial
    return (p_h_initial - ss.p_h_mean) * math.exp(-t / ss.tau_eff) + ss.p_h_mean


def _require_pumped(params: ChargeModelParams) -> OccupationDynamics:
    if params.gamma <= 0:
        raise ValidationError("gamma = 0: unpumped dot emits no photons, g2 undefined",
                              "charge", "gamma_hz")
    return steady_state(params)


def g2_envelope(params: ChargeModelParams, t: float) -> float:
    """Bunching envelope (1/<P_h> - 1) exp(-t/tau_eff) + 1 of the blinking source."""
    if not t >= 0:
        raise ValidationError(f"t must be >= 0, got {t}")
    ss = _require_pumped(params)
    return ss.bunching_amplitude * math.exp(-t / ss.tau_eff) + 1.0


def g2_envelope_slope0(params: ChargeModelParams) -> float:
    """Analytic d g2/dt at zero delay."""
    ss = _require_pumped(params)
    return -1.0 / (params.gamma * params.t_hole * ss.tau_eff)


def tangent_x_intercept(params: ChargeModelParams) -> float:
    """Delay where the zero-delay tangent of the envelope reaches g2 = 0.

    Algebraically this is the hole trapping time itself; the value is
    computed from the tangent line rather than returned by identity.
    """
    # g0 + slope*t = 0
    return -g2_envelope(params, 0.0) / g2_envelope_slope0(params)


def invert_fit(amplitude: float, tau_eff: float) -> tuple[float, float, float]:
    """Map a fitted envelope A*exp(-t/tau_eff) + 1 to (p_h_mean, t_hole, gamma)."""
    if not amplitude > 0:
        raise ValidationError(f"amplitude must be > 0, got {amplitude}")
    if not tau_eff > 0:
        raise ValidationError(f"tau_eff must be > 0, got {tau_eff}")
    p_h_mean = 1.0 / (amplitude + 1.0)
    # tau/(1 - p) written without the cancellation in 1 - p
    t_hole = tau_eff * (amplitude + 1.0) / amplitude
    gamma = p_h_mean / tau_eff
    return p_h_mean, t_hole, gamma


def rate_equations(params: ChargeModelParams, p0: float, ph: float) -> tuple[float, float]:
    """Right-hand side (dP_0/dt, dP_h/dt) of the two-state master equation."""
    flow = params.gamma * p0 - ph / params.t_hole
    return -flow, flow


def integrate_rate_equations(params: ChargeModelParams, p_h_initial: float, t: float,
                             dt: float = 1e-9, max_total_drift: Optional[list] = None
                             ) -> tuple[float, float]:
    """Classical RK4 integration of the rate equations up to ``t``.

    Kept independent of the closed form; used as a cross-check oracle.
    Returns (P_0(t), P_h(t)).  If ``max_total_drift`` is a list, the
    largest |P_0 + P_h - 1| seen over all steps is appended to it.
    """
    n = max(1, int(math.ceil(t / dt)))
    h = t / n
    p0, ph = 1.0 - p_h_initial, p_h_initial
    drift = 0.0
    for _ in range(n):
        k1 = rate_equations(params, p0, ph)
        k2 = rate_equations(params, p0 + 0.5 * h * k1[0], ph + 0.5 * h * k1[1])
        k3 = rate_equations(params, p0 + 0.5 * h * k2[0], ph + 0.5 * h * k2[1])
        k4 = rate_equations(params, p0 + h * k3[0], ph + h * k3[1])
        p0 += h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        ph += h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        drift = max(drift, abs(p0 + ph - 1.0))
    if max_total_drift is not None:
        max_total_drift.append(drift)
    return p0, ph
