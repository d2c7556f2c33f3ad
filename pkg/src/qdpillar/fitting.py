"""Background correction, bunching-envelope fit and brightness bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .charge import invert_fit
from .correlator import G2Curve
from .errors import ConvergenceError, DataError, ValidationError


@dataclass(frozen=True, eq=False)
class EnvelopeFit:
    amplitude: float
    tau_eff: float
    p_h_mean: float
    t_hole: float
    gamma: float
    covariance: np.ndarray
    residual_rms: float
    n_points: int
    iterations: int
    chi2_reduced: float
    derived_errors: dict = field(default_factory=dict)

    @property
    def amplitude_err(self) -> float:
        return math.sqrt(self.covariance[0, 0])

    @property
    def tau_eff_err(self) -> float:
        return math.sqrt(self.covariance[1, 1])

    def model(self, t) -> np.ndarray:
        return self.amplitude * np.exp(-np.abs(np.asarray(t, float)) / self.tau_eff) + 1.0

    def report(self) -> str:
        """Plain ``key = value`` report, SI units."""
        e = self.derived_errors
        rows = [
            ("amplitude", self.amplitude, self.amplitude_err),
            ("tau_eff_s", self.tau_eff, self.tau_eff_err),
            ("p_h_mean", self.p_h_mean, e.get("p_h_mean", math.nan)),
            ("t_hole_s", self.t_hole, e.get("t_hole", math.nan)),
            ("gamma_hz", self.gamma, e.get("gamma", math.nan)),
        ]
        lines = ["[fit]"]
        for name, v, err in rows:
            lines.append(f"{name} = {float(v)!r}")
            lines.append(f"{name}_err = {float(err)!r}")
        lines += [f"cov_amplitude_tau = {float(self.covariance[0, 1])!r}",
                  f"residual_rms = {self.residual_rms!r}",
                  f"chi2_reduced = {self.chi2_reduced!r}",
                  f"n_points = {self.n_points}",
                  f"iterations = {self.iterations}"]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class BrightnessInput:
    count_rate: float
    rep_rate: float
    setup_transmission: float
    detector_efficiency: float

    def __post_init__(self):
        if not self.count_rate >= 0:
            raise ValidationError("count_rate must be >= 0")
        if not self.rep_rate > 0:
            raise ValidationError("rep_rate must be > 0")
        for name in ("setup_transmission", "detector_efficiency"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValidationError(f"{name} must be in (0, 1], got {v}")


def correct_background(g2_exp: G2Curve, p_qd: float) -> G2Curve:
    """Remove uncorrelated background from a measured g2.

    With P the fraction of detections coming from the dot,
    g2 = (g2_exp - 2(1-P) + (1-P)^2) / P^2.
    """
    if not 0 < p_qd <= 1:
        raise ValidationError(f"p_qd must be in (0, 1], got {p_qd}")
    q = 1.0 - p_qd
    values = (g2_exp.values - 2.0 * q + q * q) / p_qd ** 2
    return G2Curve(g2_exp.delays, values, g2_exp.stderr / p_qd ** 2)


def mix_background(g2: G2Curve, p_qd: float) -> G2Curve:
    """Forward map of :func:`correct_background` (uncorrelated background added)."""
    if not 0 < p_qd <= 1:
        raise ValidationError(f"p_qd must be in (0, 1], got {p_qd}")
    q = 1.0 - p_qd
    return G2Curve(g2.delays, p_qd ** 2 * g2.values + 2.0 * q - q * q, g2.stderr * p_qd ** 2)


def estimate_pqd(signal_rate: float, background_rate: float) -> float:
    if signal_rate < 0 or background_rate < 0:
        raise ValidationError("rates must be >= 0")
    total = signal_rate + background_rate
    if total <= 0:
        raise DataError("signal and background rates are both zero")
    return signal_rate / total


def _init_guess(t, y, s):
    excess = y - 1.0
    a0 = float(np.mean(y[:2]) - 1.0)
    ok = excess > 3.0 * s
    if np.count_nonzero(ok) >= 2:
        slope = np.polyfit(t[ok], np.log(excess[ok]), 1)[0]
        tau0 = -1.0 / slope if slope < 0 else (t[-1] - t[0]) / 3.0
    else:
        tau0 = (t[-1] - t[0]) / 3.0
    if not a0 > 0:
        a0 = float(np.max(excess[ok])) if np.any(ok) else float(np.max(excess))
    return a0, tau0


def fit_envelope(g2: G2Curve, exclude_within: float | None = None, max_iter: int = 100,
                 rtol: float = 1e-8) -> EnvelopeFit:
    """Weighted Gauss-Newton fit of A*exp(-|t|/tau) + 1.

    Negative delays are folded onto |t|.  Points with |t| < ``exclude_within``
    are dropped; by default that is one bin spacing, which removes the
    antibunched zero-delay bin of a rebinned pulsed histogram.  Weights are
    inverse variances from ``stderr``, with zero-error points floored at the
    smallest nonzero error; all-zero errors (noiseless input) fall back to
    unit weights and a covariance scaled by the residual variance.
    """
    d = np.asarray(g2.delays, float)
    if exclude_within is None:
        exclude_within = float(np.min(np.diff(d))) if d.size > 1 else 0.0
    keep = np.abs(d) >= exclude_within * (1 - 1e-9)
    t = np.abs(d[keep])
    y = np.asarray(g2.values, float)[keep]
    s = np.asarray(g2.stderr, float)[keep]
    order = np.argsort(t, kind="stable")
    t, y, s = t[order], y[order], s[order]
    if t.size < 8:
        raise DataError(f"envelope fit needs >= 8 points, got {t.size}")
    if not np.any(y - 1.0 > 3.0 * s):
        raise DataError("no point exceeds g2 = 1 by 3 standard errors: no bunching detectable")

    absolute_sigma = bool(np.any(s > 0))
    if absolute_sigma:
        s = np.where(s > 0, s, np.min(s[s > 0]))
    else:
        s = np.ones_like(y)
    w = 1.0 / s

    a, tau = _init_guess(t, y, s if absolute_sigma else np.zeros_like(y))

    def resid(a, tau):
        return (y - (a * np.exp(-t / tau) + 1.0)) * w

    r = resid(a, tau)
    chi2 = float(r @ r)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        e = np.exp(-t / tau)
        jac = np.column_stack((e * w, a * t * e / tau ** 2 * w))
        step, *_ = np.linalg.lstsq(jac, r, rcond=None)
        lam = 1.0
        for _ in range(60):
            na, ntau = a + lam * step[0], tau + lam * step[1]
            if na > 0 and ntau > 0:
                nr = resid(na, ntau)
                nchi2 = float(nr @ nr)
                if nchi2 <= chi2:
                    break
            lam *= 0.5
        else:
            break
        rel = max(abs(na - a) / abs(a), abs(ntau - tau) / abs(tau))
        a, tau, r, chi2 = na, ntau, nr, nchi2
        if rel < rtol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"envelope fit did not converge in {it} iterations",
            {"amplitude": a, "tau_eff": tau, "chi2": chi2, "iterations": it})

    e = np.exp(-t / tau)
    jac = np.column_stack((e * w, a * t * e / tau ** 2 * w))
    dof = max(t.size - 2, 1)
    chi2_red = chi2 / dof
    cov = np.linalg.pinv(jac.T @ jac)
    if not absolute_sigma:
        cov = cov * chi2_red
    p_h, t_hole, gamma = invert_fit(a, tau)
    g_p = np.array([-1.0 / (a + 1.0) ** 2, 0.0])
    g_t = np.array([-tau / a ** 2, (a + 1.0) / a])
    g_g = np.array([-1.0 / ((a + 1.0) ** 2 * tau), -1.0 / ((a + 1.0) * tau ** 2)])
    derived = {name: math.sqrt(max(float(g @ cov @ g), 0.0))
               for name, g in (("p_h_mean", g_p), ("t_hole", g_t), ("gamma", g_g))}
    rms = float(np.sqrt(np.mean((y - (a * e + 1.0)) ** 2)))
    return EnvelopeFit(float(a), float(tau), float(p_h), float(t_hole), float(gamma), cov, rms,
                       int(t.size), it, float(chi2_red), derived)


def brightness(inp: BrightnessInput) -> float:
    """Polarized brightness per pulse, C / (f T eta_det)."""
    b = inp.count_rate / (inp.rep_rate * inp.setup_transmission * inp.detector_efficiency)
    if b > 1.0 + 1e-12:
        raise DataError(f"brightness {b:.4g} exceeds 1: inconsistent calibration")
    return b


def brightness_slope_model(pulse_area: float, s_pi: float, p_h_mean: float) -> float:
    """Brightness predicted from occupancy: s_pi * sin^2(area/2) * <P_h>."""
    if not 0 <= pulse_area <= math.pi + 1e-12:
        raise ValidationError("pulse_area must be in [0, pi]")
    if not s_pi > 0:
        raise ValidationError("s_pi must be > 0")
    return s_pi * math.sin(pulse_area / 2.0) ** 2 * p_h_mean
