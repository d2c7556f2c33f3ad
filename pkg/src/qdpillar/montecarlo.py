"""Monte Carlo simulation of a blinking, pulsed single-photon source.

The charge state follows a continuous-time Markov chain (empty <-> hole,
optionally hole <-> two-hole).  Photons are emitted only at laser pulse
times and only while a single hole is trapped; detection adds loss, a
beam splitter, dark counts and pulse-synchronous laser leakage.

Time bookkeeping: trajectories live in float seconds, photon and click
streams in integer picoseconds.  The laser clock period is rounded to a
whole picosecond so that every pulse sits on an exact integer grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numba
import numpy as np
from scipy.optimize import curve_fit

from .charge import ChargeModelParams
from .errors import DataError, ValidationError
from .streams import TimestampStream

EMPTY, HOLE, TWO_HOLE = 0, 1, 2
STATE_NAMES = {EMPTY: "empty", HOLE: "hole", TWO_HOLE: "two_hole"}


@dataclass(frozen=True)
class PulseTrain:
    rep_rate: float
    pulse_area: float
    duration: float

    def __post_init__(self):
        if not self.rep_rate > 0:
            raise ValidationError("rep_rate must be > 0", "pulses", "rep_rate_hz")
        if not 0 <= self.pulse_area <= math.pi + 1e-12:
            raise ValidationError("pulse_area must be in [0, pi]", "pulses", "pulse_area_rad")
        if not self.duration > 0:
            raise ValidationError("duration must be > 0", "run", "duration_s")

    @property
    def period_ps(self) -> int:
        return int(round(1e12 / self.rep_rate))

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration * 1e12))

    @property
    def n_pulses(self) -> int:
        # pulses at k*period for k*period <= duration
        return self.duration_ps // self.period_ps + 1

    @property
    def inversion(self) -> float:
        """Trion population after one pulse, sin^2(area/2)."""
        return math.sin(self.pulse_area / 2.0) ** 2

    def pulse_range(self, start_ps: int, stop_ps: int) -> tuple[int, int]:
        """Pulse indices [k0, k1) whose times fall in [start_ps, stop_ps)."""
        p = self.period_ps
        k0 = -(-start_ps // p)
        k1 = min(-(-stop_ps // p), self.n_pulses)
        return k0, max(k0, k1)


@dataclass(frozen=True)
class DetectionConfig:
    efficiency: float
    dark_rate: float = 0.0
    leakage_prob: float = 0.0
    splitter_ratio: float = 0.5
    jitter: float = 0.0
    dead_time: float = 0.0

    def __post_init__(self):
        for name in ("efficiency", "leakage_prob", "splitter_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be a probability, got {v}", "detection", name)
        if not self.dark_rate >= 0:
            raise ValidationError("dark_rate must be >= 0", "detection", "dark_rate_hz")
        if not self.jitter >= 0:
            raise ValidationError("jitter must be >= 0", "detection", "jitter_s")
        if not self.dead_time >= 0:
            raise ValidationError("dead_time must be >= 0", "detection", "dead_time_s")


@dataclass(frozen=True, eq=False)
class ChargeTrajectory:
    """Piecewise-constant charge state.

    ``states[i]`` holds on [boundaries[i], boundaries[i+1]).
    """

    states: np.ndarray
    boundaries: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.int8)
        b = np.asarray(self.boundaries, dtype=np.float64)
        if b.size != s.size + 1 or s.size == 0:
            raise DataError("boundaries must have one more entry than states")
        if np.any(np.diff(b) < 0):
            raise DataError("boundaries must be nondecreasing")
        if s.size > 1 and np.any(s[1:] == s[:-1]):
            raise DataError("consecutive intervals must differ in state")
        s.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "boundaries", b)

    @property
    def duration(self) -> float:
        return float(self.boundaries[-1])

    @property
    def starts(self) -> np.ndarray:
        return self.boundaries[:-1]

    @property
    def ends(self) -> np.ndarray:
        return self.boundaries[1:]

    def intervals(self):
        for st, a, b in zip(self.states.tolist(), self.starts.tolist(), self.ends.tolist()):
            yield STATE_NAMES[st], a, b

    def state_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.boundaries, t, side="right") - 1
        return self.states[np.clip(idx, 0, self.states.size - 1)]

    def time_in(self, state: int) -> float:
        m = self.states == state
        return float(np.sum(self.ends[m] - self.starts[m]))

    def occupancy(self, state: int = HOLE) -> float:
        return self.time_in(state) / self.duration

    @classmethod
    def constant(cls, state: int, duration: float) -> "ChargeTrajectory":
        return cls(np.array([state], dtype=np.int8), np.array([0.0, duration]))


def _stationary(params: ChargeModelParams) -> np.ndarray:
    # birth-death chain 0 <-> h <-> hh, detailed balance
    w = [1.0, params.gamma * params.t_hole, 0.0]
    th = params.two_hole
    if th is not None and th.gamma2 > 0:
        w[2] = w[1] * th.gamma2 * th.t_hole2
    w = np.array(w)
    return w / w.sum()


def simulate_trajectory(params: ChargeModelParams, duration: float, seed: int) -> ChargeTrajectory:
    """Exact jump-by-jump sampling of the charge chain on [0, duration]."""
    if not duration > 0:
        raise ValidationError("duration must be > 0")
    rng = np.random.default_rng(seed)
    pi = _stationary(params)
    state = int(rng.choice(3, p=pi))
    two = params.two_hole is not None and params.two_hole.gamma2 > 0
    if two:
        states, times = _jumps_three_state(params, duration, state, rng)
    else:
        states, times = _jumps_two_state(params, duration, state, rng)
    return ChargeTrajectory(states, times)


def _jumps_two_state(params, duration, state, rng):
    mean_dwell = {EMPTY: 1.0 / params.gamma if params.gamma > 0 else math.inf,
                  HOLE: params.t_hole}
    if math.isinf(mean_dwell[EMPTY]):
        if state == HOLE:
            t1 = min(rng.exponential(params.t_hole), duration)
            if t1 < duration:
                return np.array([HOLE, EMPTY]), np.array([0.0, t1, duration])
            return np.array([HOLE]), np.array([0.0, duration])
        return np.array([EMPTY]), np.array([0.0, duration])
    cycle = mean_dwell[EMPTY] + mean_dwell[HOLE]
    block = int(min(max(2 * duration / cycle + 64, 64), 2_000_000))
    first_scale = mean_dwell[state]
    second_scale = mean_dwell[1 - state]
    chunks = []
    t = 0.0
    while t < duration:
        d = np.empty(2 * block)
        d[0::2] = rng.exponential(first_scale, block)
        d[1::2] = rng.exponential(second_scale, block)
        c = t + np.cumsum(d)
        chunks.append(c)
        t = c[-1]
    ends = np.concatenate(chunks)
    n = int(np.searchsorted(ends, duration, side="left")) + 1
    ends = ends[:n]
    ends[-1] = duration
    states = np.empty(n, dtype=np.int8)
    states[0::2] = state
    states[1::2] = 1 - state
    return states, np.concatenate(([0.0], ends))


def _jumps_three_state(params, duration, state, rng):
    th = params.two_hole
    out_rates = {EMPTY: params.gamma, HOLE: 1.0 / params.t_hole + th.gamma2,
                 TWO_HOLE: 1.0 / th.t_hole2}
    p_down_from_h = (1.0 / params.t_hole) / out_rates[HOLE]
    states, times = [state], [0.0]
    t = 0.0
    while True:
        rate = out_rates[state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        if state == EMPTY:
            state = HOLE
        elif state == TWO_HOLE:
            state = HOLE
        else:
            state = EMPTY if rng.random() < p_down_from_h else TWO_HOLE
        states.append(state)
        times.append(t)
    times.append(duration)
    return np.array(states, dtype=np.int8), np.array(times)


def _emission_times(traj: ChargeTrajectory, pulses: PulseTrain, rng, start_ps: int,
                    stop_ps: int) -> np.ndarray:
    p = pulses.period_ps
    k_win0, k_win1 = pulses.pulse_range(start_ps, stop_ps)
    if k_win1 <= k_win0:
        return np.empty(0, dtype=np.int64)
    m = traj.states == HOLE
    a_ps = traj.starts[m] * 1e12
    b_ps = traj.ends[m] * 1e12
    # only intervals overlapping the window
    sel = (b_ps > k_win0 * p) & (a_ps < k_win1 * p)
    a_ps, b_ps = a_ps[sel], b_ps[sel]
    k0 = np.maximum(np.ceil(a_ps / p).astype(np.int64), k_win0)
    k1 = np.minimum(np.ceil(b_ps / p).astype(np.int64), k_win1)
    counts = np.maximum(k1 - k0, 0)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    # concatenated aranges k0[i] .. k1[i]-1
    offsets = np.repeat(k0 - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
    k = np.arange(total, dtype=np.int64) + offsets
    p_emit = pulses.inversion
    if p_emit < 1.0:
        k = k[rng.random(k.size) < p_emit]
    return k * p


def emit_photons(traj: ChargeTrajectory, pulses: PulseTrain, seed: int,
                 window: Optional[tuple[int, int]] = None) -> TimestampStream:
    """Photon emission times (ps): one photon per pulse with probability
    sin^2(area/2), and only while the dot holds exactly one hole.

    ``window`` restricts the pulses considered to [start_ps, stop_ps).
    """
    if pulses.duration > traj.duration * (1 + 1e-12):
        raise DataError("pulse train outlasts the charge trajectory")
    rng = np.random.default_rng(seed)
    start, stop = window if window is not None else (0, pulses.duration_ps + 1)
    ts = _emission_times(traj, pulses, rng, start, stop)
    return TimestampStream(0, ts, pulses.duration)


def _bernoulli_positions(n: int, p: float, rng) -> np.ndarray:
    """Indices in [0, n) selected independently with probability p (geometric skips)."""
    if p <= 0 or n <= 0:
        return np.empty(0, dtype=np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    out = []
    pos = -1
    expected = n * p
    size = int(expected + 6 * math.sqrt(expected) + 16)
    while pos < n:
        steps = rng.geometric(p, size)
        c = pos + np.cumsum(steps)
        out.append(c)
        pos = int(c[-1])
    idx = np.concatenate(out)
    return idx[idx < n]


def _raw_clicks(photon_ts: np.ndarray, cfg: DetectionConfig, pulses: PulseTrain, rng,
                start_ps: int, stop_ps: int) -> tuple[list[np.ndarray], int]:
    """Clicks per channel before jitter/dedupe, plus the number that are photons."""
    n = photon_ts.size
    kept = photon_ts[rng.random(n) < cfg.efficiency]
    to0 = rng.random(kept.size) < cfg.splitter_ratio
    per_channel = [kept[to0], kept[~to0]]
    span = stop_ps - start_ps
    k0, k1 = pulses.pulse_range(start_ps, stop_ps)
    out = []
    for ch in range(2):
        parts = [per_channel[ch]]
        if cfg.dark_rate > 0 and span > 0:
            nd = rng.poisson(cfg.dark_rate * span * 1e-12)
            parts.append(start_ps + rng.integers(0, span, nd, dtype=np.int64))
        if cfg.leakage_prob > 0:
            parts.append((k0 + _bernoulli_positions(k1 - k0, cfg.leakage_prob, rng))
                         * pulses.period_ps)
        out.append(np.concatenate(parts))
    return out, int(kept.size)


@numba.njit(cache=True)
def _apply_dead_time(ts, dead):
    keep = np.ones(ts.size, dtype=np.bool_)
    last = -dead - 1
    for i in range(ts.size):
        if ts[i] - last < dead:
            keep[i] = False
        else:
            last = ts[i]
    return keep


def _finalize(clicks: np.ndarray, cfg: DetectionConfig, rng, duration_ps: int) -> np.ndarray:
    if cfg.jitter > 0 and clicks.size:
        clicks = clicks + np.rint(rng.normal(0.0, cfg.jitter * 1e12, clicks.size)).astype(np.int64)
        clicks = np.clip(clicks, 0, duration_ps)
    # one click per picosecond per channel
    clicks = np.unique(clicks)
    if cfg.dead_time > 0 and clicks.size:
        clicks = clicks[_apply_dead_time(clicks, int(round(cfg.dead_time * 1e12)))]
    return clicks


def _as_photon_array(photons) -> np.ndarray:
    if isinstance(photons, TimestampStream):
        return photons.timestamps
    arrays = [p.timestamps if isinstance(p, TimestampStream) else np.asarray(p, np.int64)
              for p in photons]
    return np.sort(np.concatenate(arrays)) if arrays else np.empty(0, np.int64)


def detect(photons: Union[TimestampStream, Sequence[TimestampStream]], cfg: DetectionConfig,
           pulses: PulseTrain, seed: int) -> tuple[TimestampStream, TimestampStream]:
    """Lossy two-detector readout of one or more photon streams.

    Several photon streams (independent emitters) may be passed; photons
    from different emitters on the same pulse are distinct and may both
    be detected.
    """
    rng = np.random.default_rng(seed)
    ph = _as_photon_array(photons)
    dur = pulses.duration_ps
    raw, _ = _raw_clicks(ph, cfg, pulses, rng, 0, dur + 1)
    fin_rng = np.random.default_rng([seed, 1])
    return tuple(TimestampStream(ch, _finalize(raw[ch], cfg, fin_rng, dur), pulses.duration)
                 for ch in range(2))


@dataclass(frozen=True)
class SourceRun:
    """Result of :func:`simulate_source`: trajectories and detected clicks."""

    trajectory: ChargeTrajectory
    channels: tuple
    n_emitted: int
    n_photon_clicks: int
    n_background_clicks: int
    extra_trajectories: tuple = field(default=())

    @property
    def p_qd(self) -> float:
        """Ground-truth fraction of raw clicks that are source photons."""
        total = self.n_photon_clicks + self.n_background_clicks
        return self.n_photon_clicks / total if total else math.nan


def simulate_source(params: ChargeModelParams, pulses: PulseTrain, detection: DetectionConfig,
                    seed: int, chunk_duration: float = 0.02,
                    extra_emitters: Sequence[tuple[ChargeModelParams, float]] = (),
                    ) -> SourceRun:
    """Trajectory -> emission -> detection, processed in time chunks.

    Long runs at tens of MHz produce far more emitted photons than fit in
    memory, while the detected streams stay small.  Chunks are independent
    given the trajectory, so the result is exactly distributed as
    ``detect(emit_photons(...))`` on the whole run.

    ``extra_emitters`` adds independent emitters, each given as
    (charge params, pulse area); used to inject multi-photon contamination.
    """
    ss = np.random.SeedSequence(seed)
    traj_seed, chunk_root, fin_seed, *extra_seeds = ss.spawn(3 + len(extra_emitters))
    traj = simulate_trajectory(params, pulses.duration, traj_seed)
    extras = []
    for (p_extra, area), s in zip(extra_emitters, extra_seeds):
        extras.append((simulate_trajectory(p_extra, pulses.duration, s),
                       PulseTrain(pulses.rep_rate, area, pulses.duration)))
    dur = pulses.duration_ps
    step = max(int(round(chunk_duration * 1e12)), pulses.period_ps)
    edges = list(range(0, dur + 1, step)) + [dur + 1]
    edges = sorted(set(edges))
    chunk_seeds = chunk_root.spawn(len(edges) - 1)
    acc = [[], []]
    n_emitted = 0
    photon_clicks = 0
    background_clicks = 0
    for (a, b), cs in zip(zip(edges[:-1], edges[1:]), chunk_seeds):
        rng = np.random.default_rng(cs)
        ph = _emission_times(traj, pulses, rng, a, b)
        for tr, pt in extras:
            ph = np.concatenate((ph, _emission_times(tr, pt, rng, a, b)))
        n_emitted += ph.size
        raw, n_ph = _raw_clicks(np.sort(ph), detection, pulses, rng, a, b)
        for ch in range(2):
            acc[ch].append(raw[ch])
        photon_clicks += n_ph
        background_clicks += raw[0].size + raw[1].size - n_ph
    fin_rng = np.random.default_rng(fin_seed)
    channels = tuple(
        TimestampStream(ch, _finalize(np.concatenate(acc[ch]), detection, fin_rng, dur),
                        pulses.duration)
        for ch in range(2))
    return SourceRun(traj, channels, n_emitted, photon_clicks, background_clicks,
                     tuple(tr for tr, _ in extras))


def time_trace(stream: Union[TimestampStream, Sequence[TimestampStream]], bin: float) -> np.ndarray:
    """Counts per contiguous bin of width ``bin`` seconds (channels merged).

    A trailing partial bin is dropped.
    """
    if not bin > 0:
        raise ValidationError("bin must be > 0")
    streams = [stream] if isinstance(stream, TimestampStream) else list(stream)
    duration = max(s.duration for s in streams)
    n_bins = int(math.floor(duration / bin * (1 + 1e-12)))
    bin_ps = bin * 1e12
    counts = np.zeros(n_bins, dtype=np.int64)
    for s in streams:
        idx = np.floor(s.timestamps / bin_ps).astype(np.int64)
        idx = idx[idx < n_bins]
        counts += np.bincount(idx, minlength=n_bins)
    return counts


@dataclass(frozen=True)
class BlinkAnalysis:
    histogram: np.ndarray
    occupancy_estimate: float
    bright_mean: float
    bright_sigma: float
    threshold: int


FALLBACK_THRESHOLD = 2


def _gauss(n, amp, mu, sigma):
    return amp * np.exp(-0.5 * ((n - mu) / sigma) ** 2)


def blink_histogram(trace) -> BlinkAnalysis:
    """Split a counts-per-bin trace into dark and bright populations.

    The threshold is the valley of the lightly smoothed histogram between
    the zero-count mode and the bright mode, never below 2 counts since
    single-count bins are dominated by background.  The bright population
    (N >= threshold) is summarized by a Gaussian fit to the histogram.
    """
    trace = np.asarray(trace, dtype=np.int64)
    if trace.size == 0:
        raise DataError("empty trace")
    hist = np.bincount(trace)
    if trace.max() < FALLBACK_THRESHOLD:
        return BlinkAnalysis(hist, 0.0, math.nan, math.nan, FALLBACK_THRESHOLD)
    padded = np.concatenate(([hist[0]], hist, [0]))
    smooth = np.convolve(padded, [1 / 3, 1 / 3, 1 / 3], mode="valid")
    bright_peak = int(np.argmax(smooth[FALLBACK_THRESHOLD:])) + FALLBACK_THRESHOLD
    valley = int(np.argmin(smooth[:bright_peak + 1]))
    if valley == 0 or valley >= bright_peak or not (
            smooth[valley] < 0.5 * min(smooth[0], smooth[bright_peak])):
        raise DataError("histogram is unimodal: no threshold separates dark and bright bins "
                        "(occupancy near 0 or 1, or bins too short)")
    threshold = max(valley, FALLBACK_THRESHOLD)
    bright = trace[trace >= threshold]
    occupancy = bright.size / trace.size
    n = np.arange(threshold, hist.size)
    h = hist[threshold:].astype(float)
    mu0, sd0 = float(bright.mean()), float(bright.std()) or 1.0
    try:
        popt, _ = curve_fit(_gauss, n, h, p0=(h.max(), mu0, sd0),
                            sigma=np.sqrt(np.maximum(h, 1.0)), maxfev=10000)
        mu, sd = float(popt[1]), abs(float(popt[2]))
    except RuntimeError:
        mu, sd = mu0, sd0
    return BlinkAnalysis(hist, occupancy, mu, sd, threshold)
