"""Start-stop-free cross-correlation of two timestamp channels.

Delays are ``t1 - t0`` in integer picoseconds.  Histogram bins are
half-open, ``[min_delay + b*w, min_delay + (b+1)*w)``, so a delay lying
exactly on a bin edge is counted in the bin to its right.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .errors import DataError, ValidationError
from .streams import TimestampStream

PS = 1e-12


@contextmanager
def _text_sink(path_or_buf):
    if hasattr(path_or_buf, "write"):
        yield path_or_buf
    else:
        with open(path_or_buf, "w", newline="") as fh:
            yield fh


@dataclass(frozen=True, eq=False)
class CoincidenceHistogram:
    bin_width: int
    min_delay: int
    max_delay: int
    counts: np.ndarray
    total_starts: int
    total_stops: int
    duration: float

    def __post_init__(self):
        span = self.max_delay - self.min_delay
        if self.bin_width <= 0 or span <= 0 or span % self.bin_width:
            raise DataError("delay span must be a positive multiple of bin_width")
        c = np.asarray(self.counts, dtype=np.int64)
        if c.size != span // self.bin_width:
            raise DataError("counts length does not match the bin count")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n_bins(self) -> int:
        return self.counts.size

    @property
    def edges(self) -> np.ndarray:
        return self.min_delay + self.bin_width * np.arange(self.n_bins + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        """Bin centers in picoseconds (float)."""
        return self.min_delay + self.bin_width * (np.arange(self.n_bins) + 0.5)


@dataclass(frozen=True, eq=False)
class G2Curve:
    delays: np.ndarray
    values: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delays, dtype=float)
        v = np.asarray(self.values, dtype=float)
        e = np.asarray(self.stderr, dtype=float)
        if not d.shape == v.shape == e.shape or d.ndim != 1:
            raise DataError("delays, values and stderr must be 1-D and equally long")
        if d.size > 1 and np.any(np.diff(d) <= 0):
            raise DataError("delays must be strictly increasing")
        if np.any(e < 0):
            raise DataError("stderr must be >= 0")
        for a in (d, v, e):
            a.setflags(write=False)
        object.__setattr__(self, "delays", d)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "stderr", e)

    def __len__(self):
        return self.delays.size


@dataclass(frozen=True, eq=False)
class PeakSeries:
    peak_index: np.ndarray
    area: np.ndarray
    area_err: np.ndarray
    rep_period: float
    window: float

    def at(self, k: int) -> float:
        hit = np.nonzero(self.peak_index == k)[0]
        if hit.size == 0:
            raise DataError(f"no peak with index {k}")
        return float(self.area[hit[0]])


@numba.njit(cache=True, nogil=True)
def _sweep(t0, t1, lo, width, n_bins, counts):
    hi = lo + width * n_bins
    n1 = t1.size
    j0 = 0
    for i in range(t0.size):
        a = t0[i] + lo
        while j0 < n1 and t1[j0] < a:
            j0 += 1
        b = t0[i] + hi
        j = j0
        while j < n1 and t1[j] < b:
            counts[(t1[j] - a) // width] += 1
            j += 1


def _check_sorted(ts: np.ndarray, name: str):
    if ts.size > 1 and np.any(np.diff(ts) < 0):
        raise DataError(f"{name} timestamps are not sorted")


def coincidences(ch0: TimestampStream, ch1: TimestampStream, bin_width: int, max_delay: int,
                 n_jobs: int = 1) -> CoincidenceHistogram:
    """Histogram of delays t1 - t0 over [-max_delay, max_delay).

    Linear two-pointer sweep: each start advances a lower pointer into the
    stop channel and walks forward only over stops inside the window.
    With ``n_jobs > 1`` the start channel is split into contiguous chunks
    swept on threads and the partial histograms summed.
    """
    bin_width, max_delay = int(bin_width), int(max_delay)
    if bin_width <= 0:
        raise ValidationError("bin_width must be > 0")
    if max_delay <= 0 or max_delay % bin_width:
        raise ValidationError("max_delay must be a positive multiple of bin_width")
    t0 = np.ascontiguousarray(ch0.timestamps, dtype=np.int64)
    t1 = np.ascontiguousarray(ch1.timestamps, dtype=np.int64)
    _check_sorted(t0, "start channel")
    _check_sorted(t1, "stop channel")
    n_bins = 2 * max_delay // bin_width
    lo = -max_delay
    if n_jobs <= 1 or t0.size < 2 * n_jobs:
        counts = np.zeros(n_bins, dtype=np.int64)
        _sweep(t0, t1, lo, bin_width, n_bins, counts)
    else:
        bounds = np.linspace(0, t0.size, n_jobs + 1).astype(np.int64)

        def work(i):
            part = np.zeros(n_bins, dtype=np.int64)
            a, b = bounds[i], bounds[i + 1]
            if b > a:
                j_lo = np.searchsorted(t1, t0[a] + lo, side="left")
                j_hi = np.searchsorted(t1, t0[b - 1] + max_delay, side="left")
                _sweep(t0[a:b], t1[j_lo:j_hi], lo, bin_width, n_bins, part)
            return part

        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            counts = sum(pool.map(work, range(n_jobs)))
    duration = max(ch0.duration, ch1.duration)
    return CoincidenceHistogram(bin_width, lo, max_delay, counts, t0.size, t1.size, duration)


def coincidences_bruteforce(ch0: TimestampStream, ch1: TimestampStream, bin_width: int,
                            max_delay: int) -> np.ndarray:
    """All-pairs O(n0*n1) reference with the same binning convention."""
    d = ch1.timestamps[None, :] - ch0.timestamps[:, None]
    d = d[(d >= -max_delay) & (d < max_delay)]
    return np.bincount((d + max_delay) // bin_width, minlength=2 * max_delay // bin_width)


def normalize(hist: CoincidenceHistogram) -> G2Curve:
    """g2 = counts * T / (N0 * N1 * bin width), delays at bin centers (seconds)."""
    if hist.total_starts == 0 or hist.total_stops == 0:
        raise DataError("cannot normalize: a channel has no events")
    if not hist.duration > 0:
        raise DataError("cannot normalize: zero acquisition duration")
    scale = hist.duration / (hist.total_starts * hist.total_stops * hist.bin_width * PS)
    c = hist.counts.astype(float)
    return G2Curve(hist.centers * PS, c * scale, np.sqrt(c) * scale)


def peak_areas(hist: CoincidenceHistogram, rep_period: float, window: float) -> PeakSeries:
    """Integrate the pulsed peaks at delays k*rep_period (all in ps).

    A bin belongs to peak k when its center lies in
    [k*rep_period - window/2, k*rep_period + window/2).  Only peaks whose
    whole window lies inside the histogram are reported.
    """
    if window > rep_period:
        raise ValidationError("window must not exceed rep_period")
    if rep_period < 2 * hist.bin_width:
        raise DataError("rep_period < 2 bins: pulsed peaks are unresolvable")
    if window < hist.bin_width:
        raise ValidationError("window narrower than one bin")
    k_lo = math.ceil((hist.min_delay + window / 2) / rep_period)
    k_hi = math.floor((hist.max_delay - window / 2) / rep_period)
    ks = np.arange(k_lo, k_hi + 1)
    centers = hist.centers
    cum = np.concatenate(([0], np.cumsum(hist.counts)))
    first = np.searchsorted(centers, ks * rep_period - window / 2, side="left")
    last = np.searchsorted(centers, ks * rep_period + window / 2, side="left")
    area = (cum[last] - cum[first]).astype(float)
    return PeakSeries(ks, area, np.sqrt(area), float(rep_period), float(window))


def rebin(hist: CoincidenceHistogram, factor: int) -> CoincidenceHistogram:
    factor = int(factor)
    if factor < 1 or hist.n_bins % factor:
        raise ValidationError(f"rebin factor {factor} must divide the bin count {hist.n_bins}")
    counts = hist.counts.reshape(-1, factor).sum(axis=1)
    return CoincidenceHistogram(hist.bin_width * factor, hist.min_delay, hist.max_delay, counts,
                                hist.total_starts, hist.total_stops, hist.duration)


def reference_k_min(rep_period: float, tau_eff: Optional[float] = None) -> int:
    """Smallest |k| whose peak sits beyond the blinking bunching (5 tau_eff)."""
    if tau_eff is None:
        return 20
    return max(1, math.ceil(5.0 * tau_eff / (rep_period * PS)))


def _ratio_to_reference(peaks: PeakSeries, k_min: int) -> tuple[float, float]:
    ref = np.abs(peaks.peak_index) >= k_min
    if np.count_nonzero(ref) < 4:
        raise DataError(f"fewer than 4 reference peaks with |k| >= {k_min}: "
                        "reference peaks lie within the blinking correlation time")
    a0 = peaks.at(0)
    ref_areas = peaks.area[ref]
    mean = float(ref_areas.mean())
    if mean <= 0:
        raise DataError("reference peaks are empty")
    mean_err = math.sqrt(ref_areas.sum()) / ref_areas.size
    a0_err = math.sqrt(max(a0, 1.0))
    ratio = a0 / mean
    err = math.hypot(a0_err / mean, a0 * mean_err / mean ** 2)
    return ratio, err


def g2_zero(peaks: PeakSeries, tau_eff: Optional[float] = None,
            k_min: Optional[int] = None) -> tuple[float, float]:
    """Zero-delay peak area over the mean of unbunched side peaks.

    Side peaks closer than 5*tau_eff are bunched by blinking and are left
    out of the reference; without ``tau_eff`` the reference starts at
    |k| = 20.
    """
    if k_min is None:
        k_min = reference_k_min(peaks.rep_period, tau_eff)
    return _ratio_to_reference(peaks, k_min)


def hom_visibility(peaks: PeakSeries, k_min: int = 2) -> tuple[float, float]:
    """V = 1 - 2*area(0)/mean(area(k), |k| >= k_min).

    The +-1 peaks of an unbalanced Mach-Zehnder HOM setup are suppressed
    by the interferometer, hence the default reference starts at |k| = 2.
    """
    ratio, err = _ratio_to_reference(peaks, max(2, k_min))
    return 1.0 - 2.0 * ratio, 2.0 * err


def write_histogram_csv(path, hist: CoincidenceHistogram) -> None:
    with _text_sink(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_ps", "counts"])
        for c, n in zip(hist.centers.tolist(), hist.counts.tolist()):
            w.writerow([f"{c:.1f}", n])


def write_g2_csv(path, g2: G2Curve) -> None:
    with _text_sink(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delay_s", "g2", "stderr"])
        for row in zip(g2.delays.tolist(), g2.values.tolist(), g2.stderr.tolist()):
            w.writerow([repr(x) for x in row])


def read_g2_csv(path) -> G2Curve:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:2] != ["delay_s", "g2"]:
            raise DataError(f"{path}: expected header 'delay_s,g2,stderr'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad row {row!r}") from exc
            rows.append(vals + [0.0] * (3 - len(vals)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    return G2Curve(arr[:, 0], arr[:, 1], arr[:, 2])
