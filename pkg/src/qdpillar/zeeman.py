"""In-plane (Voigt) magnetic field spectroscopy of neutral and charged excitons.

Line patterns under an in-plane field B:

* exciton: two orthogonally polarized lines split by
  sqrt(fss^2 + (mu_B B (g_e + g_h))^2);
* positive trion: four lines at +-(De +- Dh)/2 around the diamagnetically
  shifted centre, De = g_e mu_B B, Dh = g_h mu_B B; the outer pair is
  H polarized, the inner pair V;
* X2+: the trion geometry with unequal outer/inner intensities.

Energies are in eV, wavelengths in nm.
"""
from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.signal import find_peaks

from .errors import DataError, ValidationError

MU_B = 57.883818060e-6  # eV/T
HC_EV_NM = 1239.8419843320026
SPECIES = ("exciton", "trion", "x2plus")
DEFAULT_INSTRUMENT_FWHM = 25e-6
ASYMMETRY_THRESHOLD = 1.5


@contextmanager
def _text_sink(path_or_buf):
    if hasattr(path_or_buf, "write"):
        yield path_or_buf
    else:
        with open(path_or_buf, "w", newline="") as fh:
            yield fh


def energy_to_wavelength(e):
    return HC_EV_NM / np.asarray(e, dtype=float)


def wavelength_to_energy(lam):
    return HC_EV_NM / np.asarray(lam, dtype=float)


@dataclass(frozen=True)
class ZeemanModelParams:
    e0: float = HC_EV_NM / 925.1
    fss: float = 20e-6
    g_electron: float = 0.4
    g_hole: float = 0.25
    kappa: float = 5e-6
    linewidth: float = 2e-6
    species: str = "trion"
    x2plus_ratio: float = 2.0  # outer : inner intensity

    def __post_init__(self):
        if not self.linewidth > 0:
            raise ValidationError("linewidth must be > 0", "zeeman", "linewidth_ev")
        if not self.kappa >= 0:
            raise ValidationError("kappa must be >= 0", "zeeman", "kappa_ev_per_t2")
        if self.species not in SPECIES:
            raise ValidationError(f"species must be one of {SPECIES}", "zeeman", "species")
        if not self.x2plus_ratio > 0:
            raise ValidationError("x2plus_ratio must be > 0", "zeeman", "x2plus_ratio")


@dataclass(frozen=True)
class SpectralLine:
    energy: float
    relative_intensity: float
    polarization: str

    def __post_init__(self):
        if self.relative_intensity < 0:
            raise ValidationError("relative_intensity must be >= 0")
        if self.polarization not in ("H", "V"):
            raise ValidationError("polarization must be 'H' or 'V'")


@dataclass(frozen=True, eq=False)
class Spectrum:
    wavelength: np.ndarray
    intensity_h: np.ndarray
    intensity_v: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.wavelength, float)
        if w.size == 0:
            raise DataError("empty spectrum")
        if w.size > 1 and np.any(np.diff(w) <= 0):
            raise DataError("wavelengths must be strictly increasing")
        for name in ("intensity_h", "intensity_v"):
            a = np.asarray(getattr(self, name), float)
            if a.shape != w.shape:
                raise DataError(f"{name} length differs from the wavelength grid")
            if np.any(a < 0):
                raise DataError(f"{name} must be >= 0")
            object.__setattr__(self, name, a)
        object.__setattr__(self, "wavelength", w)

    def channel(self, pol: str) -> np.ndarray:
        return self.intensity_h if pol == "H" else self.intensity_v


@dataclass(frozen=True)
class LineClassification:
    verdict: str
    confidence: float
    matched_lines: tuple = field(default=())
    detail: str = ""

    def report(self) -> str:
        lines = ["[classification]", f"verdict = {self.verdict}",
                 f"confidence = {self.confidence:.6f}",
                 f"n_lines = {len(self.matched_lines)}"]
        if self.detail:
            lines.append(f"detail = {self.detail}")
        for i, ln in enumerate(self.matched_lines):
            lines.append(f"line{i} = {ln.energy!r} eV, {energy_to_wavelength(ln.energy):.6f} nm, "
                         f"{ln.polarization}, {ln.relative_intensity:.6g}")
        return "\n".join(lines) + "\n"


def line_energies(params: ZeemanModelParams, b_field: float) -> list[SpectralLine]:
    if not b_field >= 0:
        raise ValidationError("b_field must be >= 0")
    centre = params.e0 + params.kappa * b_field ** 2
    if params.species == "exciton":
        zeeman = MU_B * b_field * (params.g_electron + params.g_hole)
        half = 0.5 * math.hypot(params.fss, zeeman)
        return [SpectralLine(centre - half, 1.0, "V"), SpectralLine(centre + half, 1.0, "H")]
    de = params.g_electron * MU_B * b_field
    dh = params.g_hole * MU_B * b_field
    outer, inner = 0.5 * abs(de + dh), 0.5 * abs(de - dh)
    i_out, i_in = (params.x2plus_ratio, 1.0) if params.species == "x2plus" else (1.0, 1.0)
    return [SpectralLine(centre - outer, i_out, "H"), SpectralLine(centre - inner, i_in, "V"),
            SpectralLine(centre + inner, i_in, "V"), SpectralLine(centre + outer, i_out, "H")]


def synth_spectrum(lines: Sequence[SpectralLine], grid, noise_level: float = 0.0,
                   seed: Optional[int] = None, linewidth: float = 2e-6,
                   peak_counts: float = 1000.0,
                   instrument_fwhm: Optional[float] = None) -> Spectrum:
    """Lorentzian lines on H/V channels plus Poisson noise.

    Each line contributes ``peak_counts * relative_intensity`` at its
    centre.  ``noise_level`` is a flat background in counts; with it (or any
    signal) the channels are Poisson sampled unless ``seed`` is None and
    ``noise_level`` is 0, which returns the noiseless model.  An optional
    Gaussian instrument response of FWHM ``instrument_fwhm`` (eV) blurs the
    lines before sampling.
    """
    lam = np.asarray(grid, float)
    if lam.size < 3 or np.any(np.diff(lam) <= 0):
        raise ValidationError("grid must be strictly increasing with >= 3 points")
    e_grid = wavelength_to_energy(lam)
    e_lo, e_hi = e_grid.min(), e_grid.max()
    for ln in lines:
        if not e_lo <= ln.energy <= e_hi:
            raise ValidationError(f"line at {energy_to_wavelength(ln.energy):.4f} nm "
                                  "lies outside the wavelength grid")
    hw = 0.5 * linewidth
    chans = {"H": np.zeros_like(lam), "V": np.zeros_like(lam)}
    for ln in lines:
        chans[ln.polarization] += peak_counts * ln.relative_intensity * hw ** 2 / (
            (e_grid - ln.energy) ** 2 + hw ** 2)
    if instrument_fwhm:
        # energy spacing of the grid is near-uniform over a sub-nm window
        de = abs(float(np.mean(np.diff(e_grid))))
        sigma = instrument_fwhm / (2 * math.sqrt(2 * math.log(2))) / de
        for k in chans:
            chans[k] = gaussian_filter1d(chans[k], sigma, mode="nearest")
    if noise_level > 0 or seed is not None:
        rng = np.random.default_rng(seed)
        for k in chans:
            chans[k] = rng.poisson(chans[k] + noise_level).astype(float)
    return Spectrum(lam, chans["H"], chans["V"])


def detect_peaks(spectrum: Spectrum, min_prominence: float,
                 smooth: float = 0.0) -> list[SpectralLine]:
    """Local maxima per polarization channel, sorted by energy.

    Positions are refined by a parabola through the three samples around
    each maximum.  ``smooth`` (samples) applies a Gaussian pre-filter used
    before locating maxima on noisy data; reported heights are those of the
    filtered channel.
    """
    lam = spectrum.wavelength
    found = []
    for pol in ("H", "V"):
        y = spectrum.channel(pol)
        ys = gaussian_filter1d(y, smooth, mode="nearest") if smooth > 0 else y
        idx, _ = find_peaks(ys, prominence=min_prominence)
        for i in idx:
            if 0 < i < lam.size - 1:
                y0, y1, y2 = ys[i - 1], ys[i], ys[i + 1]
                denom = y0 - 2 * y1 + y2
                off = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
                off = min(max(off, -0.5), 0.5)
                x = lam[i] + off * (lam[i + 1] - lam[i - 1]) / 2
                height = y1 - 0.25 * (y0 - y2) * off
            else:
                x, height = lam[i], ys[i]
            found.append(SpectralLine(float(wavelength_to_energy(x)), float(max(height, 0.0)), pol))
    return sorted(found, key=lambda ln: ln.energy)


def _symmetry_error(energies: np.ndarray) -> float:
    outer_mid = 0.5 * (energies[0] + energies[3])
    inner_mid = 0.5 * (energies[1] + energies[2])
    return abs(outer_mid - inner_mid)


def _quartet_verdict(outer, inner, score, peaks, detail) -> LineClassification:
    if inner <= 0 or outer <= 0:
        return LineClassification("unknown", 1.0 - score, tuple(peaks),
                                  "zero-intensity line in quartet")
    ratio = outer / inner
    asym = max(ratio, 1.0 / ratio)
    verdict = "x2plus" if asym >= ASYMMETRY_THRESHOLD else "trion"
    return LineClassification(verdict, score, tuple(peaks),
                              f"{detail}, intensity ratio {ratio:.3f}")


def classify(peaks: Sequence[SpectralLine], tolerance: float = 5e-6) -> LineClassification:
    """Charge-state verdict from one emitter's peaks.

    Two orthogonally polarized lines split by more than ``tolerance`` eV
    are an exciton.  Four lines ordered H, V, V, H in energy whose outer
    and inner pairs share a midpoint (within ``tolerance``) are a trion, or
    X2+ when the outer/inner intensity ratio reaches 1.5 either way.  An
    H, V, H triplet centred within ``tolerance`` is read as a quartet whose
    inner pair is unresolved.  Confidence combines the fraction of lines
    matching the expected polarization order (3/4 for a triplet) with a
    Gaussian penalty exp(-(err/tolerance)^2) on the symmetry error.
    """
    peaks = sorted(peaks, key=lambda ln: ln.energy)
    pols = [p.polarization for p in peaks]
    if len(peaks) == 2:
        if set(pols) != {"H", "V"}:
            return LineClassification("unknown", 0.5, tuple(peaks), "two parallel lines")
        split = abs(peaks[1].energy - peaks[0].energy)
        if split <= tolerance:
            # one unpolarized line: a trion at zero field or an exciton without splitting
            return LineClassification("unknown", math.exp(-((split / tolerance) ** 2)),
                                      tuple(peaks), "unsplit unpolarized line")
        return LineClassification("exciton", 1.0 - math.exp(-((split / tolerance) ** 2)),
                                  tuple(peaks), f"two orthogonal lines split by {split:.3g} eV")
    if len(peaks) == 3 and pols == ["H", "V", "H"]:
        # inner V pair closer than a linewidth shows up as one peak of about
        # twice the single-line height on the outer pair's midpoint
        err = abs(0.5 * (peaks[0].energy + peaks[2].energy) - peaks[1].energy)
        score = 0.75 * math.exp(-((err / tolerance) ** 2))
        if err <= tolerance:
            outer = peaks[0].relative_intensity + peaks[2].relative_intensity
            inner = peaks[1].relative_intensity
            return _quartet_verdict(outer, inner, score, peaks,
                                    f"unresolved inner pair, symmetry error {err:.3g} eV")
        return LineClassification("unknown", 1.0 - score, tuple(peaks),
                                  f"triplet off-centre by {err:.3g} eV")
    if len(peaks) == 4:
        expected = ["H", "V", "V", "H"]
        agree = sum(a == b for a, b in zip(pols, expected)) / 4.0
        e = np.array([p.energy for p in peaks])
        err = _symmetry_error(e)
        score = agree * math.exp(-((err / tolerance) ** 2))
        if agree == 1.0 and err <= tolerance:
            outer = peaks[0].relative_intensity + peaks[3].relative_intensity
            inner = peaks[1].relative_intensity + peaks[2].relative_intensity
            return _quartet_verdict(outer, inner, score, peaks, f"symmetry error {err:.3g} eV")
        return LineClassification("unknown", 1.0 - score, tuple(peaks),
                                  f"quartet mismatch: order {''.join(pols)}, "
                                  f"symmetry error {err:.3g} eV")
    return LineClassification("unknown", 1.0, tuple(peaks), f"{len(peaks)} lines")


def default_prominence(spectrum: Spectrum, fraction: float = 0.25) -> float:
    """``fraction`` of the tallest peak above the median floor.

    A quarter keeps the inner lines of a 2:1 X2+ quartet well above the
    threshold while rejecting Poisson fluctuations of the floor.
    """
    top = max(spectrum.intensity_h.max(), spectrum.intensity_v.max())
    floor = float(np.median(np.concatenate((spectrum.intensity_h, spectrum.intensity_v))))
    return fraction * (top - floor) if top > floor else 1.0


def identify(spectrum: Spectrum, min_prominence: Optional[float] = None, smooth: float = 0.0,
             tolerance: float = 5e-6) -> LineClassification:
    """Peak detection followed by classification of a single-emitter spectrum."""
    if min_prominence is None:
        min_prominence = default_prominence(spectrum)
    return classify(detect_peaks(spectrum, min_prominence, smooth), tolerance)


def default_grid(lines: Sequence[SpectralLine], step_nm: float = 1e-4,
                 margin_nm: float = 0.05) -> np.ndarray:
    lam = energy_to_wavelength([ln.energy for ln in lines])
    return np.arange(lam.min() - margin_nm, lam.max() + margin_nm, step_nm)


def write_spectrum_csv(path, spectrum: Spectrum) -> None:
    with _text_sink(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wavelength_nm", "intensity_H", "intensity_V"])
        for row in zip(spectrum.wavelength.tolist(), spectrum.intensity_h.tolist(),
                       spectrum.intensity_v.tolist()):
            w.writerow([repr(x) for x in row])


def read_spectrum_csv(path) -> Spectrum:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["wavelength_nm", "intensity_H", "intensity_V"]:
            raise DataError(f"{path}: expected header 'wavelength_nm,intensity_H,intensity_V'")
        try:
            rows = [[float(x) for x in row] for row in reader if row]
        except ValueError as exc:
            raise DataError(f"{path}: non-numeric value") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    a = np.array(rows)
    return Spectrum(a[:, 0], a[:, 1], a[:, 2])
