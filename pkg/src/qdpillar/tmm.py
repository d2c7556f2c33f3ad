"""Normal-incidence transfer-matrix optics for planar DBR microcavities.

Layers are listed from the top (air side) to the bottom (substrate).
Lengths are in nanometers.  Each layer acts through its characteristic
matrix

    [[cos d, i sin d / n], [i n sin d, cos d]],   d = 2 pi n t / lambda

mapping (E, H) at its lower face to (E, H) at its upper face.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import grey_closing
from scipy.optimize import brentq, minimize_scalar

from .errors import DataError, ValidationError

GAAS = "GaAs"
AL90 = "Al0.9Ga0.1As"
AL10 = "Al0.1Ga0.9As"

# Constant textbook indices near 925 nm; no dispersion.
DEFAULT_INDICES = {
    "air": 1.0,
    GAAS: 3.5,
    AL90: 3.0,
    AL10: 3.45,
}


@dataclass(frozen=True)
class Layer:
    thickness: float
    refractive_index: complex
    label: str = ""

    def __post_init__(self):
        if not self.thickness > 0:
            raise ValidationError(f"layer {self.label!r}: thickness must be > 0")
        if complex(self.refractive_index).real < 1:
            raise ValidationError(f"layer {self.label!r}: real index must be >= 1")


@dataclass(frozen=True)
class LayerStack:
    layers: tuple
    design_wavelength: float
    n_superstrate: complex = 1.0
    n_substrate: complex = DEFAULT_INDICES[GAAS]
    cavity: Optional[tuple] = None  # layer index range [start, stop)
    qd_position: Optional[float] = None  # nm below the top surface

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.design_wavelength > 0:
            raise ValidationError("design_wavelength must be > 0")

    @property
    def thickness(self) -> float:
        return float(sum(l.thickness for l in self.layers))

    @property
    def interfaces(self) -> np.ndarray:
        """Depth of every layer boundary, top surface first."""
        return np.concatenate(([0.0], np.cumsum([l.thickness for l in self.layers])))

    def cavity_span(self) -> tuple[float, float]:
        if self.cavity is None:
            raise DataError("stack has no cavity layer range")
        z = self.interfaces
        return float(z[self.cavity[0]]), float(z[self.cavity[1]])

    def flipped(self) -> "LayerStack":
        """Same stack illuminated from the substrate side."""
        return LayerStack(tuple(reversed(self.layers)), self.design_wavelength,
                          self.n_substrate, self.n_superstrate)


@dataclass(frozen=True, eq=False)
class FieldProfile:
    positions: np.ndarray
    intensity: np.ndarray


@dataclass(frozen=True)
class CavityMode:
    resonance_wavelength: float
    quality_factor: float
    eta_top: float
    r_top: float
    r_bottom: float
    dip_reflectivity: float


def _index(indices: Mapping[str, complex], name: str) -> complex:
    try:
        return complex(indices[name])
    except KeyError:
        raise ValidationError(f"unknown material {name!r}", "tmm", name) from None


def build_stack(top_pairs: int, bottom_pairs: int, design_wavelength: float = 925.0,
                indices: Optional[Mapping[str, complex]] = None, barrier: bool = True,
                barrier_thickness: float = 20.0, barrier_offset: float = 10.0,
                substrate: str = GAAS, superstrate: str = "air") -> LayerStack:
    """Quarter-wave GaAs / Al0.9Ga0.1As mirrors around a GaAs lambda-cavity.

    The QD plane sits at the optical midpoint of the cavity.  With
    ``barrier`` an Al0.1Ga0.9As tunnel barrier starts ``barrier_offset`` nm
    above the QD plane; the GaAs above it is thinned so the cavity keeps one
    design wavelength of optical path.
    """
    if top_pairs < 1 or bottom_pairs < 1:
        raise ValidationError("mirror pair counts must be >= 1")
    idx = dict(DEFAULT_INDICES)
    if indices:
        idx.update(indices)
    n_h, n_l = _index(idx, GAAS), _index(idx, AL90)
    lam = float(design_wavelength)
    hi = Layer(lam / (4 * n_h.real), n_h, GAAS)
    lo = Layer(lam / (4 * n_l.real), n_l, AL90)
    layers = [x for _ in range(top_pairs) for x in (hi, lo)]
    c0 = len(layers)
    half_gaas = lam / (2 * n_h.real)
    if barrier:
        n_b = _index(idx, AL10)
        upper = half_gaas - barrier_offset - barrier_thickness * n_b.real / n_h.real
        if upper <= 0:
            raise ValidationError("barrier does not fit in the upper half of the cavity")
        layers += [Layer(upper, n_h, GAAS + " cavity"),
                   Layer(barrier_thickness, n_b, AL10 + " barrier"),
                   Layer(barrier_offset, n_h, GAAS + " cavity"),
                   Layer(half_gaas, n_h, GAAS + " cavity")]
    else:
        layers.append(Layer(2 * half_gaas, n_h, GAAS + " cavity"))
    c1 = len(layers)
    layers += [x for _ in range(bottom_pairs) for x in (lo, hi)]
    top = sum(l.thickness for l in layers[:c0])
    qd = top + (sum(l.thickness for l in layers[c0:c1]) - half_gaas)
    return LayerStack(tuple(layers), lam, _index(idx, superstrate), _index(idx, substrate),
                      (c0, c1), qd)


def _system_matrix(layers: Sequence[Layer], wavelengths: np.ndarray) -> np.ndarray:
    lam = np.asarray(wavelengths, dtype=float)
    m = np.zeros(lam.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = m[..., 1, 1] = 1.0
    for layer in layers:
        n = complex(layer.refractive_index)
        d = 2 * np.pi * n * layer.thickness / lam
        c, s = np.cos(d), np.sin(d)
        lm = np.empty_like(m)
        lm[..., 0, 0] = c
        lm[..., 0, 1] = 1j * s / n
        lm[..., 1, 0] = 1j * n * s
        lm[..., 1, 1] = c
        m = m @ lm
    return m


def amplitudes(stack: LayerStack, wavelengths) -> tuple[np.ndarray, np.ndarray]:
    """Complex reflection and transmission amplitudes (r, t)."""
    lam = np.atleast_1d(np.asarray(wavelengths, dtype=float))
    if np.any(lam <= 0):
        raise ValidationError("wavelengths must be > 0")
    m = _system_matrix(stack.layers, lam)
    n0, ns = complex(stack.n_superstrate), complex(stack.n_substrate)
    b = m[..., 0, 0] + m[..., 0, 1] * ns
    c = m[..., 1, 0] + m[..., 1, 1] * ns
    denom = n0 * b + c
    return (n0 * b - c) / denom, 2 * n0 / denom


def reflectivity(stack: LayerStack, wavelengths) -> np.ndarray:
    r, _ = amplitudes(stack, wavelengths)
    return np.abs(r) ** 2


def transmittance(stack: LayerStack, wavelengths) -> np.ndarray:
    _, t = amplitudes(stack, wavelengths)
    return np.abs(t) ** 2 * (complex(stack.n_substrate).real / complex(stack.n_superstrate).real)


def field_profile(stack: LayerStack, wavelength: float, resolution: float = 1.0) -> FieldProfile:
    """|E|^2 inside the stack for unit incident amplitude from the top.

    The fields (E, H) are carried downward through each layer with the
    inverse characteristic matrix, so E and H stay continuous at every
    interface by construction.
    """
    if not resolution > 0:
        raise ValidationError("resolution must be > 0")
    lam = float(wavelength)
    r, _ = amplitudes(stack, lam)
    n0 = complex(stack.n_superstrate)
    e, h = 1.0 + r[0], n0 * (1.0 - r[0])
    pos, inten = [], []
    z0 = 0.0
    for layer in stack.layers:
        n = complex(layer.refractive_index)
        z = np.arange(0.0, layer.thickness, resolution)
        d = 2 * np.pi * n * z / lam
        ez = np.cos(d) * e - 1j * np.sin(d) / n * h
        pos.append(z0 + z)
        inten.append(np.abs(ez) ** 2)
        d_end = 2 * np.pi * n * layer.thickness / lam
        e, h = (np.cos(d_end) * e - 1j * np.sin(d_end) / n * h,
                -1j * n * np.sin(d_end) * e + np.cos(d_end) * h)
        z0 += layer.thickness
    pos.append(np.array([z0]))
    inten.append(np.array([abs(e) ** 2]))
    return FieldProfile(np.concatenate(pos), np.concatenate(inten))


def field_maximum(stack: LayerStack, wavelength: float, resolution: float = 1.0,
                  within_cavity: bool = True) -> tuple[float, float]:
    """Position (nm) and value of the sampled |E|^2 maximum.

    In a lambda-cavity the antinodes at the cavity centre and at its two
    mirror faces are equally strong up to rounding, so by default only
    samples in the half-open cavity range [top, bottom) are searched; the
    barrier then breaks the tie in favour of the QD plane.
    """
    prof = field_profile(stack, wavelength, resolution)
    sel = np.ones(prof.positions.size, dtype=bool)
    if within_cavity:
        z0, z1 = stack.cavity_span()
        sel = (prof.positions >= z0) & (prof.positions < z1)
    i = np.flatnonzero(sel)[np.argmax(prof.intensity[sel])]
    return float(prof.positions[i]), float(prof.intensity[i])


def _mirror_reflectivity(layers, n_in, n_out, lam) -> float:
    st = LayerStack(tuple(layers), lam, n_in, n_out)
    return float(reflectivity(st, lam)[0])


def cavity_mode(stack: LayerStack, step: float = 0.01, span: float = 0.12,
                smooth_nm: float = 5.0) -> CavityMode:
    """Resonance, quality factor and top-mirror output coupling.

    The resonance is the narrow dip below the stopband plateau nearest
    the design wavelength, refined by golden-section search.  Q is
    lambda over the full width of the dip at half depth.  The output
    coupling compares the transmissions of the isolated top and bottom
    mirrors at resonance.
    """
    lam0 = stack.design_wavelength
    grid = np.arange(lam0 * (1 - span), lam0 * (1 + span), step)
    refl = reflectivity(stack, grid)
    # closing fills the narrow cavity dip but not the broad sidelobe valleys
    envelope = grey_closing(refl, size=max(3, int(smooth_nm / step)))
    centre = int(np.argmin(np.abs(grid - lam0)))
    high = envelope >= 0.5 * (envelope.max() + refl.min())
    if not high[centre]:
        raise DataError("no stopband around the design wavelength")
    lo = centre
    while lo > 0 and high[lo - 1]:
        lo -= 1
    hi = centre
    while hi < grid.size - 1 and high[hi + 1]:
        hi += 1
    # candidate dips: local minima inside the band, clear of its edges and at
    # least 0.02 below the plateau; the lambda-cavity mode is the one nearest
    # the design wavelength (stopband-edge ripples lie far from it)
    margin = max(2, int(smooth_nm / step) // 2)
    i = np.arange(lo + margin, hi - margin + 1)
    i = i[(i > 0) & (i < grid.size - 1)]
    i = i[(refl[i] <= refl[i - 1]) & (refl[i] <= refl[i + 1])
          & (envelope[i] - refl[i] >= 0.02)]
    if i.size == 0:
        raise DataError("no cavity dip inside the stopband")
    i_min = int(i[np.argmin(np.abs(grid[i] - lam0))])
    plateau = float(envelope[i_min])

    def r_of(x):
        return float(reflectivity(stack, x)[0])

    res = minimize_scalar(r_of, bracket=(grid[i_min - 1], grid[i_min], grid[i_min + 1]),
                          method="golden", options={"xtol": 1e-9})
    lam_res = float(res.x)
    r_min = r_of(lam_res)
    half = 0.5 * (plateau + r_min)
    reach = smooth_nm / 2

    def crossing(direction):
        far = lam_res + direction * reach
        if r_of(far) < half:
            raise DataError("dip wider than the search window; Q undefined")
        return brentq(lambda x: r_of(x) - half, *sorted((lam_res, far)), xtol=1e-9)

    fwhm = crossing(+1) - crossing(-1)
    q = lam_res / fwhm

    if stack.cavity is None:
        raise DataError("stack has no cavity layer range; cannot split mirrors")
    c0, c1 = stack.cavity
    n_cav_top = stack.layers[c0].refractive_index
    n_cav_bot = stack.layers[c1 - 1].refractive_index
    r_top = _mirror_reflectivity(stack.layers[:c0], stack.n_superstrate, n_cav_top, lam_res)
    r_bot = _mirror_reflectivity(stack.layers[c1:], n_cav_bot, stack.n_substrate, lam_res)
    eta = (1 - r_top) / ((1 - r_top) + (1 - r_bot))
    return CavityMode(lam_res, q, eta, r_top, r_bot, r_min)


def stack_from_layers(rows: Sequence[tuple[str, float]], design_wavelength: float,
                      indices: Optional[Mapping[str, complex]] = None,
                      superstrate: str = "air", substrate: str = GAAS) -> LayerStack:
    """Explicit layer list of (label, thickness_nm) pairs, top first.

    A label is a material name optionally followed by a tag; layers tagged
    ``cavity`` or ``barrier`` form the cavity, which must be contiguous.
    The QD plane is put at the optical midpoint of the cavity.
    """
    idx = dict(DEFAULT_INDICES)
    if indices:
        idx.update(indices)
    layers, cav = [], []
    for i, (name, t) in enumerate(rows):
        base, _, tag = name.strip().partition(" ")
        if tag.strip() in ("cavity", "barrier"):
            cav.append(i)
        elif tag.strip():
            raise ValidationError(f"unknown layer tag {tag.strip()!r}", "stack", name)
        layers.append(Layer(float(t), _index(idx, base), name))
    cavity, qd = None, None
    if cav:
        if cav != list(range(cav[0], cav[-1] + 1)):
            raise ValidationError("cavity layers must be contiguous", "stack", "cavity")
        cavity = (cav[0], cav[-1] + 1)
        qd = _optical_midpoint(layers, cavity)
    return LayerStack(tuple(layers), design_wavelength, _index(idx, superstrate),
                      _index(idx, substrate), cavity, qd)


def _optical_midpoint(layers, cavity) -> float:
    z = float(sum(l.thickness for l in layers[:cavity[0]]))
    cav = layers[cavity[0]:cavity[1]]
    half = 0.5 * sum(l.thickness * complex(l.refractive_index).real for l in cav)
    for l in cav:
        opt = l.thickness * complex(l.refractive_index).real
        if opt >= half:
            return z + half / complex(l.refractive_index).real
        half -= opt
        z += l.thickness
    return z


def read_layers_csv(path) -> list[tuple[str, float]]:
    """Rows of ``material,thickness_nm`` (header required), top layer first."""
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["material", "thickness_nm"]:
            raise DataError(f"{path}: expected header 'material,thickness_nm'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or row[0].startswith("#"):
                continue
            try:
                rows.append((row[0].strip(), float(row[1])))
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: bad row {row!r}") from None
    if not rows:
        raise DataError(f"{path}: no layers")
    return rows


def write_layers_csv(path, stack: LayerStack) -> None:
    with open(path, "w") as fh:
        fh.write("material,thickness_nm\n")
        for l in stack.layers:
            fh.write(f"{l.label},{l.thickness!r}\n")
