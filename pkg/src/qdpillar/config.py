"""Run configuration: INI sections with unit-suffixed keys.

Every key is declared in ``SCHEMA`` with its type; unknown keys, missing
required keys and values breaking a module invariant raise
:class:`ValidationError` naming the section and field.  Dimensional keys
always carry their unit (``_s``, ``_hz``, ``_nm``, ``_t``, ``_ev``,
``_rad``, ``_ps``), so a bare ``duration`` is rejected rather than guessed.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .charge import ChargeModelParams, TwoHoleRates
from .errors import ValidationError
from .montecarlo import DetectionConfig, PulseTrain
from .zeeman import ZeemanModelParams


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.replace(",", " ").split())


# section -> key -> (parser, required)
SCHEMA = {
    "run": {"seed": (int, True), "duration_s": (float, False), "output_dir": (str, False),
            "chunk_s": (float, False), "trace_bin_s": (float, False)},
    "charge": {"gamma_hz": (float, False), "p_h_mean": (float, False), "t_hole_s": (float, True),
               "gamma2_hz": (float, False), "t_hole2_s": (float, False)},
    "pulses": {"rep_rate_hz": (float, True), "pulse_area_rad": (float, False)},
    "detection": {"efficiency": (float, True), "dark_rate_hz": (float, False),
                  "leakage_prob": (float, False), "splitter_ratio": (float, False),
                  "jitter_s": (float, False), "dead_time_s": (float, False)},
    "correlator": {"bin_width_ps": (int, True), "max_delay_ps": (int, True),
                   "rebin": (str, False), "n_jobs": (int, False)},
    "fit": {"p_qd": (float, False), "exclude_within_s": (float, False),
            "max_iter": (int, False)},
    "tmm": {"top_pairs": (int, True), "bottom_pairs": (int, True),
            "design_wavelength_nm": (float, False), "n_gaas": (float, False),
            "n_al90": (float, False), "n_al10": (float, False), "barrier": (_bool, False),
            "barrier_thickness_nm": (float, False), "barrier_offset_nm": (float, False)},
    "zeeman": {"species": (str, False), "e0_ev": (float, False), "fss_ev": (float, False),
               "g_electron": (float, False), "g_hole": (float, False),
               "kappa_ev_per_t2": (float, False), "linewidth_ev": (float, False),
               "x2plus_ratio": (float, False), "b_fields_t": (_floats, False),
               "noise_level": (float, False), "peak_counts": (float, False),
               "instrument_fwhm_ev": (float, False), "step_nm": (float, False)},
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: Optional[str]
    sections: dict
    source_hash: str
    charge: Optional[ChargeModelParams] = None
    pulses: Optional[PulseTrain] = None
    detection: Optional[DetectionConfig] = None
    zeeman: Optional[ZeemanModelParams] = None

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.sections.get(section, {}).get(key, default)

    def require(self, *names: str) -> None:
        for name in names:
            if name not in self.sections:
                raise ValidationError("section is required for this command", name, "*")


def git_blob_sha1(data: bytes) -> str:
    """Content hash as computed by ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _parse_sections(cp: configparser.ConfigParser) -> dict:
    out = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ValidationError(f"unknown section (expected one of {sorted(SCHEMA)})", sec, "*")
        schema = SCHEMA[sec]
        vals = {}
        for key, raw in cp.items(sec):
            if key not in schema:
                raise ValidationError("unknown key (dimensional keys need a unit suffix)", sec, key)
            conv = schema[key][0]
            try:
                v = conv(raw.strip())
            except ValueError:
                raise ValidationError(f"cannot parse {raw!r}", sec, key) from None
            if isinstance(v, float) and not math.isfinite(v):
                raise ValidationError("value must be finite", sec, key)
            vals[key] = v
        for key, (_, required) in schema.items():
            if required and key not in vals:
                raise ValidationError("missing required key", sec, key)
        out[sec] = vals
    return out


def _wrap(section: str, fn, *args, **kw):
    """Build a module object, re-tagging its validation error with ``section``."""
    try:
        return fn(*args, **kw)
    except ValidationError as exc:
        field = exc.field if exc.section == section else (exc.field or "*")
        raise ValidationError(exc.reason, section, field) from None


def _charge(s: dict) -> ChargeModelParams:
    has_g, has_p = "gamma_hz" in s, "p_h_mean" in s
    if has_g == has_p:
        raise ValidationError("give exactly one of gamma_hz or p_h_mean", "charge",
                              "gamma_hz" if has_g else "p_h_mean")
    two = None
    if "gamma2_hz" in s or "t_hole2_s" in s:
        two = _wrap("charge", TwoHoleRates, s.get("gamma2_hz", 0.0), s.get("t_hole2_s", 1.0))
    if has_p:
        if not 0 <= s["p_h_mean"] < 1:
            raise ValidationError("p_h_mean must be in [0, 1)", "charge", "p_h_mean")
        base = _wrap("charge", ChargeModelParams.from_occupancy, s["p_h_mean"], s["t_hole_s"])
        return _wrap("charge", ChargeModelParams, base.gamma, base.t_hole, two)
    return _wrap("charge", ChargeModelParams, s["gamma_hz"], s["t_hole_s"], two)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc.strerror}", "config", str(path)) from None
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(data.decode("utf-8"), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ValidationError(f"malformed config: {exc}", "config", str(path)) from None
    sections = _parse_sections(cp)
    if "run" not in sections:
        raise ValidationError("missing section", "run", "*")
    run = sections["run"]

    charge = _charge(sections["charge"]) if "charge" in sections else None
    pulses = None
    if "pulses" in sections:
        s = sections["pulses"]
        pulses = _wrap("pulses", PulseTrain, s["rep_rate_hz"], s.get("pulse_area_rad", math.pi),
                       run.get("duration_s", 1.0))
        if "duration_s" in run and not run["duration_s"] > 0:
            raise ValidationError("must be > 0", "run", "duration_s")
    detection = None
    if "detection" in sections:
        s = sections["detection"]
        detection = _wrap("detection", DetectionConfig, s["efficiency"], s.get("dark_rate_hz", 0.0),
                          s.get("leakage_prob", 0.0), s.get("splitter_ratio", 0.5),
                          s.get("jitter_s", 0.0), s.get("dead_time_s", 0.0))
    if "correlator" in sections:
        s = sections["correlator"]
        if s["bin_width_ps"] <= 0:
            raise ValidationError("must be > 0", "correlator", "bin_width_ps")
        if s["max_delay_ps"] <= 0 or s["max_delay_ps"] % s["bin_width_ps"]:
            raise ValidationError("must be a positive multiple of bin_width_ps",
                                  "correlator", "max_delay_ps")
    if "fit" in sections and "p_qd" in sections["fit"]:
        if not 0 < sections["fit"]["p_qd"] <= 1:
            raise ValidationError("must be in (0, 1]", "fit", "p_qd")
    if "tmm" in sections:
        s = sections["tmm"]
        for k in ("top_pairs", "bottom_pairs"):
            if s[k] < 1:
                raise ValidationError("must be >= 1", "tmm", k)
        for k in ("n_gaas", "n_al90", "n_al10", "design_wavelength_nm"):
            if k in s and not s[k] > 0:
                raise ValidationError("must be > 0", "tmm", k)
    zeeman = None
    if "zeeman" in sections:
        s = sections["zeeman"]
        kw = {}
        for key, attr in (("species", "species"), ("e0_ev", "e0"), ("fss_ev", "fss"),
                          ("g_electron", "g_electron"), ("g_hole", "g_hole"),
                          ("kappa_ev_per_t2", "kappa"), ("linewidth_ev", "linewidth"),
                          ("x2plus_ratio", "x2plus_ratio")):
            if key in s:
                kw[attr] = s[key]
        zeeman = _wrap("zeeman", ZeemanModelParams, **kw)
        if any(b < 0 for b in s.get("b_fields_t", ())):
            raise ValidationError("fields must be >= 0", "zeeman", "b_fields_t")
    return RunConfig(run["seed"], run.get("output_dir"), sections, git_blob_sha1(data),
                     charge, pulses, detection, zeeman)
