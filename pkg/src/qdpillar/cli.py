"""Command-line front end.

Every command validates its inputs, computes all results in memory and
only then writes them, together with a ``manifest.json`` naming the
command, toolkit version, config hash, seed and output hashes.  Nothing in
a manifest depends on wall-clock time, so reruns are byte-identical.

Exit codes: 0 success, 2 invalid configuration or flags, 3 unusable data,
4 fit non-convergence.
"""
from __future__ import annotations

import argparse
import io
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import correlator as corr
from . import fitting, montecarlo, streams, tmm, zeeman
from .config import RunConfig, git_blob_sha1, load_config
from .errors import ConvergenceError, DataError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CONVERGENCE = 0, 2, 3, 4


class _Outputs:
    """Files staged in memory, written together once the command succeeded."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.files: dict[str, bytes] = {}

    def add(self, name: str, data):
        self.files[name] = data.encode() if isinstance(data, str) else bytes(data)

    def add_writer(self, name: str, fn, *args):
        buf = io.StringIO()
        fn(buf, *args)
        self.add(name, buf.getvalue())

    def commit(self, command: str, seed=None, config_hash=None, parameters=None):
        manifest = {
            "command": command,
            "toolkit": "qdpillar",
            "version": __version__,
            "config_sha1": config_hash,
            "seed": seed,
            "parameters": parameters or {},
            "outputs": {k: git_blob_sha1(v) for k, v in sorted(self.files.items())},
        }
        self.add("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self.directory.mkdir(parents=True, exist_ok=True)
        for name, data in self.files.items():
            (self.directory / name).write_bytes(data)
        return manifest


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))
                       for x in row) for row in rows]
    return "\n".join(lines) + "\n"


def _out_dir(args, cfg: Optional[RunConfig] = None) -> Path:
    if args.output:
        return Path(args.output)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    raise ValidationError("no output directory: pass -o or set run.output_dir", "run", "output_dir")


# simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    cfg.require("charge", "pulses", "detection")
    if "duration_s" not in cfg.sections["run"]:
        raise ValidationError("missing required key", "run", "duration_s")
    out = _Outputs(_out_dir(args, cfg))
    trace_bin = cfg.get("run", "trace_bin_s")
    if trace_bin is not None and not trace_bin > 0:
        raise ValidationError("must be > 0", "run", "trace_bin_s")
    chunk = cfg.get("run", "chunk_s", 0.02)
    if not chunk > 0:
        raise ValidationError("must be > 0", "run", "chunk_s")

    run = montecarlo.simulate_source(cfg.charge, cfg.pulses, cfg.detection, cfg.seed, chunk)
    for s in run.channels:
        out.add(f"ch{s.channel}.qdts", streams.qdts_bytes([s]))
    params = {"n_emitted": run.n_emitted, "n_photon_clicks": run.n_photon_clicks,
              "n_background_clicks": run.n_background_clicks,
              "clicks": [len(s) for s in run.channels],
              "hole_occupancy": run.trajectory.occupancy(),
              "duration_s": cfg.pulses.duration, "period_ps": cfg.pulses.period_ps,
              "p_qd": run.p_qd}
    if trace_bin is not None:
        trace = montecarlo.time_trace(list(run.channels), trace_bin)
        out.add("trace.csv", _csv_text(["time_s", "counts"],
                                       zip(np.arange(trace.size) * trace_bin, trace)))
        hist = np.bincount(trace)
        out.add("trace_histogram.csv", _csv_text(["counts", "occurrences"],
                                                 zip(range(hist.size), hist)))
        try:
            ba = montecarlo.blink_histogram(trace)
            params["blink"] = {"occupancy_estimate": ba.occupancy_estimate,
                               "bright_mean": ba.bright_mean, "bright_sigma": ba.bright_sigma,
                               "threshold": ba.threshold}
        except DataError as exc:
            params["blink"] = {"error": str(exc)}
    out.commit("simulate", cfg.seed, cfg.source_hash, params)
    return EXIT_OK


# correlate ----------------------------------------------------------------

def _parse_rebin(text: Optional[str], rep_rate: float, bin_ps: int) -> int:
    if not text:
        return 1
    t = text.strip().upper()
    periods = t.endswith("TR")
    try:
        n = int(t[:-2] or "1") if periods else int(t)
    except ValueError:
        raise ValidationError(f"cannot parse {text!r}; use an integer or e.g. 10TR",
                              "flags", "rebin") from None
    if not periods:
        return n
    width = n * int(round(1e12 / rep_rate))
    if width % bin_ps:
        raise ValidationError(f"{n} x T_R = {width} ps is not a multiple of the bin width",
                              "flags", "rebin")
    return width // bin_ps


def _load_channels(paths, duration):
    chans = []
    for p in paths:
        chans.extend(streams.read_streams(p, duration))
    if len(chans) != 2:
        raise DataError(f"expected two channels in total, got {len(chans)}")
    return chans


def cmd_correlate(args) -> int:
    if args.bin_ps <= 0:
        raise ValidationError("must be > 0", "flags", "bin-ps")
    if args.max_delay_ps <= 0 or args.max_delay_ps % args.bin_ps:
        raise ValidationError("must be a positive multiple of --bin-ps", "flags", "max-delay-ps")
    if not args.rep_rate_hz > 0:
        raise ValidationError("must be > 0", "flags", "rep-rate-hz")
    factor = _parse_rebin(args.rebin, args.rep_rate_hz, args.bin_ps)
    n_bins = 2 * args.max_delay_ps // args.bin_ps
    if factor < 1 or n_bins % factor:
        raise ValidationError(f"rebin factor {factor} must divide the bin count {n_bins}",
                              "flags", "rebin")
    out = _Outputs(_out_dir(args))
    ch0, ch1 = _load_channels(args.streams, args.duration_s or 0.0)
    hist = corr.coincidences(ch0, ch1, args.bin_ps, args.max_delay_ps, args.jobs)
    if factor > 1:
        hist = corr.rebin(hist, factor)
    out.add_writer("histogram.csv", corr.write_histogram_csv, hist)
    out.add_writer("g2.csv", corr.write_g2_csv, corr.normalize(hist))
    params = {"streams": [Path(p).name for p in args.streams],
              "bin_width_ps": hist.bin_width, "max_delay_ps": args.max_delay_ps,
              "rebin_factor": factor, "total_starts": hist.total_starts,
              "total_stops": hist.total_stops, "duration_s": hist.duration,
              "input_sha1": [git_blob_sha1(Path(p).read_bytes()) for p in args.streams]}
    out.commit("correlate", None, None, params)
    return EXIT_OK


# fit ----------------------------------------------------------------------

def cmd_fit(args) -> int:
    if args.pqd is not None and not 0 < args.pqd <= 1:
        raise ValidationError("must be in (0, 1]", "flags", "pqd")
    out = _Outputs(_out_dir(args))
    g2 = corr.read_g2_csv(args.g2)
    if args.pqd is not None:
        g2 = fitting.correct_background(g2, args.pqd)
    fit = fitting.fit_envelope(g2, exclude_within=args.exclude_within_s)
    out.add("fit.txt", fit.report())
    out.add("fit_curve.csv", _csv_text(["delay_s", "g2", "g2_model"],
                                       zip(g2.delays, g2.values, fit.model(g2.delays))))
    params = {"input": Path(args.g2).name, "input_sha1": git_blob_sha1(Path(args.g2).read_bytes()),
              "p_qd": args.pqd, "amplitude": fit.amplitude, "tau_eff_s": fit.tau_eff,
              "p_h_mean": fit.p_h_mean, "t_hole_s": fit.t_hole}
    out.commit("fit", None, None, params)
    return EXIT_OK


# tmm ----------------------------------------------------------------------

def _stack(args) -> tmm.LayerStack:
    if bool(args.config) == bool(args.layers):
        raise ValidationError("give exactly one of --config or --layers", "flags", "stack")
    if args.config:
        cfg = load_config(args.config)
        cfg.require("tmm")
        s = cfg.sections["tmm"]
        idx = {}
        for key, mat in (("n_gaas", tmm.GAAS), ("n_al90", tmm.AL90), ("n_al10", tmm.AL10)):
            if key in s:
                idx[mat] = s[key]
        try:
            return tmm.build_stack(s["top_pairs"], s["bottom_pairs"],
                                   s.get("design_wavelength_nm", 925.0), idx,
                                   s.get("barrier", True), s.get("barrier_thickness_nm", 20.0),
                                   s.get("barrier_offset_nm", 10.0))
        except ValidationError as exc:
            raise ValidationError(exc.reason, "tmm", exc.field or "*") from None
    rows = tmm.read_layers_csv(args.layers)
    return tmm.stack_from_layers(rows, args.design_nm, superstrate=args.superstrate,
                                 substrate=args.substrate)


def cmd_tmm(args) -> int:
    stack = _stack(args)
    out = _Outputs(_out_dir(args))
    params = {"what": args.what, "n_layers": len(stack.layers),
              "design_wavelength_nm": stack.design_wavelength}
    if args.what == "reflectivity":
        lam0 = stack.design_wavelength
        start = args.start_nm if args.start_nm is not None else lam0 - 100
        stop = args.stop_nm if args.stop_nm is not None else lam0 + 100
        if not (stop > start and args.step_nm > 0):
            raise ValidationError("need start < stop and step > 0", "flags", "wavelength range")
        lam = start + args.step_nm * np.arange(int(math.floor((stop - start) / args.step_nm)) + 1)
        r = tmm.reflectivity(stack, lam)
        t = tmm.transmittance(stack, lam)
        out.add("reflectivity.csv", _csv_text(["wavelength_nm", "R", "T"], zip(lam, r, t)))
    elif args.what == "field":
        lam = args.wavelength_nm
        if lam is None:
            lam = tmm.cavity_mode(stack).resonance_wavelength
        prof = tmm.field_profile(stack, lam, args.resolution_nm)
        out.add("field.csv", _csv_text(["depth_nm", "intensity"],
                                       zip(prof.positions, prof.intensity)))
        params["wavelength_nm"] = lam
    else:
        m = tmm.cavity_mode(stack)
        report = ["[mode]", f"resonance_wavelength_nm = {m.resonance_wavelength!r}",
                  f"quality_factor = {m.quality_factor!r}", f"eta_top = {m.eta_top!r}",
                  f"r_top = {m.r_top!r}", f"r_bottom = {m.r_bottom!r}",
                  f"dip_reflectivity = {m.dip_reflectivity!r}"]
        out.add("mode.txt", "\n".join(report) + "\n")
        params.update(resonance_wavelength_nm=m.resonance_wavelength,
                      quality_factor=m.quality_factor, eta_top=m.eta_top)
    cfg_hash = git_blob_sha1(Path(args.config or args.layers).read_bytes())
    out.commit(f"tmm {args.what}", None, cfg_hash, params)
    return EXIT_OK


# zeeman -------------------------------------------------------------------

def _fmt_b(b: float) -> str:
    return f"{b:g}".replace(".", "p")


def cmd_zeeman(args) -> int:
    if args.what == "synth":
        cfg = load_config(args.config)
        cfg.require("zeeman")
        s = cfg.sections["zeeman"]
        fields = args.b_field if args.b_field else list(s.get("b_fields_t", (0.0, 4.0)))
        if any(not b >= 0 for b in fields):
            raise ValidationError("fields must be >= 0", "flags", "b-field")
        noise = s.get("noise_level", 0.0)
        fwhm = s.get("instrument_fwhm_ev")
        out = _Outputs(_out_dir(args, cfg))
        lines_all = {b: zeeman.line_energies(cfg.zeeman, b) for b in fields}
        every = [ln for lines in lines_all.values() for ln in lines]
        grid = zeeman.default_grid(every, s.get("step_nm", 1e-4))
        seeds = np.random.SeedSequence(cfg.seed).spawn(len(fields))
        for b, ss in zip(fields, seeds):
            spec = zeeman.synth_spectrum(lines_all[b], grid, noise,
                                         int(ss.generate_state(1)[0]) if noise > 0 else None,
                                         cfg.zeeman.linewidth, s.get("peak_counts", 1000.0), fwhm)
            out.add_writer(f"spectrum_B{_fmt_b(b)}T.csv", zeeman.write_spectrum_csv, spec)
        out.commit("zeeman synth", cfg.seed, cfg.source_hash,
                   {"species": cfg.zeeman.species, "b_fields_t": list(fields)})
        return EXIT_OK

    if args.min_prominence is not None and not args.min_prominence > 0:
        raise ValidationError("must be > 0", "flags", "min-prominence")
    out = _Outputs(_out_dir(args))
    reports, verdicts = [], {}
    for path in args.spectra:
        spec = zeeman.read_spectrum_csv(path)
        c = zeeman.identify(spec, args.min_prominence, args.smooth, args.tolerance_ev)
        reports.append(f"# {Path(path).name}\n" + c.report())
        verdicts[Path(path).name] = c.verdict
    out.add("classification.txt", "\n".join(reports))
    out.commit("zeeman classify", None, None, {"verdicts": verdicts})
    return EXIT_OK


# entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdpillar",
                                description="Quantum-dot micropillar source characterization.")
    p.add_argument("--version", action="version", version=f"qdpillar {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="Monte Carlo blinking source -> QDTS streams")
    s.add_argument("config")
    s.add_argument("-o", "--output")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("correlate", help="coincidence histogram and normalized g2")
    c.add_argument("streams", nargs="+", help="QDTS/CSV files holding two channels in total")
    c.add_argument("--bin-ps", type=int, default=1000)
    c.add_argument("--max-delay-ps", type=int, required=True)
    c.add_argument("--rebin", help="integer factor, or NTR for N repetition periods")
    c.add_argument("--rep-rate-hz", type=float, default=82e6)
    c.add_argument("--duration-s", type=float, help="acquisition time (default: last click)")
    c.add_argument("--jobs", type=int, default=1)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_correlate)

    f = sub.add_parser("fit", help="bunching-envelope fit of a g2 CSV")
    f.add_argument("g2")
    f.add_argument("--pqd", type=float, help="dot fraction of detections; applies background correction")
    f.add_argument("--exclude-within-s", type=float)
    f.add_argument("-o", "--output")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("tmm", help="planar microcavity optics")
    t.add_argument("what", choices=("reflectivity", "field", "mode"))
    t.add_argument("--config", help="run config with a [tmm] section")
    t.add_argument("--layers", help="CSV of material,thickness_nm rows")
    t.add_argument("--design-nm", type=float, default=925.0)
    t.add_argument("--superstrate", default="air")
    t.add_argument("--substrate", default=tmm.GAAS)
    t.add_argument("--start-nm", type=float)
    t.add_argument("--stop-nm", type=float)
    t.add_argument("--step-nm", type=float, default=0.1)
    t.add_argument("--wavelength-nm", type=float)
    t.add_argument("--resolution-nm", type=float, default=1.0)
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_tmm)

    z = sub.add_parser("zeeman", help="in-plane field spectra and charge-state verdicts")
    z.add_argument("what", choices=("synth", "classify"))
    z.add_argument("spectra", nargs="*", help="spectrum CSVs (classify)")
    z.add_argument("--config", help="run config with a [zeeman] section (synth)")
    z.add_argument("--b-field", type=float, action="append", help="field in tesla, repeatable")
    z.add_argument("--min-prominence", type=float)
    z.add_argument("--smooth", type=float, default=0.0)
    z.add_argument("--tolerance-ev", type=float, default=5e-6)
    z.add_argument("-o", "--output")
    z.set_defaults(func=cmd_zeeman)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "zeeman":
        if args.what == "synth" and not args.config:
            print("error: zeeman synth needs --config", file=sys.stderr)
            return EXIT_CONFIG
        if args.what == "classify" and not args.spectra:
            print("error: zeeman classify needs spectrum files", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"fit did not converge: {exc}", file=sys.stderr)
        for k, v in sorted(exc.diagnostics.items()):
            print(f"  {k} = {v!r}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
