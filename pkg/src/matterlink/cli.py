"""Command-line entry point: ``matterlink <verb> [config.toml] [--set sec.key=val]``.

Verbs: layout-init, synth, verify, link, sweep, ramsey, rates. Each verb
writes plot-ready delimited text or JSON records plus ``manifest.json``
into the output directory (``-o``, ``run.output_dir``, ``$MATTERLINK_OUT``,
or ``./matterlink-out`` in that order).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time

import numpy as np

from . import __version__
from . import config as C
from .coherence import contrast_decay, fringe_fit, simulate_ramsey
from .dynamics import SweepContext, simulate_link, sweep, dumps_trajectory
from .linkrate import compare
from .signalchain import predistort
from .trapmodel import dumps_layout, secular_frequencies, trap_depth_and_barrier
from .waveform import (TrapBasis, WellTarget, curvature_for_frequency, downsample,
                       dumps_waveform, loads_waveform, smooth, solve_well, synthesize_raw,
                       verify_waveform)

log = logging.getLogger("matterlink")

VERBS = ("layout-init", "synth", "verify", "link", "sweep", "ramsey", "rates")
ENV_OUT = "MATTERLINK_OUT"


# -- output helpers -------------------------------------------------------------------

def _json(obj):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)
    return json.dumps(obj, indent=2, sort_keys=True, default=default, allow_nan=True) + "\n"


def _csv(header, rows, comments=()):
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows([_fmt(v) for v in r] for r in rows)
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_outputs(out_dir, files):
    """Write ``{name: text}`` atomically; returns sha256 per file."""
    os.makedirs(out_dir, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            staged.append((tmp, os.path.join(out_dir, name)))
        for tmp, dest in staged:
            os.replace(tmp, dest)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
    return {name: hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in files.items()}


def _versions():
    import numba
    import scipy
    return {"matterlink": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


# -- pipeline pieces -------------------------------------------------------------------

def _transport_inputs(cfg, waveform_path=None):
    model = C.trap_model(cfg)
    scfg = C.synthesis(cfg)
    if waveform_path:
        with open(waveform_path, encoding="utf-8") as fh:
            w = loads_waveform(fh.read())
        return model, scfg, TrapBasis(model, w.electrodes), w, None
    basis = TrapBasis(model, scfg.active_electrodes or None)
    zones = model.layout.zones
    start, stop = zones[cfg["synthesis"]["from_zone"]], zones[cfg["synthesis"]["to_zone"]]
    raw = synthesize_raw(basis, start, stop, scfg)
    smoothed = smooth(raw, scfg) if len(raw) >= scfg.sg_window else raw
    w = downsample(smoothed, scfg)
    w.dwell_us = scfg.dwell_us
    return model, scfg, basis, w, raw


def _applied_waveform(cfg, w, chain):
    reg = cfg["signal"]["predistort_reg"]
    if chain is None or reg is None:
        return w, None
    res = predistort(w, chain, reg=reg, oversample=cfg["signal"]["oversample"])
    return res.waveform, res


# -- verbs ---------------------------------------------------------------------------------

def verb_layout_init(cfg, args):
    layout = C.trap_model(cfg).layout
    return {"layout.txt": dumps_layout(layout)}, {"electrodes": len(layout.electrodes)}


def verb_synth(cfg, args):
    model, scfg, basis, w, raw = _transport_inputs(cfg, args.waveform)
    summary = {
        "seed": cfg["run"]["seed"],
        "from_zone": cfg["synthesis"]["from_zone"],
        "to_zone": cfg["synthesis"]["to_zone"],
        "raw_solutions": None if raw is None else len(raw),
        "transport_solutions": len(w),
        "all_converged": bool(np.all(w.converged)),
        "distance_um": float(abs(w.positions[-1] - w.positions[0])),
        "dwell_us": w.dwell_us,
        "duration_us": w.duration_us,
        "mean_speed_m_per_s": abs(w.velocity),
        "electrodes": list(w.electrodes),
        "max_abs_voltage_v": float(np.max(np.abs(w.voltages))),
    }
    return {"waveform.csv": dumps_waveform(w), "synth.json": _json(summary)}, summary


def verb_verify(cfg, args):
    model, scfg, basis, w, _ = _transport_inputs(cfg, args.waveform)
    diag = verify_waveform(basis, w)
    depth = trap_depth_and_barrier(model.layout, model=model)
    zone = model.layout.zones[cfg["synthesis"]["from_zone"]]
    target = WellTarget(zone, curvature_for_frequency(scfg.axial_frequency, model.ion))
    sol = solve_well(basis, target, scfg)
    sec = secular_frequencies(model, basis.full_voltages(sol.voltages), sol.point)
    prof = depth.profile
    summary = {
        "seed": cfg["run"]["seed"],
        "mean_null_height_um": float(np.mean(prof.z)),
        "null_height_variation_um": prof.height_variation,
        "trap_depth_mev": depth.depth_mev,
        "rf_barrier_mev": depth.barrier_mev,
        "zone_well": {"position_um": zone, "axial_hz": sec.axial,
                      "radial_hz": sorted(float(f) for f in sec.radial)},
        "max_offset_um": diag.max_offset,
        "mean_offset_um": diag.mean_offset,
        "frequency_drift": diag.frequency_drift(scfg.axial_frequency),
        "all_bounded": bool(np.all(diag.bounded)),
    }
    table = _csv(["intended_um", "actual_um", "offset_um", "axial_hz", "field_residual_v_per_m"],
               diag.rows().tolist())
    null = _csv(["x_um", "y_um", "z_um", "pseudo_mev"],
                np.column_stack([prof.x, prof.y, prof.z, prof.energy_mev]).tolist())
    return {"verify.csv": table, "null_profile.csv": null, "verify.json": _json(summary)}, summary


def verb_link(cfg, args):
    model, scfg, basis, w, _ = _transport_inputs(cfg, args.waveform)
    chain = C.signal_chain(cfg)
    applied, pre = _applied_waveform(cfg, w, chain)
    rep, traj = simulate_link(model, applied, chain, C.integrator(cfg),
                              oversample=cfg["signal"]["oversample"], seed=cfg["run"]["seed"],
                              return_trajectory=True)
    summary = dict(rep.as_dict(), seed=cfg["run"]["seed"], link_rate_per_s=rep.link_rate,
                   filtered=chain is not None, predistorted=pre is not None)
    if pre is not None:
        summary["predistortion_tracking_error_v"] = pre.tracking_error
    files = {"link.json": _json(summary), "trajectory.csv": dumps_trajectory(traj)}
    return files, summary


def verb_sweep(cfg, args):
    model, scfg, basis, w, _ = _transport_inputs(cfg, args.waveform)
    ctx = SweepContext(model, w, scfg, C.signal_chain(cfg), C.integrator(cfg), C.layout_params(cfg))
    rows = sweep(cfg["sweep"]["parameter"], cfg["sweep"]["grid"], ctx)
    fields = ["success", "duration_us", "mean_speed", "final_axial_energy_mev", "final_quanta",
              "final_axial_frequency_hz", "max_excursion_from_null_um", "reached_target",
              "escaped"]
    table, records = [], []
    for r in rows:
        rep = r["report"].as_dict() if r["report"] is not None else None
        value = json.dumps(r["value"])
        table.append([value] + [rep[f] if rep else None for f in fields] + [r["error"] or ""])
        records.append({"value": r["value"], "report": rep, "error": r["error"]})
    failed = sum(r["error"] is not None for r in rows)
    summary = {"seed": cfg["run"]["seed"], "parameter": cfg["sweep"]["parameter"],
               "rows": records, "failed_rows": failed}
    files = {"sweep.csv": _csv(["value"] + fields + ["error"], table,
                               [f"parameter: {cfg['sweep']['parameter']}"]),
             "sweep.json": _json(summary)}
    return files, summary


def verb_ramsey(cfg, args):
    r = cfg["ramsey"]
    q, noise = C.qubit(cfg), C.noise(cfg)
    taus = sorted(float(t) for t in r["tau_ms"])
    base = C.ramsey_sequence(cfg, tau_ms=taus[0])
    seed = cfg["run"]["seed"]
    fr = simulate_ramsey(q, noise, base, r["shots"], seed, r["detection_error"])
    ff = fringe_fit(fr.phi2, fr.p1, r["shots"])
    scan = contrast_decay(q, noise, taus, r["shots"], seed, base, r["detection_error"])
    fit = scan.fit
    summary = {
        "seed": seed,
        "shots": r["shots"],
        "sigma_b_g": noise.sigma_b,
        "fringe": {"tau_ms": taus[0], "contrast": ff.contrast, "contrast_err": ff.contrast_err,
                   "phase_rad": ff.phase, "phase_err_rad": ff.phase_err},
        "decay": {"c0": fit.contrast0, "c0_err": fit.contrast0_err, "t2_ms": fit.t2_ms,
                  "t2_err_ms": fit.t2_err_ms, "decaying": fit.decaying},
        "qubit_slope_hz_per_g": q.slope(),
    }
    files = {
        "fringe.csv": _csv(["phi2_rad", "p1", "stderr", "sample_std"], fr.rows().tolist(),
                           [f"tau_ms: {taus[0]!r}", f"shots: {r['shots']}"]),
        "contrast.csv": _csv(["tau_ms", "contrast", "contrast_err"], scan.rows().tolist(),
                             [f"shots: {r['shots']}"]),
        "ramsey.json": _json(summary),
    }
    return files, summary


def verb_rates(cfg, args):
    out = compare(C.photonic(cfg), C.matter(cfg))
    fr = out["photonic_fractions"]
    out["two_decimal_fractions"] = {k: round(v, 2) for k, v in fr.items()}
    out["seed"] = cfg["run"]["seed"]
    return {"rates.json": _json(out)}, out


HANDLERS = {"layout-init": verb_layout_init, "synth": verb_synth, "verify": verb_verify,
            "link": verb_link, "sweep": verb_sweep, "ramsey": verb_ramsey, "rates": verb_rates}


# -- driver -----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="matterlink", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("config", nargs="?", help="TOML run configuration (defaults if omitted)")
    p.add_argument("-o", "--out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--waveform", help="use a saved waveform.csv instead of synthesising")
    p.add_argument("--check", action="store_true", help="validate the config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def output_dir(cfg, cli_value=None):
    return (cli_value or cfg["run"]["output_dir"] or os.environ.get(ENV_OUT)
            or os.path.join(os.getcwd(), "matterlink-out"))


def run(verb, config_path=None, overrides=(), out=None, waveform=None, check=False):
    """Run one verb; returns (exit status, manifest or diagnostics)."""
    if config_path is not None and not os.path.isfile(config_path):
        return 2, [f"config file not found: {config_path}"]
    try:
        cfg = C.load_config(config_path, overrides)
    except C.ConfigError as exc:
        return 2, exc.diagnostics
    diags = C.validate_config(cfg)
    if diags:
        return 2, diags
    if check:
        return 0, []
    if waveform is not None and not os.path.isfile(waveform):
        return 2, [f"waveform file not found: {waveform}"]

    args = argparse.Namespace(waveform=waveform)
    t0 = time.perf_counter()
    status = 0
    try:
        files, summary = HANDLERS[verb](cfg, args)
    except Exception as exc:  # no partial outputs from a crashed verb
        log.debug("verb failed", exc_info=True)
        return 1, [f"{verb}: {type(exc).__name__}: {exc}"]
    if verb == "sweep" and summary["failed_rows"]:
        status = 1
    elapsed = time.perf_counter() - t0
    files["config.toml"] = C.dumps_config(cfg)
    sums = write_outputs(output_dir(cfg, out), files)
    manifest = {
        "verb": verb,
        "config_sha256": C.config_digest(cfg),
        "seed": cfg["run"]["seed"],
        "versions": _versions(),
        "outputs": sums,
        "timings_s": {verb: round(elapsed, 3)},
        "status": status,
    }
    write_outputs(output_dir(cfg, out), {"manifest.json": _json(manifest)})
    return status, manifest


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    status, info = run(args.verb, args.config, args.overrides, args.out, args.waveform,
                       args.check)
    if isinstance(info, list):
        for line in info:
            print(line, file=sys.stderr)
        if args.check and status == 0:
            print("config ok")
    else:
        for name, digest in info["outputs"].items():
            print(f"{digest[:12]}  {name}")
        if status:
            print(f"{args.verb}: completed with failures", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
