"""Run configuration: a TOML document with unit-suffixed keys.

Every physical quantity carries its unit in the key name (``gap_x_um``,
``frequency_hz``). Unknown sections or keys are rejected, and
:func:`validate_config` collects the invariant checks of every module into
one list of ``section.key: message`` diagnostics.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .coherence import ClockQubit, FieldNoiseModel, RamseySequence
from .dynamics import SWEEP_PARAMETERS, IntegratorConfig
from .linkrate import MatterLinkParams, PhotonicParams
from .signalchain import STAGE_KINDS, DacModel, FilterStage, SignalChain
from .trapmodel import IonSpecies, LayoutParams, RfDrive, TrapModel, build_two_module_layout
from .trapmodel.trap import GAP_MODELS
from .waveform import SynthesisConfig

FLOAT = (int, float)
OPT_FLOAT = (int, float, type(None))
OPT_INT = (int, type(None))

# section -> key -> (default, accepted types)
SCHEMA = {
    "run": {
        "seed": (0, (int,)),
        "output_dir": (None, (str, type(None))),
    },
    "layout": {
        "rf_width_um": (270.0, FLOAT),
        "rf_separation_um": (90.0, FLOAT),
        "dc_width_um": (220.0, FLOAT),
        "dc_pitch_um": (230.0, FLOAT),
        "dc_length_um": (1000.0, FLOAT),
        "rf_dc_clearance_um": (10.0, FLOAT),
        "n_dc": (12, (int,)),
        "gap_x_um": (10.0, FLOAT),
        "misalign_y_um": (0.0, FLOAT),
        "misalign_z_um": (0.0, FLOAT),
        "zone_separation_um": (684.0, FLOAT),
        "loading_offset_um": (1840.0, FLOAT),
        "center_ground": (True, (bool,)),
        "gap_model": ("bridged", (str,)),
    },
    "drive": {
        "amplitude_v": (101.75, FLOAT),
        "frequency_hz": (19.32e6, FLOAT),
        "phase_mismatch_rad": (0.0, FLOAT),
        "amplitude_mismatch_v": (0.0, FLOAT),
    },
    "ion": {
        "mass_amu": (174.0, FLOAT),
        "charge_e": (1, (int,)),
    },
    "synthesis": {
        "from_zone": ("Zone1", (str,)),
        "to_zone": ("Zone2", (str,)),
        "p1": (1e6, FLOAT),
        "p2": (1e4, FLOAT),
        "voltage_bound_v": (10.0, FLOAT),
        "active_electrodes": ([], (list,)),
        "step_raw_um": (2.0, FLOAT),
        "step_transport_um": (12.0, FLOAT),
        "sg_window": (25, (int,)),
        "sg_order": (2, (int,)),
        "axial_frequency_hz": (141e3, FLOAT),
        "dwell_us": (SynthesisConfig().dwell_us, FLOAT),
        "field_tol_v_per_m": (1.0, FLOAT),
        "curvature_tol": (1e-3, FLOAT),
        "max_iter": (200, (int,)),
    },
    "signal": {
        "enabled": (True, (bool,)),
        "update_rate_hz": (139e3, FLOAT),
        "voltage_range_v": (None, OPT_FLOAT),
        "bits": (None, OPT_INT),
        "oversample": (128, (int,)),
        "stages": ([{"kind": "butterworth3", "cutoff_hz": 75e3},
                    {"kind": "rc2", "cutoff_hz": 47e3},
                    {"kind": "rc1", "cutoff_hz": 257e3}], (list,)),
        "predistort_reg": (None, OPT_FLOAT),
    },
    "integrator": {
        "mode": ("secular", (str,)),
        "step_us": (0.02, FLOAT),
        "record_every": (10, (int,)),
        "settle_us": (30.0, FLOAT),
    },
    "sweep": {
        "parameter": ("duration", (str,)),
        "grid": ([412.5, 1650.0, 4125.0], (list,)),
    },
    "ramsey": {
        "tau_ms": ([5.0, 100.0, 200.0, 300.0, 400.0, 500.0], (list,)),
        "n_links": (0, (int,)),
        "link_us": (800.0, FLOAT),
        "phi2_points": (21, (int,)),
        "shots": (100, (int,)),
        "cool_us": (50_000.0, FLOAT),
        "pump_us": (10.0, FLOAT),
        "f_ref_hz": (None, OPT_FLOAT),
        "placement": ("start", (str,)),
        "t2_ms": (560.0, OPT_FLOAT),
        "sigma_b_g": (None, OPT_FLOAT),
        "drift_g_per_s": (0.0, FLOAT),
        "detection_error": (0.0, FLOAT),
        "b0_g": (10.177, FLOAT),
        "f0_hz": (12_642_812_118.0, FLOAT),
        "quadratic_hz_per_g2": (311.0, FLOAT),
    },
    "photonic": {
        "raw_rate_per_s": (182.0, FLOAT),
        "conversion_efficiency": (0.09, FLOAT),
        "switch_loss_db": (2.1, FLOAT),
        "raw_fidelity": (0.94, FLOAT),
        "target_fidelity": (0.997, FLOAT),
        "distillation_factor": (6.0, FLOAT),
    },
    "matter": {
        "link_duration_us": (412.5, FLOAT),
        "loss_infidelity": (7e-8, FLOAT),
        "coherence_infidelity": (5e-4, FLOAT),
    },
}


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def default_config():
    return {sec: {k: copy.deepcopy(v[0]) for k, v in keys.items()}
            for sec, keys in SCHEMA.items()}


def _type_ok(value, types):
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def merge(base, doc):
    """Overlay ``doc`` on ``base``; unknown sections/keys and bad types raise."""
    out = copy.deepcopy(base)
    problems = []
    for sec, body in doc.items():
        if sec not in SCHEMA:
            problems.append(f"{sec}: unknown section")
            continue
        if not isinstance(body, dict):
            problems.append(f"{sec}: expected a table")
            continue
        for key, value in body.items():
            if key not in SCHEMA[sec]:
                problems.append(f"{sec}.{key}: unknown key")
            elif not _type_ok(value, SCHEMA[sec][key][1]):
                problems.append(f"{sec}.{key}: expected {_type_names(SCHEMA[sec][key][1])}, "
                                f"got {type(value).__name__}")
            else:
                out[sec][key] = float(value) if (isinstance(value, int) and not
                                                 isinstance(value, bool) and
                                                 float in SCHEMA[sec][key][1]) else value
    if problems:
        raise ConfigError(problems)
    return out


def _type_names(types):
    return " or ".join("none" if t is type(None) else t.__name__ for t in types)


def parse_override(text):
    """``section.key=value`` with a TOML value (bare words are strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError([f"override {text!r}: expected section.key=value"])
    path, raw = text.split("=", 1)
    sec, key = path.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return {sec: {key: value}}


def load_config(path=None, overrides=()):
    cfg = default_config()
    if path is not None:
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError([f"{path}: {exc}"]) from None
        cfg = merge(cfg, doc)
    for o in overrides:
        cfg = merge(cfg, parse_override(o))
    return cfg


def config_digest(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def dumps_config(cfg):
    """TOML text of a resolved config (``None`` values are omitted)."""
    lines = []
    for sec, body in cfg.items():
        lines.append(f"[{sec}]")
        for key, value in body.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    return "[" + ", ".join(_toml_value(x) for x in v) + "]"


# -- builders ----------------------------------------------------------------------

def layout_params(cfg):
    c = cfg["layout"]
    return LayoutParams(rf_width=c["rf_width_um"], rf_separation=c["rf_separation_um"],
                        dc_width=c["dc_width_um"], dc_pitch=c["dc_pitch_um"],
                        dc_length=c["dc_length_um"], rf_dc_clearance=c["rf_dc_clearance_um"],
                        n_dc=c["n_dc"], gap_x=c["gap_x_um"], misalign_y=c["misalign_y_um"],
                        misalign_z=c["misalign_z_um"], zone_separation=c["zone_separation_um"],
                        loading_offset=c["loading_offset_um"], center_ground=c["center_ground"])


def drive(cfg):
    c = cfg["drive"]
    return RfDrive.from_frequency(c["frequency_hz"], amplitude=c["amplitude_v"],
                                  phase_mismatch=c["phase_mismatch_rad"],
                                  amplitude_mismatch=c["amplitude_mismatch_v"])


def ion(cfg):
    return IonSpecies(mass=cfg["ion"]["mass_amu"], charge=cfg["ion"]["charge_e"])


def trap_model(cfg):
    layout = build_two_module_layout(layout_params(cfg))
    return TrapModel(layout, drive(cfg), ion(cfg), cfg["layout"]["gap_model"])


def synthesis(cfg):
    c = cfg["synthesis"]
    return SynthesisConfig(p1=c["p1"], p2=c["p2"], voltage_bound=c["voltage_bound_v"],
                           active_electrodes=tuple(c["active_electrodes"]),
                           step_raw=c["step_raw_um"], step_transport=c["step_transport_um"],
                           sg_window=c["sg_window"], sg_order=c["sg_order"],
                           axial_frequency=c["axial_frequency_hz"], dwell_us=c["dwell_us"],
                           field_tol=c["field_tol_v_per_m"], curvature_tol=c["curvature_tol"],
                           max_iter=c["max_iter"])


def signal_chain(cfg):
    """The configured chain, or None when filtering is disabled."""
    c = cfg["signal"]
    if not c["enabled"]:
        return None
    dac = DacModel(update_rate=c["update_rate_hz"], voltage_range=c["voltage_range_v"],
                   bits=c["bits"])
    stages = tuple(FilterStage(s["kind"], float(s["cutoff_hz"])) for s in c["stages"])
    return SignalChain(dac, stages)


def integrator(cfg):
    c = cfg["integrator"]
    return IntegratorConfig(mode=c["mode"], step_us=c["step_us"], record_every=c["record_every"],
                            settle_us=c["settle_us"])


def qubit(cfg):
    c = cfg["ramsey"]
    return ClockQubit(f0=c["f0_hz"], quadratic=c["quadratic_hz_per_g2"], b0=c["b0_g"])


def noise(cfg):
    c = cfg["ramsey"]
    if c["sigma_b_g"] is not None:
        return FieldNoiseModel(sigma_b=c["sigma_b_g"], drift=c["drift_g_per_s"])
    if c["t2_ms"] is None:
        return FieldNoiseModel(drift=c["drift_g_per_s"])
    return FieldNoiseModel.calibrated(c["t2_ms"], qubit(cfg), drift=c["drift_g_per_s"])


def ramsey_sequence(cfg, tau_ms=None):
    import numpy as np
    c = cfg["ramsey"]
    n = c["phi2_points"]
    phi2 = tuple(np.linspace(0.0, 2 * np.pi, n)) if n > 0 else ()
    return RamseySequence(tau_ms=float(tau_ms if tau_ms is not None else max(c["tau_ms"])),
                          n_links=c["n_links"], link_us=c["link_us"], phi2=phi2,
                          cool_us=c["cool_us"], pump_us=c["pump_us"], f_ref=c["f_ref_hz"],
                          placement=c["placement"])


def photonic(cfg):
    c = cfg["photonic"]
    return PhotonicParams(raw_rate=c["raw_rate_per_s"],
                          conversion_efficiency=c["conversion_efficiency"],
                          switch_loss_db=c["switch_loss_db"], raw_fidelity=c["raw_fidelity"],
                          target_fidelity=c["target_fidelity"],
                          distillation_factor=c["distillation_factor"])


def matter(cfg):
    c = cfg["matter"]
    return MatterLinkParams(link_duration_us=c["link_duration_us"],
                            loss_infidelity=c["loss_infidelity"],
                            coherence_infidelity=c["coherence_infidelity"])


# -- validation ---------------------------------------------------------------------

_LAYOUT_KEYS = {"rf_width": "rf_width_um", "rf_separation": "rf_separation_um",
                "dc_width": "dc_width_um", "dc_pitch": "dc_pitch_um",
                "dc_length": "dc_length_um", "rf_dc_clearance": "rf_dc_clearance_um",
                "n_dc": "n_dc", "gap_x": "gap_x_um", "misalign_y": "misalign_y_um",
                "misalign_z": "misalign_z_um", "zone_separation": "zone_separation_um",
                "loading_offset": "loading_offset_um"}
_SYNTH_KEYS = {"p1": "p1", "p2": "p2", "voltage_bound": "voltage_bound_v",
               "step": "step_transport_um", "sg_window": "sg_window",
               "sg_order": "sg_order", "axial_frequency": "axial_frequency_hz",
               "dwell_us": "dwell_us"}


def _tag(section, message, keymap):
    for name, key in keymap.items():
        if message.startswith(name) or f"|{name}|" in message or f" {name} " in message:
            return f"{section}.{key}: {message}"
    return f"{section}: {message}"


def validate_config(cfg):
    """All invariant violations as ``section.key: message`` strings."""
    out = []
    out += [_tag("layout", m, _LAYOUT_KEYS) for m in layout_params(cfg).validate()]
    if cfg["layout"]["gap_model"] not in GAP_MODELS:
        out.append(f"layout.gap_model: must be one of {GAP_MODELS}")
    d = cfg["drive"]
    if not d["amplitude_v"] > 0:
        out.append("drive.amplitude_v: must be positive")
    if not d["frequency_hz"] > 0:
        out.append("drive.frequency_hz: must be positive")
    if not cfg["ion"]["mass_amu"] > 0:
        out.append("ion.mass_amu: must be positive")
    if cfg["ion"]["charge_e"] == 0:
        out.append("ion.charge_e: must be non-zero")
    out += [_tag("synthesis", m, _SYNTH_KEYS) for m in synthesis(cfg).validate()]
    for z in ("from_zone", "to_zone"):
        if cfg["synthesis"][z] not in ("Loading", "Zone1", "Zone2"):
            out.append(f"synthesis.{z}: unknown zone {cfg['synthesis'][z]!r}")

    s = cfg["signal"]
    if not s["update_rate_hz"] > 0:
        out.append("signal.update_rate_hz: must be positive")
    if s["bits"] is not None and (s["bits"] < 1 or s["voltage_range_v"] is None):
        out.append("signal.bits: needs bits >= 1 and a voltage_range_v")
    if s["oversample"] < 1:
        out.append("signal.oversample: must be >= 1")
    for i, st in enumerate(s["stages"]):
        if not isinstance(st, dict) or set(st) != {"kind", "cutoff_hz"}:
            out.append(f"signal.stages[{i}]: expected keys kind and cutoff_hz")
        elif st["kind"] not in STAGE_KINDS:
            out.append(f"signal.stages[{i}].kind: must be one of {STAGE_KINDS}")
        elif not (isinstance(st["cutoff_hz"], (int, float)) and st["cutoff_hz"] > 0):
            out.append(f"signal.stages[{i}].cutoff_hz: must be positive")
    if s["predistort_reg"] is not None and not s["predistort_reg"] > 0:
        out.append("signal.predistort_reg: must be positive")
    if s["enabled"] and not out:
        chain = signal_chain(cfg)
        rate = s["oversample"] * 1e6 / cfg["synthesis"]["dwell_us"]
        if rate < 50 * chain.max_cutoff:
            out.append("signal.oversample: sample rate below 50x the highest cutoff")
        if cfg["synthesis"]["dwell_us"] < 1e6 / s["update_rate_hz"] * (1 - 1e-9):
            out.append("synthesis.dwell_us: shorter than the DAC update period")

    try:
        integrator(cfg).validate(drive(cfg) if d["frequency_hz"] > 0 else None)
    except Exception as exc:
        out.append(f"integrator: {exc}")

    sw = cfg["sweep"]
    if sw["parameter"] not in SWEEP_PARAMETERS:
        out.append(f"sweep.parameter: must be one of {SWEEP_PARAMETERS}")
    if not sw["grid"]:
        out.append("sweep.grid: must not be empty")

    r = cfg["ramsey"]
    if not r["tau_ms"]:
        out.append("ramsey.tau_ms: must not be empty")
    else:
        shortest = min(r["tau_ms"])
        if r["n_links"] and r["n_links"] * r["link_us"] >= shortest * 1e3:
            out.append("ramsey.n_links: N*T_L must be shorter than every tau (N*T_L < tau)")
        if shortest <= 0:
            out.append("ramsey.tau_ms: delays must be positive")
    if r["phi2_points"] < 5:
        out.append("ramsey.phi2_points: need at least 5 phase points")
    if r["shots"] < 1:
        out.append("ramsey.shots: must be >= 1")
    if r["placement"] not in ("start", "spread"):
        out.append("ramsey.placement: must be 'start' or 'spread'")
    if r["sigma_b_g"] is not None and r["sigma_b_g"] < 0:
        out.append("ramsey.sigma_b_g: must be non-negative")
    if r["t2_ms"] is not None and not r["t2_ms"] > 0:
        out.append("ramsey.t2_ms: must be positive")
    if not 0 <= r["detection_error"] < 0.5:
        out.append("ramsey.detection_error: must lie in [0, 0.5)")
    if r["b0_g"] < 0:
        out.append("ramsey.b0_g: must be non-negative")

    out += [f"photonic: {m}" for m in photonic(cfg).validate()]
    out += [f"matter: {m}" for m in matter(cfg).validate()]
    return out
