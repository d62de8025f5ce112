"""Transport waveform synthesis.

Each position along the path gets a voltage set that minimises the summed
squared electrode voltages while two penalty terms pull the electric field
at the ion to zero and the axial curvature to its target:

    min_V  |V|^2 + p1 |E(x0)|^2 + p2 (d2phi/dx2 (x0) - kappa)^2

Both constraints are linear in V at fixed x0, so the problem is a stacked
linear least-squares system. Voltage bounds are enforced with an
active-set solver that can be warm-started from the neighbouring position.
The raw solutions are smoothed with a Savitzky-Golay filter and
down-sampled to the transport pitch.
"""
from __future__ import annotations

import hashlib
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .constants import PER_UM, PER_UM2
from .lsq import bounded_lstsq
from .savgol import savgol_smooth
from .trapmodel import NoMinimumError, TrapModel, frequencies_from_hessian

import logging
logger = logging.getLogger(__name__)

DEFAULT_LINK_DURATION_US = 412.5
DEFAULT_TRANSPORT_UPDATES = 58


class SynthesisError(RuntimeError):
    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at x = {position:g} µm)")
        self.position = position


class InfeasibleBoundsError(SynthesisError):
    pass


def curvature_for_frequency(freq_hz, ion):
    """Axial potential curvature (V/m^2) giving secular frequency ``freq_hz``."""
    return ion.mass_kg * (2 * np.pi * freq_hz) ** 2 / ion.charge_c


@dataclass(frozen=True)
class WellTarget:
    position: float  # µm
    axial_curvature: float  # V/m^2
    field_zero: bool = True

    def __post_init__(self):
        if not self.axial_curvature > 0:
            raise ValueError("axial curvature must be positive")


@dataclass(frozen=True)
class SynthesisConfig:
    p1: float = 1e6
    p2: float = 1e4
    voltage_bound: float = 10.0  # ± V
    active_electrodes: tuple = ()  # empty: electrode pairs 1-8
    step_raw: float = 2.0  # µm
    step_transport: float = 12.0  # µm
    sg_window: int = 25
    sg_order: int = 2
    axial_frequency: float = 141e3  # Hz
    dwell_us: float = DEFAULT_LINK_DURATION_US / (DEFAULT_TRANSPORT_UPDATES - 1)
    field_tol: float = 1.0  # V/m
    curvature_tol: float = 1e-3  # relative
    max_iter: int = 200

    def validate(self):
        problems = []
        if not (self.p1 > 0 and self.p2 > 0):
            problems.append("p1 and p2 must be positive")
        if not self.voltage_bound > 0:
            problems.append("voltage_bound must be positive")
        if not (self.step_raw > 0 and self.step_transport > 0):
            problems.append("step sizes must be positive")
        else:
            ratio = self.step_transport / self.step_raw
            if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                problems.append("step_transport must be an integer multiple of step_raw")
        if self.sg_window % 2 != 1:
            problems.append("sg_window must be odd")
        if self.sg_window <= self.sg_order:
            problems.append("sg_window must exceed sg_order")
        if not self.axial_frequency > 0:
            problems.append("axial_frequency must be positive")
        if not self.dwell_us > 0:
            problems.append("dwell_us must be positive")
        return problems

    @property
    def downsample_factor(self):
        return int(round(self.step_transport / self.step_raw))

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class VoltageSolution:
    position: float
    voltages: np.ndarray
    field_residual: float  # V/m
    curvature_error: float  # relative
    minimum_offset: float  # µm
    converged: bool
    point: np.ndarray = None  # ion position used for the constraints


class TrapBasis:
    """Constraint rows of the active electrodes, evaluated at the RF null."""

    def __init__(self, model: TrapModel, active=None):
        self.model = model
        self.active = list(active) if active else model.layout.default_active()
        self._null_cache = {}

    @property
    def ion(self):
        return self.model.ion

    def null(self, x, guess=None):
        key = round(float(x), 9)
        if key not in self._null_cache:
            self._null_cache[key] = self.model.null_point(x, guess or (0.0, 120.0))
        return self._null_cache[key]

    def constraint_rows(self, x, guess=None):
        """Field rows (3, k) in V/m per volt and curvature row (k,) in V/m^2 per volt."""
        y, z = self.null(x, guess)
        point = np.array([x, y, z])
        _, grad, hess = self.model.basis(point[None], self.active, order=2)
        return grad[:, 0, :].T * PER_UM, hess[:, 0, 0, 0] * PER_UM2, point

    def full_voltages(self, active_voltages):
        v = np.zeros(len(self.model.layout.electrodes))
        idx = [self.model.layout.index(i) for i in self.active]
        v[idx] = active_voltages
        return v

    def minimum_offset(self, active_voltages, point):
        v = self.full_voltages(active_voltages)
        h = self.model.total_hessian(v, point)
        g = self.model.total_gradient(v, point[None])[0]
        try:
            return float(np.linalg.norm(np.linalg.solve(h, g)))
        except np.linalg.LinAlgError:
            return float("inf")


def solve_well(basis, target: WellTarget, cfg: SynthesisConfig, warm_start=None, null_guess=None):
    """Minimum-norm voltage set realising a well at ``target.position``."""
    field_rows, curv_row, point = basis.constraint_rows(target.position, null_guess)
    k = curv_row.size
    rows = [np.eye(k)]
    rhs = [np.zeros(k)]
    if target.field_zero:
        rows.append(np.sqrt(cfg.p1) * field_rows)
        rhs.append(np.zeros(field_rows.shape[0]))
    rows.append(np.sqrt(cfg.p2) * curv_row[None, :])
    rhs.append(np.array([np.sqrt(cfg.p2) * target.axial_curvature]))
    A, b = np.vstack(rows), np.concatenate(rhs)

    bound = cfg.voltage_bound
    res = bounded_lstsq(A, b, -bound, bound, x0=warm_start, max_iter=cfg.max_iter)
    v = res.x
    field_res = float(np.linalg.norm(field_rows @ v))
    curv_err = float(abs(curv_row @ v - target.axial_curvature) / target.axial_curvature)
    ok = res.converged and curv_err < cfg.curvature_tol and (
        field_res < cfg.field_tol or not target.field_zero)
    if res.converged and not ok and np.any(res.at_bound != 0):
        raise InfeasibleBoundsError(
            f"constraints unreachable within ±{bound:g} V "
            f"(field {field_res:.3g} V/m, curvature error {curv_err:.3g})", target.position)
    offset = basis.minimum_offset(v, point) if hasattr(basis, "minimum_offset") else 0.0
    if not ok:
        logger.warning("unconverged well at x = %g µm", target.position)
    return VoltageSolution(target.position, v, field_res, curv_err, offset, bool(ok), point)


@dataclass
class TransportWaveform:
    positions: np.ndarray  # µm, (n,)
    voltages: np.ndarray  # V, (n, k)
    electrodes: list
    dwell_us: float
    converged: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.voltages = np.atleast_2d(np.asarray(self.voltages, dtype=float))
        if self.voltages.shape != (self.positions.size, len(self.electrodes)):
            raise ValueError("voltage table does not match positions × electrodes")
        if not self.dwell_us > 0:
            raise ValueError(f"dwell must be positive, got {self.dwell_us}")
        if self.converged is None:
            self.converged = np.ones(self.positions.size, dtype=bool)

    def __len__(self):
        return self.positions.size

    @property
    def pitch(self):
        if len(self) < 2:
            return 0.0
        return float(self.positions[1] - self.positions[0])

    @property
    def is_uniform(self):
        d = np.diff(self.positions)
        return d.size == 0 or np.allclose(d, d[0], rtol=0, atol=1e-9)

    @property
    def duration_us(self):
        return (len(self) - 1) * self.dwell_us

    @property
    def velocity(self):
        """Mean well velocity in µm/µs (= m/s)."""
        if len(self) < 2:
            return 0.0
        return float((self.positions[-1] - self.positions[0]) / self.duration_us)

    def reversed(self):
        return TransportWaveform(self.positions[::-1].copy(), self.voltages[::-1].copy(),
                                 list(self.electrodes), self.dwell_us,
                                 self.converged[::-1].copy(), dict(self.metadata))

    def with_dwell(self, dwell_us):
        return TransportWaveform(self.positions.copy(), self.voltages.copy(), list(self.electrodes),
                                 float(dwell_us), self.converged.copy(), dict(self.metadata))

    def truncated(self, n):
        return TransportWaveform(self.positions[:n].copy(), self.voltages[:n].copy(),
                                 list(self.electrodes), self.dwell_us, self.converged[:n].copy(),
                                 dict(self.metadata))

    def full_voltages(self, layout):
        """(n, n_electrodes) table aligned with ``layout.electrodes``."""
        out = np.zeros((len(self), len(layout.electrodes)))
        idx = [layout.index(i) for i in self.electrodes]
        out[:, idx] = self.voltages
        return out


def synthesize_raw(basis, start, stop, cfg: SynthesisConfig, warm_start=True, workers=None):
    """Solve wells every ``cfg.step_raw`` µm from ``start`` to ``stop`` inclusive."""
    span = stop - start
    n_steps = span / cfg.step_raw if span else 0.0
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise SynthesisError("path length is not a multiple of step_raw")
    n = int(round(abs(n_steps))) + 1
    positions = start + np.sign(span) * cfg.step_raw * np.arange(n)
    kappa = curvature_for_frequency(cfg.axial_frequency, basis.ion)

    def one(x, v0=None, guess=None):
        try:
            return solve_well(basis, WellTarget(float(x), kappa), cfg, warm_start=v0,
                              null_guess=guess)
        except (SynthesisError, NoMinimumError) as exc:
            if isinstance(exc, SynthesisError) and exc.position is not None:
                raise
            raise SynthesisError(str(exc), float(x)) from exc

    if warm_start:
        sols = []
        v0 = guess = None
        for x in positions:
            s = one(x, v0, guess)
            sols.append(s)
            v0, guess = s.voltages, (s.point[1], s.point[2])
    else:
        with ThreadPoolExecutor(max_workers=workers or 1) as pool:
            sols = list(pool.map(one, positions))

    dwell = cfg.dwell_us * cfg.step_raw / cfg.step_transport
    meta = {"config_hash": cfg.digest(), "stage": "raw"}
    if hasattr(basis, "model"):
        meta["layout_hash"] = basis.model.layout.digest()
    wf = TransportWaveform(positions, np.array([s.voltages for s in sols]), list(basis.active),
                           dwell, np.array([s.converged for s in sols]), meta)
    wf.solutions = sols
    return wf


def smooth(w: TransportWaveform, cfg: SynthesisConfig):
    if len(w) < cfg.sg_window:
        raise SynthesisError(f"waveform has {len(w)} solutions, fewer than the "
                             f"{cfg.sg_window}-sample smoothing window")
    v = savgol_smooth(w.voltages, cfg.sg_window, cfg.sg_order)
    meta = dict(w.metadata, stage="smoothed")
    return TransportWaveform(w.positions.copy(), v, list(w.electrodes), w.dwell_us,
                             w.converged.copy(), meta)


def downsample(w: TransportWaveform, cfg: SynthesisConfig):
    """Keep every (step_transport / step_raw)-th solution plus the endpoint."""
    if len(w) > 1 and abs(abs(w.pitch) - cfg.step_raw) > 1e-9:
        raise SynthesisError(f"waveform pitch {abs(w.pitch):g} µm does not match "
                             f"step_raw {cfg.step_raw:g} µm")
    ratio = cfg.step_transport / cfg.step_raw
    if abs(ratio - round(ratio)) > 1e-9:
        raise SynthesisError("step_transport must be an integer multiple of step_raw")
    f = int(round(ratio))
    idx = list(range(0, len(w), f))
    if idx[-1] != len(w) - 1:
        idx.append(len(w) - 1)
    meta = dict(w.metadata, stage="transport")
    out = TransportWaveform(w.positions[idx], w.voltages[idx], list(w.electrodes),
                            w.dwell_us * f, w.converged[idx], meta)
    if not out.is_uniform:
        out.metadata["final_pitch_um"] = float(out.positions[-1] - out.positions[-2])
    return out


def compile_transport(basis, start, stop, cfg: SynthesisConfig):
    """Raw synthesis, smoothing and down-sampling in one call."""
    raw = synthesize_raw(basis, start, stop, cfg)
    smoothed = smooth(raw, cfg) if len(raw) >= cfg.sg_window else raw
    out = downsample(smoothed, cfg)
    out.dwell_us = cfg.dwell_us
    return out


# -- verification -----------------------------------------------------------

@dataclass
class WaveformDiagnostics:
    intended: np.ndarray
    actual: np.ndarray  # NaN where no bounded minimum was found
    axial_frequency: np.ndarray  # Hz
    field_residual: np.ndarray  # V/m

    @property
    def offset(self):
        return self.actual - self.intended

    @property
    def bounded(self):
        return np.isfinite(self.actual)

    @property
    def max_offset(self):
        return float(np.nanmax(np.abs(self.offset))) if self.bounded.any() else float("nan")

    @property
    def mean_offset(self):
        return float(np.nanmean(np.abs(self.offset))) if self.bounded.any() else float("nan")

    def frequency_drift(self, target):
        f = self.axial_frequency[self.bounded]
        return float((f.max() - f.min()) / target) if f.size else float("nan")

    def rows(self):
        return np.column_stack([self.intended, self.actual, self.offset,
                                self.axial_frequency, self.field_residual])


def find_minimum(model, voltages, start, window=30.0, max_iter=50, tol=1e-7):
    """Newton search for a local minimum of the total potential energy.

    Returns the minimum (µm) or None when the Hessian is not positive
    definite or the iterate leaves a ``window`` µm box around ``start``.
    """
    p = np.asarray(start, dtype=float).copy()
    for _ in range(max_iter):
        h = model.total_hessian(voltages, p)
        g = model.total_gradient(voltages, p[None])[0]
        lam = np.linalg.eigvalsh(h)
        if lam[0] <= 1e-6 * abs(lam[-1]):
            return None
        step = np.linalg.solve(h, g)
        # cap the step so the iterate cannot jump out of the local basin
        norm = np.linalg.norm(step)
        if norm > 5.0:
            step *= 5.0 / norm
        p = p - step
        if np.linalg.norm(p - start) > window:
            return None
        if norm < tol:
            return p
    return None


def verify_waveform(basis, w: TransportWaveform):
    model = basis.model
    v_full = w.full_voltages(model.layout)
    actual = np.full(len(w), np.nan)
    freq = np.full(len(w), np.nan)
    fres = np.empty(len(w))
    for i, x in enumerate(w.positions):
        y, z = basis.null(x)
        p0 = np.array([x, y, z])
        _, g = model.dc(v_full[i], p0[None], order=1)
        fres[i] = np.linalg.norm(g[0]) * PER_UM
        pmin = find_minimum(model, v_full[i], p0)
        if pmin is None:
            continue
        sec = frequencies_from_hessian(model.total_hessian(v_full[i], pmin) * PER_UM2,
                                       model.ion.mass_kg)
        if sec.axial <= 0:
            continue
        actual[i] = pmin[0]
        freq[i] = sec.axial
    return WaveformDiagnostics(w.positions.copy(), actual, freq, fres)


# -- file format ------------------------------------------------------------

_MAGIC = "# matterlink waveform v1"


def dumps_waveform(w: TransportWaveform):
    buf = io.StringIO()
    buf.write(_MAGIC + "\n")
    for key in sorted(w.metadata):
        buf.write(f"# {key}: {json.dumps(w.metadata[key])}\n")
    buf.write(",".join(["position_um", "dwell_us"] + list(w.electrodes)) + "\n")
    for x, row in zip(w.positions, w.voltages):
        buf.write(",".join([repr(float(x)), repr(float(w.dwell_us))]
                           + [repr(float(v)) for v in row]) + "\n")
    return buf.getvalue()


def loads_waveform(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise ValueError("not a matterlink waveform file")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, _, val = lines[i][1:].partition(":")
        meta[key.strip()] = json.loads(val)
        i += 1
    header = lines[i].split(",")
    if header[:2] != ["position_um", "dwell_us"]:
        raise ValueError("waveform header must start with position_um,dwell_us")
    data = np.array([[float(t) for t in ln.split(",")] for ln in lines[i + 1:] if ln.strip()])
    data = data.reshape(-1, len(header))
    dwell = np.unique(data[:, 1])
    if dwell.size > 1:
        raise ValueError("non-uniform dwell in waveform file")
    return TransportWaveform(data[:, 0], data[:, 2:], header[2:], float(dwell[0]), metadata=meta)


def config_from_dict(d):
    known = {f.name for f in fields(SynthesisConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown synthesis parameters: {sorted(unknown)}")
    d = dict(d)
    if "active_electrodes" in d:
        d["active_electrodes"] = tuple(d["active_electrodes"])
    return SynthesisConfig(**d)
