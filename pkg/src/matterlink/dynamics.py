"""Classical ion motion through time-dependent DC wells.

Positions are in µm, times in µs and velocities in µm/µs (numerically equal
to m/s). Forces from the trap model come in J/µm, so dividing by the mass in
kg gives accelerations directly in µm/µs^2.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .constants import HBAR, joule_to_mev, mev_to_joule
from .signalchain import MIN_OVERSAMPLING, SignalChain, apply_chain, predistort, render_dac
from .trapmodel import (TrapModel, build_two_module_layout, rf_null_profile,
                        trap_depth_and_barrier)
from .trapmodel.electrostatics import rectangle_basis
from .trapmodel.kernels import trap_force
from .waveform import (TrapBasis, TransportWaveform, compile_transport, find_minimum)

log = logging.getLogger(__name__)

MODES = ("secular", "full-rf")


class DynamicsError(RuntimeError):
    pass


class NonHarmonicWellError(DynamicsError):
    pass


@dataclass(frozen=True)
class IntegratorConfig:
    mode: str = "secular"
    step_us: float = 0.02
    record_every: int = 10
    settle_us: float = 30.0  # integration time after the last update
    check_every: int = 10  # escape test interval in steps

    def validate(self, drive=None):
        if self.mode not in MODES:
            raise DynamicsError(f"unknown integrator mode {self.mode!r}")
        if not self.step_us > 0:
            raise DynamicsError("step must be positive")
        if self.record_every < 1 or self.check_every < 1:
            raise DynamicsError("record/check intervals must be >= 1")
        if self.mode == "full-rf" and drive is not None:
            limit = drive.period_us / 100
            if self.step_us > limit * (1 + 1e-12):
                raise DynamicsError(f"full-RF step {self.step_us} µs exceeds RF period/100 "
                                    f"= {limit:.3g} µs")


# -- integrator core -----------------------------------------------------------

def velocity_verlet(accel, x0, v0, t0, dt, n_steps, record_every=1, stop=None, check_every=1):
    """Second-order symplectic integration of x'' = accel(t, x).

    ``stop(t, x, v)`` is polled every ``check_every`` steps; a true return
    ends the run early. Returns (t, x, v, stopped) with the recorded samples;
    the final state is always recorded.
    """
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    a = accel(t0, x)
    ts, xs, vs = [t0], [x.copy()], [v.copy()]
    stopped = False
    t = t0
    for k in range(1, n_steps + 1):
        x = x + v * dt + 0.5 * a * dt * dt
        t = t0 + k * dt
        a_new = accel(t, x)
        v = v + 0.5 * (a + a_new) * dt
        a = a_new
        last = k == n_steps
        if stop is not None and (k % check_every == 0 or last) and stop(t, x, v):
            stopped = True
            last = True
        if k % record_every == 0 or last:
            if ts[-1] != t:
                ts.append(t)
                xs.append(x.copy())
                vs.append(v.copy())
        if stopped:
            break
    return np.array(ts), np.array(xs), np.array(vs), stopped


# -- forces --------------------------------------------------------------------

class ForceField:
    """DC superposition plus RF, with DC voltages given as a function of time.

    ``voltage_fn(t)`` returns the voltages of ``electrodes`` (all other DC
    electrodes grounded). In secular mode the RF enters through the
    pseudopotential; in full-RF mode through the instantaneous field of
    ``Re(a_k exp(i Omega t))``.
    """

    def __init__(self, model: TrapModel, electrodes, voltage_fn, mode="secular", compiled=True):
        if mode not in MODES:
            raise DynamicsError(f"unknown mode {mode!r}")
        self.model = model
        self.mode = mode
        self.voltage_fn = voltage_fn
        lay = model.layout
        idx = [lay.index(e) for e in electrodes]
        rf = [i for i, e in enumerate(lay.electrodes) if e.role == "RF"]
        self._n_dc = len(idx)
        rects = model._all_rects
        planes = model._all_planes
        self._rects = np.vstack([rects[idx], rects[rf]])
        self._planes = np.concatenate([planes[idx], planes[rf]])
        self._amp = model._rf_amp
        self._coef = model._pseudo_coef
        self._q = model.ion.charge_c
        self._m = model.ion.mass_kg
        self._omega_us = model.drive.omega * 1e-6  # rad/µs
        self.compiled = compiled
        self._out = np.empty(3)
        self._amp_re = np.ascontiguousarray(self._amp.real)
        self._amp_im = np.ascontiguousarray(self._amp.imag)

    @property
    def mass(self):
        return self._m

    def _terms(self, x, order):
        return rectangle_basis(self._rects, self._planes, x[None], order)

    def force(self, t, x):
        """Force on the ion in J/µm."""
        if not self.compiled:
            return self.force_reference(t, x)
        v = np.ascontiguousarray(self.voltage_fn(t), dtype=float)
        ph = self._omega_us * t
        trap_force(self._rects, self._planes, self._n_dc, v, self._amp_re,
                   self._amp_im, self._coef, self._q, self.mode == "secular",
                   np.cos(ph), np.sin(ph), x[0], x[1], x[2], self._out)
        return self._out.copy()

    def force_reference(self, t, x):
        """Vectorised numpy evaluation of :meth:`force`."""
        v = np.asarray(self.voltage_fn(t), dtype=float)
        n = self._n_dc
        if self.mode == "secular":
            _, grad, hess = self._terms(x, 2)
            g = self._amp @ grad[n:, 0]
            h = np.tensordot(self._amp, hess[n:, 0], axes=(0, 0))
            pseudo = 2 * self._coef * np.real(h @ np.conj(g))
            return -(self._q * (v @ grad[:n, 0]) + pseudo)
        _, grad = self._terms(x, 1)
        rf = np.real(self._amp * np.exp(1j * self._omega_us * t))
        return -self._q * (v @ grad[:n, 0] + rf @ grad[n:, 0])

    def accel(self, t, x):
        return self.force(t, x) / self._m

    def potential(self, t, x):
        """Potential energy (J) matching :meth:`force`."""
        v = np.asarray(self.voltage_fn(t), dtype=float)
        n = self._n_dc
        if self.mode == "secular":
            phi, grad = self._terms(x, 1)
            g = self._amp @ grad[n:, 0]
            return float(self._q * (v @ phi[:n, 0]) + self._coef * np.sum(np.abs(g) ** 2))
        (phi,) = self._terms(x, 0)
        rf = np.real(self._amp * np.exp(1j * self._omega_us * t))
        return float(self._q * (v @ phi[:n, 0] + rf @ phi[n:, 0]))


def total_force(model: TrapModel, voltages, point, t=0.0, mode="secular"):
    """Force (N) on the ion at ``point`` (µm) for a full voltage vector or dict."""
    v = model.voltage_vector(voltages)
    ids = model.layout.ids
    ff = ForceField(model, ids, lambda _t: v, mode)
    return ff.force(t, np.asarray(point, dtype=float)) * 1e6


# -- trajectories ----------------------------------------------------------------

@dataclass
class Trajectory:
    t: np.ndarray  # µs
    x: np.ndarray  # µm, (n, 3)
    v: np.ndarray  # µm/µs, (n, 3)
    kinetic: np.ndarray  # J
    potential: np.ndarray  # J
    escaped: bool = False
    escape_time_us: float = None
    escape_reason: str = ""

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise DynamicsError("trajectory times must increase strictly")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise DynamicsError("non-finite trajectory samples")

    @property
    def energy(self):
        return self.kinetic + self.potential


def dumps_trajectory(tr: Trajectory):
    lines = ["# matterlink trajectory v1", "t_us,x_um,y_um,z_um,vx,vy,vz"]
    for t, x, v in zip(tr.t, tr.x, tr.v):
        lines.append(",".join(repr(float(a)) for a in (t, *x, *v)))
    return "\n".join(lines) + "\n"


def loads_trajectory(text):
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")][1:]
    d = np.array([[float(a) for a in ln.split(",")] for ln in rows])
    n = len(d)
    return Trajectory(d[:, 0], d[:, 1:4], d[:, 4:7], np.zeros(n), np.zeros(n))


class EscapeMonitor:
    """Flags excursions far from the RF null or above the trap depth."""

    def __init__(self, model: TrapModel, profile, depth_j, radius_factor=3.0):
        self.model = model
        self.profile = profile
        self.depth_j = depth_j
        self.radius_factor = radius_factor
        self.reason = ""
        self.max_excursion = 0.0

    def distance(self, x):
        y0 = np.interp(x[0], self.profile.x, self.profile.y)
        z0 = np.interp(x[0], self.profile.x, self.profile.z)
        return float(np.hypot(x[1] - y0, x[2] - z0)), z0

    def __call__(self, t, x, v):
        d, h = self.distance(x)
        self.max_excursion = max(self.max_excursion, d)
        if d > self.radius_factor * h:
            self.reason = f"left null by {d:.1f} µm"
            return True
        if self.model.pseudo_energy(x[None])[0] > self.depth_j:
            self.reason = "pseudopotential energy above trap depth"
            return True
        return False


def integrate(model: TrapModel, electrodes, voltage_fn, cfg: IntegratorConfig, x0, v0,
              t_end, monitor=None, t0=0.0):
    """Integrate from ``t0`` to ``t_end`` (µs) and return a :class:`Trajectory`."""
    cfg.validate(model.drive)
    ff = ForceField(model, electrodes, voltage_fn, cfg.mode)
    n = int(np.ceil((t_end - t0) / cfg.step_us - 1e-9))
    t, x, v, stopped = velocity_verlet(ff.accel, x0, v0, t0, cfg.step_us, n, cfg.record_every,
                                       stop=monitor, check_every=cfg.check_every)
    kin = 0.5 * ff.mass * np.sum(v**2, axis=1)
    pot = np.array([ff.potential(ti, xi) for ti, xi in zip(t, x)])
    return Trajectory(t, x, v, kin, pot, escaped=stopped,
                      escape_time_us=float(t[-1]) if stopped else None,
                      escape_reason=monitor.reason if (stopped and monitor) else "")


# -- final-well analysis -------------------------------------------------------------

@dataclass
class AxialState:
    energy_j: float
    frequency_hz: float
    minimum: np.ndarray


def axial_energy(model: TrapModel, voltages, x, v, fit_half_width=5.0, max_misfit=0.05,
                 start=None):
    """Axial secular energy in the final-well frame from a quadratic fit.

    The total (DC + pseudo) energy is sampled along x through the well
    minimum over ``± fit_half_width`` µm. The minimum search starts at
    ``start`` (default: the ion position).
    """
    vfull = model.voltage_vector(voltages)
    xmin = find_minimum(model, vfull, x if start is None else start)
    if xmin is None:
        raise NonHarmonicWellError("no local minimum near the final ion position")
    s = np.linspace(-fit_half_width, fit_half_width, 21)
    pts = xmin + np.outer(s, [1.0, 0.0, 0.0])
    u = model.total_energy(vfull, pts)
    c2, c1, c0 = np.polyfit(s, u, 2)
    resid = u - np.polyval([c2, c1, c0], s)
    span = np.ptp(u)
    if c2 <= 0 or span <= 0 or np.sqrt(np.mean(resid**2)) > max_misfit * span:
        raise NonHarmonicWellError("final well is not harmonic over the fit window")
    k = 2 * c2 * 1e12  # J/m^2
    m = model.ion.mass_kg
    omega = np.sqrt(k / m)
    dx = (x[0] - xmin[0]) * 1e-6
    e = 0.5 * m * v[0] ** 2 + 0.5 * k * dx**2
    return AxialState(float(e), float(omega / (2 * np.pi)), xmin)


def motional_quanta(energy_j, frequency_hz):
    """Mean occupation n = max(0, E / (hbar omega) - 1/2)."""
    return max(0.0, energy_j / (HBAR * 2 * np.pi * frequency_hz) - 0.5)


# -- links ------------------------------------------------------------------------

@dataclass
class TransportReport:
    success: bool
    duration_us: float
    distance_um: float
    mean_speed: float  # m/s
    final_axial_energy_mev: float
    final_quanta: float
    final_axial_frequency_hz: float
    max_excursion_from_null_um: float
    end_position_um: float
    target_um: float
    reached_target: bool
    escaped: bool = False
    escape_time_us: float = None
    message: str = ""

    @property
    def link_rate(self):
        return 1e6 / self.duration_us

    def as_dict(self):
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, (bool, np.bool_)):
                v = bool(v)
            elif isinstance(v, (int, float, np.floating, np.integer)):
                v = float(v)
            out[k] = v
        return out


def staircase(w: TransportWaveform):
    """Ideal DAC output: update j is held on [j dwell, (j+1) dwell)."""
    vals = w.voltages
    n = len(w)
    dwell = w.dwell_us

    def fn(t):
        j = int(np.floor(t / dwell + 1e-9))
        return vals[min(max(j, 0), n - 1)]
    return fn


def analog_voltage_fn(w: TransportWaveform, chain: SignalChain, oversample=128):
    # long dwells need more samples per update to stay above the sampling floor
    need = MIN_OVERSAMPLING * chain.max_cutoff * w.dwell_us * 1e-6
    oversample = max(int(oversample), int(np.ceil(need * (1 + 1e-9))))
    sig = render_dac(w, chain.dac, oversample, tail_us=chain.settling_time_us())
    out = apply_chain(sig, chain)
    return out.at, out


_depth_cache = {}


def model_depth_mev(model: TrapModel):
    key = (model.layout.digest(), model.drive, model.ion, model.gap_model)
    if key not in _depth_cache:
        _depth_cache[key] = trap_depth_and_barrier(model.layout, model.drive, model.ion,
                                                   model=model).depth_mev
    return _depth_cache[key]


def initial_state(model: TrapModel, w: TransportWaveform, temperature_k=0.0, seed=None):
    """Ion at rest (or thermal) at the minimum of the first well."""
    basis = TrapBasis(model, w.electrodes)
    _, _, point = basis.constraint_rows(w.positions[0])
    xmin = find_minimum(model, basis.full_voltages(w.voltages[0]), point)
    if xmin is None:
        raise DynamicsError("first waveform sample has no bounded well")
    v0 = np.zeros(3)
    if temperature_k > 0:
        rng = np.random.default_rng(seed)
        sigma = np.sqrt(1.380649e-23 * temperature_k / model.ion.mass_kg)
        v0 = rng.normal(0.0, sigma, 3)
    return xmin, v0


def simulate_link(model: TrapModel, w: TransportWaveform, chain: SignalChain = None,
                  cfg: IntegratorConfig = None, depth_mev=None, target_tol_um=5.0,
                  oversample=128, temperature_k=0.0, seed=None, return_trajectory=False,
                  target_um=None):
    """Transport one ion along ``w`` and report success and excitation.

    ``target_um`` is the intended destination (default: the last waveform
    position); the report flags whether the final well sits there. With
    ``return_trajectory`` the recorded :class:`Trajectory` is returned
    alongside the report.
    """
    cfg = cfg or IntegratorConfig()
    if len(w) < 2:
        raise DynamicsError("a link needs at least two updates")
    if chain is None or not chain.stages:
        vfn = staircase(w)
    else:
        vfn, _ = analog_voltage_fn(w, chain, oversample)
    depth_mev = model_depth_mev(model) if depth_mev is None else depth_mev
    lo, hi = sorted((w.positions[0], w.positions[-1]))
    profile = rf_null_profile(model.layout, x_range=(lo - 60, hi + 60), n=41, model=model)
    monitor = EscapeMonitor(model, profile, mev_to_joule(depth_mev))
    x0, v0 = initial_state(model, w, temperature_k, seed)
    t_end = w.duration_us + cfg.settle_us
    traj = integrate(model, w.electrodes, vfn, cfg, x0, v0, t_end, monitor)

    target = float(w.positions[-1] if target_um is None else target_um)
    distance = abs(w.positions[-1] - w.positions[0])
    duration = w.duration_us
    common = dict(duration_us=duration, distance_um=distance, mean_speed=distance / duration,
                  max_excursion_from_null_um=monitor.max_excursion, target_um=target)
    xf, vf = traj.x[-1], traj.v[-1]
    if traj.escaped:
        rep = TransportReport(False, final_axial_energy_mev=float("nan"), final_quanta=float("nan"),
                            final_axial_frequency_hz=float("nan"), end_position_um=xf[0],
                            reached_target=False, escaped=True,
                            escape_time_us=traj.escape_time_us, message=traj.escape_reason,
                            **common)
        return (rep, traj) if return_trajectory else rep
    basis = TrapBasis(model, w.electrodes)
    vend = basis.full_voltages(vfn(traj.t[-1]))
    _, _, well = basis.constraint_rows(w.positions[-1])
    try:
        ax = axial_energy(model, vend, xf, vf, start=well)
    except NonHarmonicWellError as exc:
        rep = TransportReport(False, final_axial_energy_mev=float("nan"),
                            final_quanta=float("nan"), final_axial_frequency_hz=float("nan"),
                            end_position_um=float(xf[0]), reached_target=False,
                            message=str(exc), **common)
        return (rep, traj) if return_trajectory else rep
    # total energy above the final minimum, for the depth criterion
    e_tot = (0.5 * model.ion.mass_kg * float(vf @ vf)
             + model.total_energy(vend, xf[None])[0]
             - model.total_energy(vend, ax.minimum[None])[0])
    success = joule_to_mev(e_tot) < depth_mev
    reached = abs(ax.minimum[0] - target) < target_tol_um
    rep = TransportReport(bool(success), final_axial_energy_mev=joule_to_mev(ax.energy_j),
                           final_quanta=motional_quanta(ax.energy_j, ax.frequency_hz),
                           final_axial_frequency_hz=ax.frequency_hz, end_position_um=float(xf[0]),
                           reached_target=bool(reached), **common)
    return (rep, traj) if return_trajectory else rep


# -- tracking of the well position under a filter chain --------------------------------

def verify_tracking(basis: TrapBasis, w: TransportWaveform, chain: SignalChain = None,
                    reference: TransportWaveform = None, oversample=128):
    """Distance (µm) between the filtered well minimum and the intended one.

    The analog output of ``w`` through ``chain`` is sampled at the end of
    every dwell; the intended positions come from ``reference`` (default
    ``w`` itself, pass the original when ``w`` is a predistorted copy).
    """
    ref = reference or w
    if chain is None or not chain.stages:
        fn = staircase(w)
    else:
        fn, _ = analog_voltage_fn(w, chain, oversample)
    out = np.empty(len(w))
    for j in range(len(w)):
        t = (j + 1) * w.dwell_us - 1e-6
        _, _, point = basis.constraint_rows(ref.positions[j])
        out[j] = basis.minimum_offset(fn(t), point)
    return out


# -- RF stability helpers ---------------------------------------------------------------

def mathieu_q(model: TrapModel, point):
    """Mathieu q parameters 2 Q lambda / (m Omega^2) from the RF Hessian eigenvalues."""
    _, h = model.rf_phasor(np.atleast_2d(point), order=2)
    lam = np.linalg.eigvalsh(np.real(h[0])) * 1e12
    return 2 * model.ion.charge_c * lam / (model.ion.mass_kg * model.drive.omega**2)


def oscillation_frequency(t_us, signal, smooth_us=None):
    """Frequency (Hz) from upward zero crossings, after optional boxcar smoothing."""
    s = np.asarray(signal, dtype=float)
    if smooth_us:
        dt = t_us[1] - t_us[0]
        k = max(1, int(round(smooth_us / dt)))
        s = np.convolve(s, np.ones(k) / k, mode="valid")
        t_us = t_us[(k - 1) // 2:(k - 1) // 2 + s.size]
    s = s - s.mean()
    idx = np.flatnonzero((s[:-1] < 0) & (s[1:] >= 0))
    if idx.size < 2:
        raise DynamicsError("fewer than two zero crossings")
    tc = t_us[idx] - s[idx] * (t_us[idx + 1] - t_us[idx]) / (s[idx + 1] - s[idx])
    return float((idx.size - 1) / (tc[-1] - tc[0]) * 1e6)


# -- statistics ----------------------------------------------------------------------

@dataclass
class LossBound:
    n: int
    point: float
    exact: float
    confidence: float


def loss_upper_bound(n_successes, confidence=0.95):
    """Point bound 1/N and the zero-failure Clopper-Pearson upper limit."""
    n = int(n_successes)
    if n < 1:
        raise ValueError("need at least one success")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    exact = float(stats.beta.ppf(confidence, 1, n))
    return LossBound(n, 1.0 / n, exact, confidence)


def cumulative_distance_km(n_links, distance_um=684.0):
    return n_links * distance_um * 1e-9


# -- sweeps ----------------------------------------------------------------------------

SWEEP_PARAMETERS = ("duration", "gap_x", "misalignment", "predistortion")


@dataclass
class SweepContext:
    model: TrapModel
    waveform: TransportWaveform
    synthesis: object = None  # SynthesisConfig, needed for geometry sweeps
    chain: SignalChain = None
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    layout_params: object = None


def _geometry_case(ctx: SweepContext, **overrides):
    from .trapmodel import LayoutParams
    params = replace(ctx.layout_params or LayoutParams(), **overrides)
    layout = build_two_module_layout(params)
    model = TrapModel(layout, ctx.model.drive, ctx.model.ion, ctx.model.gap_model)
    basis = TrapBasis(model, ctx.waveform.electrodes)
    w = compile_transport(basis, ctx.waveform.positions[0], ctx.waveform.positions[-1],
                          ctx.synthesis)
    return model, w


def sweep(parameter, grid, ctx: SweepContext):
    """One :class:`TransportReport` (or an error message) per grid value."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}")
    grid = list(grid)
    if not grid:
        raise ValueError("empty sweep grid")
    rows = []
    for value in grid:
        try:
            model, w, chain = ctx.model, ctx.waveform, ctx.chain
            if parameter == "duration":
                w = w.with_dwell(float(value) / (len(w) - 1))
            elif parameter == "gap_x":
                model, w = _geometry_case(ctx, gap_x=float(value))
            elif parameter == "misalignment":
                if np.ndim(value):
                    dy, dz = float(value[0]), float(value[1])
                else:
                    dy, dz = 0.0, float(value)
                model, w = _geometry_case(ctx, misalign_y=dy, misalign_z=dz)
            elif parameter == "predistortion" and value is not None:
                if chain is None:
                    raise DynamicsError("predistortion sweep needs a signal chain")
                w = predistort(w, chain, float(value)).waveform
            rep = simulate_link(model, w, chain, ctx.integrator)
            rows.append({"parameter": parameter, "value": value, "report": rep, "error": None})
        except Exception as exc:  # recorded per row, the sweep carries on
            log.warning("sweep %s=%r failed: %s", parameter, value, exc)
            rows.append({"parameter": parameter, "value": value, "report": None,
                         "error": f"{type(exc).__name__}: {exc}"})
    return rows
