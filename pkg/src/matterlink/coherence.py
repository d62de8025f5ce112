"""Ramsey interferometry of the 171Yb+ clock qubit with transport between zones.

The accumulated phase is integrated exactly: the field seen by the ion is
piecewise linear in time (piecewise-linear spatial profile, constant-speed
links, linear drift) and the clock frequency is quadratic in the field, so
Simpson's rule on every piece is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit


class RamseyError(ValueError):
    pass


@dataclass(frozen=True)
class ClockQubit:
    f0: float = 12_642_812_118.0  # Hz
    quadratic: float = 311.0  # Hz/G^2
    b0: float = 10.177  # ambient field, G

    def frequency(self, b):
        b = np.asarray(b, dtype=float)
        return self.f0 + self.quadratic * b * b

    def slope(self, b=None):
        """df/dB in Hz/G."""
        return 2 * self.quadratic * (self.b0 if b is None else b)


def qubit_frequency(q: ClockQubit, b):
    if np.any(np.asarray(b) < 0):
        raise ValueError("field magnitude must be non-negative")
    return q.frequency(b)


@dataclass(frozen=True)
class FieldProfile:
    """Field offset (G) along the transport axis, piecewise linear in x (µm).

    Repeated knots are allowed and describe a step.
    """
    x: tuple = (-342.0, 342.0)
    offset: tuple = (0.0, 0.0)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.size < 2 or x.size != len(self.offset) or np.any(np.diff(x) < 0):
            raise RamseyError("profile needs >= 2 non-decreasing knots with matching offsets")

    @classmethod
    def step(cls, x_edge, delta_b, span=(-342.0, 342.0)):
        """Zero below ``x_edge``, ``delta_b`` above it."""
        return cls((span[0], x_edge, x_edge, span[1]), (0.0, 0.0, delta_b, delta_b))

    @classmethod
    def gradient(cls, g_per_um, span=(-342.0, 342.0), x_ref=0.0):
        return cls(tuple(span), tuple(g_per_um * (s - x_ref) for s in span))

    def covers(self, lo, hi):
        return self.x[0] <= lo + 1e-9 and self.x[-1] >= hi - 1e-9

    def segment(self, x_mid):
        """Slope and intercept of the linear piece containing ``x_mid``."""
        x = np.asarray(self.x)
        y = np.asarray(self.offset)
        i = int(np.clip(np.searchsorted(x, x_mid, side="right") - 1, 0, x.size - 2))
        while i < x.size - 2 and x[i + 1] == x[i]:
            i += 1
        dx = x[i + 1] - x[i]
        s = 0.0 if dx == 0 else (y[i + 1] - y[i]) / dx
        return s, y[i] - s * x[i]

    def __call__(self, x):
        s, c = self.segment(x)
        return s * x + c


@dataclass(frozen=True)
class FieldNoiseModel:
    sigma_b: float = 0.0  # quasi-static shot-to-shot offset, G
    drift: float = 0.0  # G/s during a shot
    profile: FieldProfile = None

    def __post_init__(self):
        if self.sigma_b < 0:
            raise RamseyError("sigma_b must be non-negative")

    @classmethod
    def calibrated(cls, t2_ms=560.0, qubit: ClockQubit = None, **kw):
        """Offset spread giving a Gaussian 1/e contrast time ``t2_ms``."""
        qubit = qubit or ClockQubit()
        sigma_f = np.sqrt(2.0) / (2 * np.pi * t2_ms * 1e-3)
        return cls(sigma_b=sigma_f / qubit.slope(), **kw)


PLACEMENTS = ("start", "spread")


@dataclass(frozen=True)
class RamseySequence:
    tau_ms: float = 5.0
    n_links: int = 0
    link_us: float = 800.0
    phi1: float = 0.0
    phi2: tuple = tuple(np.linspace(0, 2 * np.pi, 21))
    cool_us: float = 50_000.0
    pump_us: float = 10.0
    f_ref: float = None  # default: qubit frequency at the ambient field
    placement: str = "start"
    path: tuple = (-342.0, 342.0)  # Zone1 -> Zone2 positions, µm

    def validate(self):
        problems = []
        if self.tau_ms <= 0:
            problems.append("tau_ms must be positive")
        if self.n_links < 0:
            problems.append("n_links must be non-negative")
        if self.n_links and self.n_links * self.link_us >= self.tau_ms * 1e3:
            problems.append("n_links * link_us must be shorter than tau (N*T_L < tau)")
        if self.placement not in PLACEMENTS:
            problems.append(f"placement must be one of {PLACEMENTS}")
        if len(self.phi2) < 1:
            problems.append("phi2 grid is empty")
        return problems

    def check(self):
        problems = self.validate()
        if problems:
            raise RamseyError("; ".join(problems))

    @property
    def duration_ms(self):
        return (self.cool_us + self.pump_us) * 1e-3 + self.tau_ms

    def link_starts_s(self):
        tau = self.tau_ms * 1e-3
        tl = self.link_us * 1e-6
        if self.n_links == 0:
            return np.zeros(0)
        if self.placement == "start":
            return np.arange(self.n_links) * tl
        slot = tau / self.n_links
        return np.arange(self.n_links) * slot + 0.5 * (slot - tl)


def _schedule(seq: RamseySequence):
    """Breakpoints (s) and ion positions (µm) of the piecewise-linear path."""
    tau = seq.tau_ms * 1e-3
    tl = seq.link_us * 1e-6
    a, b = seq.path
    t, x = [0.0], [a]
    here = a
    for k, s in enumerate(seq.link_starts_s()):
        there = b if k % 2 == 0 else a
        t += [s, s + tl]
        x += [here, there]
        here = there
    t.append(tau)
    x.append(here)
    return np.array(t), np.array(x)


def phase_integral(q: ClockQubit, noise: FieldNoiseModel, seq: RamseySequence, delta_b=0.0):
    """2 pi * integral of (f(B(t)) - f_ref) dt over tau, in rad.

    ``delta_b`` may be an array (one quasi-static offset per shot).
    """
    prof = noise.profile or FieldProfile(tuple(seq.path), (0.0, 0.0))
    if not prof.covers(min(seq.path), max(seq.path)):
        raise RamseyError("field profile does not cover the transport path")
    # detuning = quadratic (B^2 - b0^2) + (f(b0) - f_ref), kept small to avoid
    # cancelling two ~10 GHz numbers
    ref_offset = 0.0 if seq.f_ref is None else (q.f0 - seq.f_ref) + q.quadratic * q.b0**2
    tk, xk = _schedule(seq)
    db = np.asarray(delta_b, dtype=float)
    total = np.zeros_like(db)
    knots = np.unique(prof.x)
    for t0, t1, x0, x1 in zip(tk[:-1], tk[1:], xk[:-1], xk[1:]):
        if t1 <= t0:
            continue
        cuts = [t0, t1]
        if x1 != x0:  # a link: split where the ion crosses profile knots
            lo, hi = sorted((x0, x1))
            inner = knots[(knots > lo) & (knots < hi)]
            cuts += list(t0 + (inner - x0) / (x1 - x0) * (t1 - t0))
        cuts = np.unique(cuts)
        for a, b in zip(cuts[:-1], cuts[1:]):
            xa = x0 + (x1 - x0) * (a - t0) / (t1 - t0)
            xb = x0 + (x1 - x0) * (b - t0) / (t1 - t0)
            s, c = prof.segment(0.5 * (xa + xb))
            ts = np.array([a, 0.5 * (a + b), b])
            xs = np.array([xa, 0.5 * (xa + xb), xb])
            bfield = q.b0 + (s * xs + c) + noise.drift * ts
            bb = bfield[:, None] + db.reshape(1, -1)
            f = q.quadratic * (bb - q.b0) * (bb + q.b0) + ref_offset
            total = total + ((b - a) / 6.0 * (f[0] + 4 * f[1] + f[2])).reshape(db.shape)
    return 2 * np.pi * total


def transport_phase(q: ClockQubit, profile: FieldProfile, seq: RamseySequence):
    """Extra phase (rad) from transport relative to an ion parked at the start."""
    moving = phase_integral(q, FieldNoiseModel(profile=profile), seq)
    parked = RamseySequence(tau_ms=seq.tau_ms, n_links=0, path=seq.path, f_ref=seq.f_ref)
    return float(moving - phase_integral(q, FieldNoiseModel(profile=profile), parked))


def ramsey_probability(phi2, phase, phi1=0.0, detection_error=0.0):
    p = 0.5 * (1 - np.cos(np.asarray(phi2) - phi1 - phase))
    return detection_error + (1 - 2 * detection_error) * p


@dataclass
class Fringe:
    phi2: np.ndarray
    p1: np.ndarray  # observed fraction of bright shots
    stderr: np.ndarray  # binomial standard error of p1
    sample_std: np.ndarray  # standard deviation of the single-shot outcomes
    expected: np.ndarray  # infinite-shot probability for the drawn field offsets
    shots: int
    tau_ms: float

    def rows(self):
        return np.column_stack([self.phi2, self.p1, self.stderr, self.sample_std])


def simulate_ramsey(q: ClockQubit, noise: FieldNoiseModel, seq: RamseySequence, shots=100,
                    seed=0, detection_error=0.0):
    """Fringe P(|1>) versus the second pulse phase.

    Every shot draws its own quasi-static field offset; each phase point
    uses an independent RNG stream spawned from ``seed``.
    """
    seq.check()
    if shots < 1:
        raise RamseyError("shots must be >= 1")
    phi2 = np.asarray(seq.phi2, dtype=float)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = root.spawn(phi2.size)
    p1 = np.empty(phi2.size)
    expected = np.empty(phi2.size)
    sample_std = np.empty(phi2.size)
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        db = rng.normal(0.0, noise.sigma_b, shots) if noise.sigma_b > 0 else np.zeros(shots)
        phase = phase_integral(q, noise, seq, db)
        p = ramsey_probability(phi2[i], phase, seq.phi1, detection_error)
        outcome = rng.random(shots) < p
        p1[i] = outcome.mean()
        expected[i] = p.mean()
        sample_std[i] = outcome.std(ddof=1) if shots > 1 else 0.0
    stderr = np.sqrt(p1 * (1 - p1) / shots)
    return Fringe(phi2, p1, stderr, sample_std, expected, shots, seq.tau_ms)


@dataclass
class FringeFit:
    contrast: float
    contrast_err: float
    phase: float  # rad in [0, 2 pi), nan when undefined
    phase_err: float
    offset: float
    phase_defined: bool


def fringe_fit(phi2, p, shots=None):
    """Least-squares fit of A - C/2 cos(phi2 - phase).

    Errors come from binomial variances of the fitted model when ``shots``
    is given, otherwise from the residual scatter.
    """
    phi2 = np.asarray(phi2, dtype=float)
    p = np.asarray(p, dtype=float)
    if phi2.size < 5:
        raise RamseyError("need at least 5 phase points")
    spacing = np.ptp(phi2) / (phi2.size - 1)
    if np.ptp(phi2) + spacing < 2 * np.pi - 1e-9:
        raise RamseyError("phase points must span a full period")
    X = np.column_stack([np.ones_like(phi2), np.cos(phi2), np.sin(phi2)])
    coef, *_ = np.linalg.lstsq(X, p, rcond=None)
    a, b, c = coef
    xtx_inv = np.linalg.inv(X.T @ X)
    if shots:
        model = np.clip(X @ coef, 0.0, 1.0)
        var = model * (1 - model) / shots
        cov = xtx_inv @ (X.T * var) @ X @ xtx_inv
    else:
        dof = max(phi2.size - 3, 1)
        cov = xtx_inv * float(np.sum((p - X @ coef) ** 2)) / dof
    amp = np.hypot(b, c)
    contrast = 2 * amp
    if amp < 1e-9:
        return FringeFit(0.0, float(2 * np.sqrt(max(cov[1, 1], 0.0))), float("nan"),
                         float("nan"), float(a), False)
    phase = float(np.mod(np.arctan2(-c, -b), 2 * np.pi))
    jc = np.array([0.0, b, c]) / amp * 2
    jp = np.array([0.0, c, -b]) / amp**2
    return FringeFit(float(contrast), float(np.sqrt(jc @ cov @ jc)), phase,
                     float(np.sqrt(jp @ cov @ jp)), float(a), True)


@dataclass
class CoherenceFit:
    contrast0: float
    contrast0_err: float
    t2_ms: float
    t2_err_ms: float
    decaying: bool


def gaussian_decay(tau, c0, t2):
    return c0 * np.exp(-((tau / t2) ** 2))


def t2_fit(tau_ms, contrast, err=None):
    """Gaussian fit C0 exp(-(tau/T2)^2); non-decaying data are flagged."""
    tau = np.asarray(tau_ms, dtype=float)
    c = np.asarray(contrast, dtype=float)
    if tau.size < 3:
        raise RamseyError("need at least 3 delay points")
    ok = c > 0
    slope = np.polyfit(tau[ok] ** 2, np.log(c[ok]), 1)[0] if ok.sum() >= 2 else 0.0
    if slope >= -1e-12 / max(tau.max(), 1e-300) ** 2:
        return CoherenceFit(float(c.mean()), float("nan"), float("inf"), float("nan"), False)
    t2_guess = 1 / np.sqrt(-slope)
    sigma = None if err is None else np.maximum(np.asarray(err, dtype=float), 1e-12)
    popt, pcov = curve_fit(gaussian_decay, tau, c, p0=[c.max(), t2_guess], sigma=sigma,
                           absolute_sigma=err is not None, maxfev=10000)
    perr = np.sqrt(np.clip(np.diag(pcov), 0, None))
    decaying = bool(np.isfinite(popt[1]) and popt[1] < 100 * tau.max())
    return CoherenceFit(float(popt[0]), float(perr[0]), float(abs(popt[1])), float(perr[1]),
                        decaying)


@dataclass
class DecayScan:
    tau_ms: np.ndarray
    contrast: np.ndarray
    contrast_err: np.ndarray
    fit: CoherenceFit = None
    fringes: list = field(default_factory=list)

    def rows(self):
        return np.column_stack([self.tau_ms, self.contrast, self.contrast_err])


def contrast_decay(q: ClockQubit, noise: FieldNoiseModel, taus_ms, shots=100, seed=0,
                   base: RamseySequence = None, detection_error=0.0):
    """Fringe contrast at each delay plus the Gaussian fit."""
    base = base or RamseySequence()
    seeds = np.random.SeedSequence(seed).spawn(len(taus_ms))
    cs, es, fringes = [], [], []
    for tau, ss in zip(taus_ms, seeds):
        seq = RamseySequence(tau_ms=float(tau), n_links=base.n_links, link_us=base.link_us,
                             phi1=base.phi1, phi2=base.phi2, cool_us=base.cool_us,
                             pump_us=base.pump_us, f_ref=base.f_ref, placement=base.placement,
                             path=base.path)
        fr = simulate_ramsey(q, noise, seq, shots, ss, detection_error)
        ff = fringe_fit(fr.phi2, fr.p1, shots)
        cs.append(ff.contrast)
        es.append(ff.contrast_err)
        fringes.append(fr)
    taus = np.asarray(taus_ms, dtype=float)
    scan = DecayScan(taus, np.array(cs), np.array(es), fringes=fringes)
    scan.fit = t2_fit(taus, scan.contrast)
    return scan
