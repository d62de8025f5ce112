"""DAC zero-order hold and the low-pass filter chain between DAC and trap.

Filter stages are continuous-time LTI systems. The time-domain path
discretises the whole cascade exactly for the input's hold type
(zero-order hold for DAC staircases, first-order hold for generic sampled
signals), so staircases are propagated without discretisation error.
Times are in µs, frequencies in Hz.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .lsq import bounded_lstsq
from .waveform import TransportWaveform

MIN_OVERSAMPLING = 50  # samples per period of the highest cutoff


class SignalError(ValueError):
    pass


@dataclass(frozen=True)
class DacModel:
    update_rate: float = 139e3  # Hz
    voltage_range: float = None  # ± V, None for ideal
    bits: int = None

    def __post_init__(self):
        if not self.update_rate > 0:
            raise SignalError("DAC update rate must be positive")
        if self.bits is not None and self.voltage_range is None:
            raise SignalError("quantisation needs a voltage range")

    @property
    def period_us(self):
        return 1e6 / self.update_rate

    def quantize(self, v):
        v = np.asarray(v, dtype=float)
        if self.voltage_range is not None:
            v = np.clip(v, -self.voltage_range, self.voltage_range)
        if self.bits is None:
            return v
        r = self.voltage_range
        lsb = 2 * r / (2**self.bits - 1)
        return np.round((v + r) / lsb) * lsb - r


STAGE_KINDS = ("butterworth3", "rc2", "rc1")


@dataclass(frozen=True)
class FilterStage:
    kind: str
    cutoff: float  # Hz, overall -3 dB point of the stage

    def __post_init__(self):
        if self.kind not in STAGE_KINDS:
            raise SignalError(f"unknown filter kind {self.kind!r}")
        if not self.cutoff > 0:
            raise SignalError("cutoff must be positive")

    @property
    def section_cutoff(self):
        """Pole frequency of each RC section (Hz)."""
        if self.kind == "rc2":
            # two identical buffered sections: |H|^2 = 1/2 at the stage cutoff
            return self.cutoff / np.sqrt(np.sqrt(2.0) - 1.0)
        return self.cutoff

    def transfer(self, f):
        p = 1j * np.asarray(f, dtype=float) / self.section_cutoff
        if self.kind == "butterworth3":
            return 1.0 / (p**3 + 2 * p**2 + 2 * p + 1)
        if self.kind == "rc2":
            return 1.0 / (1 + p) ** 2
        return 1.0 / (1 + p)

    def state_space(self):
        """(A, B, C, D) with time in µs."""
        w = 2 * np.pi * self.section_cutoff * 1e-6
        if self.kind == "butterworth3":
            # controllable canonical form of w^3 / (s^3 + 2w s^2 + 2w^2 s + w^3)
            A = np.array([[0, 1, 0], [0, 0, 1], [-w**3, -2 * w**2, -2 * w]], dtype=float)
            B = np.array([[0.0], [0.0], [w**3]])
            C = np.array([[1.0, 0.0, 0.0]])
        elif self.kind == "rc2":
            A = np.array([[-w, 0.0], [w, -w]])
            B = np.array([[w], [0.0]])
            C = np.array([[0.0, 1.0]])
        else:
            A = np.array([[-w]])
            B = np.array([[w]])
            C = np.array([[1.0]])
        return A, B, C, np.zeros((1, 1))

    @property
    def time_constant_us(self):
        A = self.state_space()[0]
        return float(1.0 / np.min(np.abs(np.linalg.eigvals(A).real)))


def default_stages():
    return (FilterStage("butterworth3", 75e3), FilterStage("rc2", 47e3),
            FilterStage("rc1", 257e3))


@dataclass(frozen=True)
class SignalChain:
    dac: DacModel = field(default_factory=DacModel)
    stages: tuple = field(default_factory=default_stages)

    @property
    def max_cutoff(self):
        return max((s.cutoff for s in self.stages), default=0.0)

    def transfer(self, f):
        h = np.ones_like(np.asarray(f, dtype=float), dtype=complex)
        for s in self.stages:
            h = h * s.transfer(f)
        return h

    def state_space(self):
        """Series connection of all stages (DAC side first)."""
        A = np.zeros((0, 0))
        B = np.zeros((0, 1))
        C = np.zeros((1, 0))
        D = np.eye(1)
        for s in self.stages:
            a, b, c, d = s.state_space()
            n1, n2 = A.shape[0], a.shape[0]
            A = np.block([[A, np.zeros((n1, n2))], [b @ C, a]])
            B = np.vstack([B, b @ D])
            C = np.hstack([d @ C, c])
            D = d @ D
        return A, B, C, D

    def settling_time_us(self, factor=5.0):
        return factor * max((s.time_constant_us for s in self.stages), default=0.0)


@dataclass
class AnalogWaveform:
    t: np.ndarray  # µs
    volts: np.ndarray  # (n, k)
    electrodes: list
    hold: str = "foh"  # how samples are joined: 'zoh' staircase or 'foh' linear
    dwell_us: float = None  # set when rendered from a transport waveform
    n_updates: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.volts = np.asarray(self.volts, dtype=float)
        if self.volts.ndim == 1:
            self.volts = self.volts[:, None]
        if self.volts.shape[0] != self.t.size:
            raise SignalError("time base and samples differ in length")
        d = np.diff(self.t)
        if d.size and not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise SignalError("analog waveforms must be uniformly sampled")

    @property
    def dt(self):
        return float(self.t[1] - self.t[0])

    @property
    def sample_rate(self):
        return 1e6 / self.dt

    @property
    def duration_us(self):
        return float(self.t[-1] - self.t[0])

    @property
    def staircase_duration_us(self):
        """Time from the first to the last DAC update."""
        if self.dwell_us is None:
            return self.duration_us
        return (self.n_updates - 1) * self.dwell_us

    def at(self, t):
        """Sample the waveform at time ``t`` (µs), clamped to its span."""
        s = (t - self.t[0]) / self.dt
        if s <= 0:
            return self.volts[0]
        n = self.t.size - 1
        if s >= n:
            return self.volts[-1]
        i = int(s)
        if self.hold == "zoh":
            return self.volts[i]
        f = s - i
        return (1 - f) * self.volts[i] + f * self.volts[i + 1]


def render_dac(w: TransportWaveform, dac: DacModel = None, oversample=128, fastest=False,
               tail_us=None):
    """Zero-order-hold staircase of a transport waveform.

    Update ``j`` is applied at ``t = j * dwell``; the last value is held for
    a settling tail (default: five of the longest default-chain time
    constants).
    """
    dac = dac or DacModel()
    dwell = dac.period_us if fastest else w.dwell_us
    if dwell < dac.period_us * (1 - 1e-9):
        raise SignalError(f"dwell {dwell:.4g} µs is shorter than the DAC period "
                          f"{dac.period_us:.4g} µs")
    if tail_us is None:
        tail_us = SignalChain().settling_time_us()
    dt = dwell / oversample
    n_tail = int(np.ceil(tail_us / dt))
    held = np.repeat(dac.quantize(w.voltages), oversample, axis=0)
    tail = np.repeat(held[-1:], n_tail + 1, axis=0)
    volts = np.vstack([held, tail])
    t = np.arange(volts.shape[0]) * dt
    return AnalogWaveform(t, volts, list(w.electrodes), hold="zoh", dwell_us=dwell,
                          n_updates=len(w))


def dumps_analog(sig: AnalogWaveform):
    lines = [f"# matterlink analog v1 hold={sig.hold}",
             ",".join(["time_us"] + list(sig.electrodes))]
    for t, row in zip(sig.t, sig.volts):
        lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
    return "\n".join(lines) + "\n"


def loads_analog(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines[0].startswith("# matterlink analog v1"):
        raise SignalError("not an analog waveform file")
    hold = lines[0].split("hold=")[1].strip()
    header = lines[1].split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    return AnalogWaveform(data[:, 0], data[:, 1:], header[1:], hold=hold)


def _discretise(A, B, dt, hold):
    n = A.shape[0]
    if hold == "zoh":
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = A * dt
        M[:n, n:] = B * dt
        E = expm(M)
        return E[:n, :n], E[:n, n:], np.zeros((n, 1))
    M = np.zeros((n + 2, n + 2))
    M[:n, :n] = A * dt
    M[:n, n:n + 1] = B * dt
    M[n, n + 1] = 1.0
    E = expm(M)
    return E[:n, :n], E[:n, n:n + 1], E[:n, n + 1:n + 2]


def simulate_lti(A, B, C, D, u, dt, hold="zoh"):
    """Exact response of a SISO system to sampled inputs (columns of ``u``).

    The system starts in the steady state of the first input sample.
    """
    u = np.asarray(u, dtype=float)
    squeeze = u.ndim == 1
    u = u[:, None] if squeeze else u
    if A.shape[0] == 0:
        y = D[0, 0] * u
        return y[:, 0] if squeeze else y
    Phi, G0, G1 = _discretise(A, B, dt, hold)
    x = -np.linalg.solve(A, B) @ u[:1]  # steady state, (n, k)
    y = np.empty_like(u)
    c = C[0]
    for k in range(u.shape[0]):
        y[k] = c @ x + D[0, 0] * u[k]
        if k + 1 < u.shape[0]:
            x = Phi @ x + G0 @ u[k:k + 1] + G1 @ (u[k + 1:k + 2] - u[k:k + 1])
    return y[:, 0] if squeeze else y


def apply_chain(sig: AnalogWaveform, chain: SignalChain):
    if chain.stages and sig.sample_rate < MIN_OVERSAMPLING * chain.max_cutoff * (1 - 1e-12):
        raise SignalError(f"sample rate {sig.sample_rate:.4g} Hz is below "
                          f"{MIN_OVERSAMPLING} × the highest cutoff")
    A, B, C, D = chain.state_space()
    y = simulate_lti(A, B, C, D, sig.volts, sig.dt, sig.hold)
    return AnalogWaveform(sig.t.copy(), y, list(sig.electrodes), hold="foh",
                          dwell_us=sig.dwell_us, n_updates=sig.n_updates)


def chain_response(chain: SignalChain, freqs):
    """Table of (frequency Hz, magnitude, phase rad) from the transfer function."""
    f = np.asarray(freqs, dtype=float)
    if np.any(f <= 0):
        raise SignalError("frequencies must be positive")
    h = chain.transfer(f)
    return np.column_stack([f, np.abs(h), np.unwrap(np.angle(h))])


def step_response(chain: SignalChain, dt, n):
    A, B, C, D = chain.state_space()
    u = np.ones(n)
    u[0] = 0.0
    return simulate_lti(A, B, C, D, u, dt, "zoh")


def response_matrix(chain: SignalChain, n_updates, oversample, dwell_us, n_tail):
    """Dense chain output per unit held DAC value, shape (samples, n_updates).

    Update 0 is taken as held since t = -inf (the chain starts settled) and
    the last update is held to the end of the record.
    """
    dt = dwell_us / oversample
    n = n_updates * oversample + n_tail + 1
    s = step_response(chain, dt, n + 1)[1:]  # s[i]: response i samples after a step
    G = np.zeros((n, n_updates))
    idx = np.arange(n)
    for j in range(n_updates):
        on = np.where(idx >= j * oversample, s[np.clip(idx - j * oversample, 0, n - 1)], 0.0)
        if j == 0:
            on = np.ones(n)
        if j + 1 < n_updates:
            k = (j + 1) * oversample
            off = np.where(idx >= k, s[np.clip(idx - k, 0, n - 1)], 0.0)
        else:
            off = 0.0
        G[:, j] = on - off
    return G


@dataclass
class PredistortResult:
    waveform: TransportWaveform
    feasible: bool
    tracking_error: float  # RMS over the tracked samples, V


def predistort(w: TransportWaveform, chain: SignalChain, reg=1e-3, oversample=128,
               tail_us=None):
    """Regularised inverse of the filter chain for a transport waveform.

    Chooses DAC values ``u`` so the filtered output at the end of every
    dwell (and through the settling tail) matches the intended voltage
    set, while ``reg`` penalises changes of the correction ``u - w`` from one
    update to the next (the correction is zero before the first update).
    """
    if not reg > 0:
        raise SignalError("reg must be positive")
    n = len(w)
    tail_us = chain.settling_time_us() if tail_us is None else tail_us
    dt = w.dwell_us / oversample
    n_tail = int(np.ceil(tail_us / dt))
    G = response_matrix(chain, n, oversample, w.dwell_us, n_tail)
    rows = tracked_samples(n, oversample, n_tail)
    Gt = G[rows]
    target = target_values(w.voltages, oversample, n_tail)[rows]

    D = np.eye(n) - np.eye(n, k=-1)
    wt = 1.0 / np.sqrt(len(rows))
    wr = np.sqrt(reg / n)
    A = np.vstack([wt * Gt, wr * D])
    out = np.empty_like(w.voltages)
    feasible = True
    bound = chain.dac.voltage_range
    for e in range(w.voltages.shape[1]):
        ref = w.voltages[:, e]
        b = np.concatenate([wt * target[:, e], wr * (D @ ref)])
        if bound is None:
            out[:, e] = np.linalg.lstsq(A, b, rcond=None)[0]
        else:
            res = bounded_lstsq(A, b, -bound, bound, x0=np.clip(ref, -bound, bound))
            out[:, e] = res.x
            feasible &= not np.any(res.at_bound != 0)
    err = float(np.sqrt(np.mean((Gt @ out - target) ** 2)))
    meta = dict(w.metadata, predistort_reg=reg)
    pw = TransportWaveform(w.positions.copy(), out, list(w.electrodes), w.dwell_us,
                           w.converged.copy(), meta)
    return PredistortResult(pw, bool(feasible), err)


def tracked_samples(n_updates, oversample, n_tail):
    """Indices of the last sample of every dwell plus the settling tail."""
    ends = (np.arange(1, n_updates) * oversample) - 1
    tail = np.arange(n_updates * oversample - 1, n_updates * oversample + n_tail + 1)
    return np.concatenate([ends, tail])


def target_values(voltages, oversample, n_tail):
    held = np.repeat(voltages, oversample, axis=0)
    return np.vstack([held, np.repeat(held[-1:], n_tail + 1, axis=0)])
