import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from matterlink.dynamics import verify_tracking
from matterlink.signalchain import (
    AnalogWaveform,
    DacModel,
    FilterStage,
    SignalChain,
    SignalError,
    apply_chain,
    chain_response,
    dumps_analog,
    loads_analog,
    predistort,
    render_dac,
    step_response,
)
from matterlink.waveform import TransportWaveform

BW3 = SignalChain(stages=(FilterStage("butterworth3", 75e3),))


def ramp_waveform(n=20, dwell=None, k=1):
    dwell = dwell or DacModel().period_us
    v = np.column_stack([np.linspace(-1, 1, n) * (i + 1) for i in range(k)])
    return TransportWaveform(np.arange(n) * 12.0, v, [f"e{i}" for i in range(k)], dwell)


def tone(f_hz, dt_us, n):
    t = np.arange(n) * dt_us
    return AnalogWaveform(t, np.sin(2 * np.pi * f_hz * t * 1e-6)[:, None], ["e"], hold="foh")


def oracle_tf(chain):
    """Cascade numerator/denominator in s (rad/s) built from scipy's analog prototypes."""
    num, den = np.array([1.0]), np.array([1.0])
    for s in chain.stages:
        if s.kind == "butterworth3":
            b, a = sps.butter(3, 2 * np.pi * s.cutoff, analog=True)
        else:
            # -3 dB at the cutoff for n identical first-order sections
            n = 2 if s.kind == "rc2" else 1
            wc = 2 * np.pi * s.cutoff / np.sqrt(2 ** (1 / n) - 1)
            b, a = np.array([wc**n]), np.poly(np.full(n, -wc))
        num, den = np.polymul(num, b), np.polymul(den, a)
    return num, den


# -- DAC ------------------------------------------------------------------------------------

def test_dac_defaults_and_validation():
    dac = DacModel()
    assert dac.update_rate == 139e3
    assert dac.period_us == pytest.approx(1e6 / 139e3)
    with pytest.raises(SignalError):
        DacModel(update_rate=0.0)
    with pytest.raises(SignalError):
        DacModel(bits=12)


def test_one_bit_quantisation_gives_two_levels():
    dac = DacModel(voltage_range=1.0, bits=1)
    sig = render_dac(ramp_waveform(40), dac, oversample=4)
    assert set(np.unique(sig.volts)) == {-1.0, 1.0}


def test_quantiser_step_size():
    dac = DacModel(voltage_range=10.0, bits=16)
    v = np.linspace(-10, 10, 1001)
    q = dac.quantize(v)
    lsb = 20 / (2**16 - 1)
    assert np.max(np.abs(q - v)) <= lsb / 2 + 1e-12
    assert np.allclose(np.round((q + 10) / lsb), (q + 10) / lsb, atol=1e-6)


def test_render_fastest_duration_and_hold():
    w = ramp_waveform(58, dwell=412.5 / 57)
    sig = render_dac(w, oversample=64, fastest=True)
    assert sig.staircase_duration_us == pytest.approx(57 / 139e3 * 1e6)
    assert sig.staircase_duration_us == pytest.approx(410.07, abs=0.01)
    tail = SignalChain().settling_time_us()
    assert sig.duration_us >= sig.staircase_duration_us + tail
    # update j is held on [j dwell, (j + 1) dwell)
    period = DacModel().period_us
    assert np.array_equal(sig.at(5.5 * period), w.voltages[5])


def test_render_rejects_dwell_shorter_than_dac_period():
    with pytest.raises(SignalError, match="shorter"):
        render_dac(ramp_waveform(5, dwell=5.0))


def test_constant_waveform_renders_constant():
    w = TransportWaveform(np.arange(6.0), np.full((6, 2), 0.7), ["a", "b"], 8.0)
    sig = render_dac(w)
    assert np.all(sig.volts == 0.7)
    out = apply_chain(sig, SignalChain())
    assert np.allclose(out.volts, 0.7, atol=1e-12)


def test_analog_requires_uniform_sampling():
    with pytest.raises(SignalError):
        AnalogWaveform(np.array([0.0, 1.0, 3.0]), np.zeros((3, 1)), ["e"])


def test_analog_file_round_trip():
    sig = render_dac(ramp_waveform(4, k=2), oversample=8)
    back = loads_analog(dumps_analog(sig))
    assert np.array_equal(back.t, sig.t) and np.array_equal(back.volts, sig.volts)
    assert back.hold == sig.hold and back.electrodes == sig.electrodes


# -- transfer functions ------------------------------------------------------------------------

def test_stage_cutoffs_are_minus_3db():
    for s in SignalChain().stages:
        assert abs(s.transfer(s.cutoff)) == pytest.approx(1 / np.sqrt(2), abs=1e-12)


def test_butterworth_maximally_flat():
    s = FilterStage("butterworth3", 75e3)
    f = np.geomspace(1e2, 1e7, 400)
    assert np.allclose(np.abs(s.transfer(f)) ** 2, 1 / (1 + (f / 75e3) ** 6), rtol=1e-9, atol=0)


def test_chain_low_frequency_limit():
    r = chain_response(SignalChain(), [1e-3])
    assert r[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert r[0, 2] == pytest.approx(0.0, abs=1e-6)


def test_chain_at_dac_rate_is_product_of_stages():
    chain = SignalChain()
    num, den = oracle_tf(chain)
    w = 2 * np.pi * 139e3
    _, h = sps.freqs(num, den, worN=[w])
    r = chain_response(chain, [139e3])
    assert r[0, 1] == pytest.approx(abs(h[0]), rel=1e-10)
    prod = np.prod([abs(s.transfer(139e3)) for s in chain.stages])
    assert r[0, 1] == pytest.approx(prod, rel=1e-12)


def test_chain_response_rejects_non_positive_frequency():
    with pytest.raises(SignalError):
        chain_response(SignalChain(), [0.0, 1e3])


def test_settling_tail():
    # slowest pole: the Butterworth complex pair, real part wc / 2
    tau_bw = 2 / (2 * np.pi * 75e3) * 1e6
    tau_rc2 = np.sqrt(np.sqrt(2) - 1) / (2 * np.pi * 47e3) * 1e6
    assert tau_bw > tau_rc2
    assert SignalChain().settling_time_us() == pytest.approx(5 * tau_bw, rel=1e-9)
    assert SignalChain().settling_time_us() == pytest.approx(21.22, abs=0.01)


# -- time domain -------------------------------------------------------------------------------

def test_step_response_final_value_and_rise_time():
    chain = SignalChain()
    dt = 0.01
    y = step_response(chain, dt, 20000)
    t = np.arange(y.size) * dt - dt  # step applied at sample 1
    assert y[-1] == pytest.approx(1.0, abs=1e-6)

    num, den = oracle_tf(chain)
    tt = np.linspace(0, 200e-6, 200001)
    _, yy = sps.step((num, den), T=tt)

    def rise(tv, yv):
        return np.interp(0.9, yv, tv) - np.interp(0.1, yv, tv)
    ours = rise(t[1:], y[1:])
    ref = rise(tt * 1e6, yy)
    assert ours == pytest.approx(ref, rel=1e-4)


def test_butterworth_tone_at_cutoff():
    dt = 0.05
    out = apply_chain(tone(75e3, dt, 8000), BW3)
    steady = out.volts[4000:, 0]
    assert (steady.max() - steady.min()) / 2 == pytest.approx(1 / np.sqrt(2), rel=0.01)


@pytest.mark.parametrize("f_hz", [10e3, 47e3, 120e3])
def test_single_tone_matches_transfer_function(f_hz):
    chain = SignalChain()
    dt = 0.02
    n = 40000
    out = apply_chain(tone(f_hz, dt, n), chain)
    t = np.arange(n) * dt * 1e-6
    h = chain.transfer(f_hz)
    expect = np.abs(h) * np.sin(2 * np.pi * f_hz * t + np.angle(h))
    sl = slice(n // 2, None)
    err = np.max(np.abs(out.volts[sl, 0] - expect[sl]))
    assert err <= 1e-3 * np.abs(h)


def test_zero_in_zero_out():
    sig = AnalogWaveform(np.arange(500) * 0.05, np.zeros((500, 3)), ["a", "b", "c"])
    assert not apply_chain(sig, SignalChain()).volts.any()


def test_undersampled_signal_rejected():
    sig = AnalogWaveform(np.arange(100) * 1.0, np.zeros((100, 1)), ["e"])
    with pytest.raises(SignalError, match="below"):
        apply_chain(sig, SignalChain())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3),
       shift=st.integers(1, 200))
def test_linear_and_time_invariant(seed, a, b, shift):
    rng = np.random.default_rng(seed)
    n, dt = 1200, 0.05
    x = np.zeros(n)
    y = np.zeros(n)
    x[50:] = rng.normal(size=n - 50)
    y[50:] = rng.normal(size=n - 50)
    t = np.arange(n) * dt
    chain = SignalChain()

    def run(u):
        return apply_chain(AnalogWaveform(t, u[:, None], ["e"]), chain).volts[:, 0]
    lhs = run(a * x + b * y)
    rhs = a * run(x) + b * run(y)
    scale = np.max(np.abs(rhs)) + 1e-300
    assert np.max(np.abs(lhs - rhs)) <= 1e-9 * scale
    xs = np.concatenate([np.zeros(shift), x[:n - shift]])
    shifted = run(xs)
    ref = run(x)[:n - shift]
    assert np.max(np.abs(shifted[shift:] - ref)) <= 1e-9 * (np.max(np.abs(ref)) + 1e-300)


# -- predistortion --------------------------------------------------------------------------------

def test_predistort_identity_for_fast_chain():
    fast = SignalChain(stages=(FilterStage("butterworth3", 50e6), FilterStage("rc1", 80e6)))
    w = ramp_waveform(30, k=2)
    res = predistort(w, fast, reg=1e-3, oversample=64, tail_us=0.1)
    assert np.max(np.abs(res.waveform.voltages - w.voltages)) < 1e-3


def test_predistort_large_regulariser_returns_input(transport, chain):
    res = predistort(transport, chain, reg=1e9)
    assert np.max(np.abs(res.waveform.voltages - transport.voltages)) < 1e-4


def test_predistort_tracking_decreases_with_reg(transport, chain):
    errs = [predistort(transport, chain, reg=r).tracking_error for r in (1e2, 1e0, 1e-2, 1e-4)]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_predistort_rejects_non_positive_reg(transport, chain):
    with pytest.raises(SignalError):
        predistort(transport, chain, reg=0.0)


def test_predistort_respects_voltage_range(transport):
    bounded = SignalChain(dac=DacModel(voltage_range=2.0))
    res = predistort(transport, bounded, reg=1e-4)
    assert np.all(np.abs(res.waveform.voltages) <= 2.0 + 1e-12)
    assert not res.feasible


def test_predistortion_reduces_well_tracking_error(basis, transport, chain):
    plain = verify_tracking(basis, transport, chain)
    pre = predistort(transport, chain, reg=1e-3).waveform
    fixed = verify_tracking(basis, pre, chain, reference=transport)
    assert np.sqrt(np.mean(fixed**2)) * 3 <= np.sqrt(np.mean(plain**2))
    assert fixed.mean() * 3 <= plain.mean()
