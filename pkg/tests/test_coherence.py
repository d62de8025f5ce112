import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from matterlink.coherence import (
    ClockQubit,
    FieldNoiseModel,
    FieldProfile,
    RamseyError,
    RamseySequence,
    contrast_decay,
    fringe_fit,
    gaussian_decay,
    phase_integral,
    qubit_frequency,
    ramsey_probability,
    simulate_ramsey,
    t2_fit,
    transport_phase,
)

Q = ClockQubit()
TAUS = [5.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0, 450.0, 500.0]
PHI2 = np.linspace(0, 2 * np.pi, 21)


# -- qubit ------------------------------------------------------------------------------

def test_clock_frequency_and_slope():
    assert qubit_frequency(Q, 0.0) == Q.f0
    assert Q.slope(10.0) == 6220.0
    assert qubit_frequency(Q, 10.177) - Q.f0 == pytest.approx(311 * 10.177**2, rel=1e-10)
    assert qubit_frequency(Q, 10.177) - Q.f0 == pytest.approx(32210.68, abs=0.01)
    with pytest.raises(ValueError):
        qubit_frequency(Q, -1.0)


def test_calibrated_noise_spread():
    n = FieldNoiseModel.calibrated(560.0)
    # Gaussian contrast exp(-(2 pi sigma_f tau)^2 / 2) reaches 1/e at tau = T2
    sigma_f = n.sigma_b * Q.slope()
    assert np.exp(-((2 * np.pi * sigma_f * 0.56) ** 2) / 2) == pytest.approx(np.exp(-1), rel=1e-12)
    with pytest.raises(RamseyError):
        FieldNoiseModel(sigma_b=-1.0)


# -- phase accumulation ----------------------------------------------------------------------

def test_no_links_uniform_field_gives_zero_phase():
    assert phase_integral(Q, FieldNoiseModel(), RamseySequence(tau_ms=100.0)) == 0.0


def test_quasi_static_offset_phase():
    seq = RamseySequence(tau_ms=50.0)
    db = np.array([0.0, 1e-4, -2e-4])
    ph = phase_integral(Q, FieldNoiseModel(), seq, db)
    df = Q.quadratic * ((Q.b0 + db) ** 2 - Q.b0**2)
    assert np.allclose(ph, 2 * np.pi * df * 0.05, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("x_edge", [-100.0, 0.0, 200.0])
@pytest.mark.parametrize("n_links", [1, 2])
def test_step_profile_closed_form(x_edge, n_links):
    dB, tl = 2e-3, 800e-6
    tau = 10e-3
    prof = FieldProfile.step(x_edge, dB)
    seq = RamseySequence(tau_ms=tau * 1e3, n_links=n_links, link_us=tl * 1e6)
    crossing = (x_edge + 342) / 684 * tl
    if n_links == 1:
        inside = tau - crossing
    else:
        inside = tl + (342 - x_edge) / 684 * tl - crossing
    df = Q.quadratic * ((Q.b0 + dB) ** 2 - Q.b0**2)
    assert transport_phase(Q, prof, seq) == pytest.approx(2 * np.pi * df * inside, rel=1e-9)


def test_linear_gradient_round_trip_closed_form():
    g, tl = 1e-5, 800e-6  # G/µm
    prof = FieldProfile.gradient(g)
    seq = RamseySequence(tau_ms=20.0, n_links=2, link_us=tl * 1e6)
    ua, ub = Q.b0 - 342 * g, Q.b0 + 342 * g
    # the field is linear in time on each link: integral of u^2 is T (ua^2 + ua ub + ub^2) / 3
    expect = 2 * np.pi * Q.quadratic * (2 * tl * (ua**2 + ua * ub + ub**2) / 3 - 2 * tl * ua**2)
    assert transport_phase(Q, prof, seq) == pytest.approx(expect, rel=1e-9)


def test_phase_doubles_with_twice_the_round_trips():
    prof = FieldProfile.step(50.0, 1e-3)
    a = transport_phase(Q, prof, RamseySequence(tau_ms=20.0, n_links=2))
    b = transport_phase(Q, prof, RamseySequence(tau_ms=20.0, n_links=4))
    assert b == pytest.approx(2 * a, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 12), tau=st.floats(10.0, 500.0), spread=st.booleans())
def test_uniform_profile_adds_no_phase(n, tau, spread):
    seq = RamseySequence(tau_ms=tau, n_links=n, placement="spread" if spread else "start")
    assert abs(transport_phase(Q, FieldProfile(), seq)) < 1e-9


def test_profile_must_cover_path():
    noise = FieldNoiseModel(profile=FieldProfile((-100.0, 100.0), (0.0, 0.0)))
    with pytest.raises(RamseyError):
        phase_integral(Q, noise, RamseySequence(n_links=1))
    with pytest.raises(RamseyError):
        FieldProfile((0.0, -1.0), (0.0, 0.0))


def test_link_budget_must_fit_inside_delay():
    seq = RamseySequence(tau_ms=5.0, n_links=7, link_us=800.0)
    assert seq.validate()
    with pytest.raises(RamseyError, match="N\\*T_L"):
        simulate_ramsey(Q, FieldNoiseModel(), seq)
    assert not RamseySequence(tau_ms=5.0, n_links=6, link_us=800.0).validate()


def test_spread_placement_centres_links_in_slots():
    seq = RamseySequence(tau_ms=10.0, n_links=4, link_us=800.0, placement="spread")
    starts = seq.link_starts_s()
    assert np.allclose(starts + 400e-6, (np.arange(4) + 0.5) * 2.5e-3)


# -- fringes ---------------------------------------------------------------------------------

def test_probability_formula():
    phi2 = np.linspace(0, 2 * np.pi, 9)
    p = ramsey_probability(phi2, 0.3, phi1=0.1)
    assert np.allclose(p, 0.5 * (1 - np.cos(phi2 - 0.4)), atol=1e-12)
    pe = ramsey_probability(phi2, 0.3, 0.1, detection_error=0.05)
    assert np.allclose(pe, 0.05 + 0.9 * p, atol=1e-12)


def test_zero_noise_fit_is_ideal():
    p = ramsey_probability(PHI2, 0.0)
    f = fringe_fit(PHI2, p)
    assert f.contrast == pytest.approx(1.0, abs=1e-12)
    assert min(f.phase, 2 * np.pi - f.phase) < 1e-12
    assert f.offset == pytest.approx(0.5, abs=1e-12)


def test_injected_phase_recovered():
    f = fringe_fit(PHI2, ramsey_probability(PHI2, 1.8690))
    assert f.phase == pytest.approx(1.8690, abs=1e-12)
    assert f.contrast == pytest.approx(1.0, abs=1e-12)


def test_flat_fringe_has_no_phase():
    f = fringe_fit(PHI2, np.full(PHI2.size, 0.5))
    assert f.contrast == 0.0 and not f.phase_defined and np.isnan(f.phase)


def test_fringe_fit_needs_full_period():
    with pytest.raises(RamseyError):
        fringe_fit(np.linspace(0, np.pi, 11), np.zeros(11))
    with pytest.raises(RamseyError):
        fringe_fit(PHI2[:4], np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(0.05, 1.0), ph=st.floats(0, 2 * np.pi - 1e-6), a=st.floats(0.3, 0.7))
def test_fringe_fit_recovers_parameters(c, ph, a):
    p = a - c / 2 * np.cos(PHI2 - ph)
    f = fringe_fit(PHI2, p)
    assert f.contrast == pytest.approx(c, abs=1e-10)
    assert np.angle(np.exp(1j * (f.phase - ph))) == pytest.approx(0.0, abs=1e-9)


def test_reference_offset_shifts_phase_only():
    tau = 100.0
    base = RamseySequence(tau_ms=tau)
    moved = RamseySequence(tau_ms=tau, f_ref=Q.frequency(Q.b0) + 1.0)
    a = fringe_fit(PHI2, simulate_ramsey(Q, FieldNoiseModel(), base, 10**6, 1).expected)
    b = fringe_fit(PHI2, simulate_ramsey(Q, FieldNoiseModel(), moved, 10**6, 1).expected)
    shift = np.angle(np.exp(1j * (b.phase - a.phase)))
    # an absolute reference near 12.6 GHz is only resolved to ~2e-6 Hz
    assert shift == pytest.approx(np.angle(np.exp(-2j * np.pi * 1.0 * tau * 1e-3)), abs=1e-5)
    assert b.contrast == pytest.approx(a.contrast, abs=1e-12)


def test_seeded_runs_are_deterministic():
    noise = FieldNoiseModel.calibrated()
    seq = RamseySequence(tau_ms=200.0, n_links=4)
    a = simulate_ramsey(Q, noise, seq, 100, seed=42)
    b = simulate_ramsey(Q, noise, seq, 100, seed=42)
    c = simulate_ramsey(Q, noise, seq, 100, seed=43)
    assert np.array_equal(a.p1, b.p1) and not np.array_equal(a.p1, c.p1)


def test_zero_noise_contrast_error_bars_are_calibrated():
    seq = RamseySequence(tau_ms=5.0)
    within1 = within2 = 0
    n = 300
    for seed in range(n):
        fr = simulate_ramsey(Q, FieldNoiseModel(), seq, 100, seed)
        f = fringe_fit(fr.phi2, fr.p1, shots=100)
        within1 += abs(f.contrast - 1) <= f.contrast_err
        within2 += abs(f.contrast - 1) <= 2 * f.contrast_err
    assert 0.55 <= within1 / n <= 0.80
    assert within2 / n >= 0.90


# -- decay --------------------------------------------------------------------------------------

def test_t2_fit_exact_curve():
    tau = np.array(TAUS)
    fit = t2_fit(tau, gaussian_decay(tau, 0.97, 560.0))
    assert fit.decaying
    assert fit.t2_ms == pytest.approx(560.0, rel=1e-6)
    assert fit.contrast0 == pytest.approx(0.97, rel=1e-6)


def test_t2_fit_flags_flat_data():
    fit = t2_fit(TAUS, np.full(len(TAUS), 0.8))
    assert not fit.decaying and np.isinf(fit.t2_ms)
    with pytest.raises(RamseyError):
        t2_fit([1.0, 2.0], [1.0, 0.9])


def test_t2_fit_noisy_recovery_rate():
    tau = np.array(TAUS)
    clean = gaussian_decay(tau, 1.0, 560.0)
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        fit = t2_fit(tau, clean + rng.normal(0, 0.03, tau.size))
        hits += abs(fit.t2_ms - 560.0) <= 40.0
    assert hits >= 90


@settings(max_examples=30, deadline=None)
@given(k=st.floats(0.2, 5.0), s=st.floats(0.2, 5.0))
def test_t2_fit_scale_equivariance(k, s):
    tau = np.array(TAUS)
    c = gaussian_decay(tau, 0.9, 400.0) * (1 + 0.01 * np.sin(tau))
    ref = t2_fit(tau, c)
    scaled = t2_fit(s * tau, k * c)
    assert scaled.t2_ms == pytest.approx(s * ref.t2_ms, rel=1e-5)
    assert scaled.contrast0 == pytest.approx(k * ref.contrast0, rel=1e-5)


def test_calibrated_noise_reproduces_t2():
    scan = contrast_decay(Q, FieldNoiseModel.calibrated(560.0), TAUS, shots=10**4, seed=0)
    assert scan.fit.decaying
    assert scan.fit.t2_ms == pytest.approx(560.0, rel=0.05)
    assert scan.contrast[0] == pytest.approx(1.0, abs=0.02)


def test_transport_does_not_change_decay_in_uniform_field():
    base = RamseySequence(n_links=6)
    noise = FieldNoiseModel.calibrated(560.0)
    a = contrast_decay(Q, noise, TAUS, shots=200, seed=5)
    b = contrast_decay(Q, noise, TAUS, shots=200, seed=5, base=base)
    assert np.allclose(a.contrast, b.contrast, atol=1e-9)
