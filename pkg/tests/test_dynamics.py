import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from matterlink.constants import HBAR
from matterlink.dynamics import (
    DynamicsError,
    ForceField,
    IntegratorConfig,
    NonHarmonicWellError,
    SweepContext,
    Trajectory,
    axial_energy,
    cumulative_distance_km,
    dumps_trajectory,
    initial_state,
    integrate,
    loads_trajectory,
    loss_upper_bound,
    mathieu_q,
    motional_quanta,
    oscillation_frequency,
    simulate_link,
    sweep,
    total_force,
    velocity_verlet,
)
from matterlink.trapmodel import secular_frequencies


@pytest.fixture(scope="module")
def well(model, transport):
    """Static Zone 1 well: (voltage function, minimum)."""
    v = transport.voltages[0].copy()
    x0, _ = initial_state(model, transport)
    return (lambda t: v), x0


def run_static(model, transport, fn, x0, t_end, dt=0.02, v0=None, mode="secular", every=10):
    cfg = IntegratorConfig(mode=mode, step_us=dt, record_every=every)
    return integrate(model, transport.electrodes, fn, cfg, x0,
                     np.zeros(3) if v0 is None else v0, t_end)


# -- forces ---------------------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["secular", "full-rf"])
def test_compiled_force_matches_numpy(model, transport, well, mode):
    fn, x0 = well
    ff = ForceField(model, transport.electrodes, fn, mode)
    rng = np.random.default_rng(3)
    for _ in range(20):
        p = x0 + rng.uniform(-40, 40, 3)
        t = rng.uniform(0, 1)
        ref = ff.force_reference(t, p)
        assert np.allclose(ff.force(t, p), ref, rtol=1e-10, atol=1e-12 * np.abs(ref).max())


def test_force_vanishes_at_minimum(model, transport, well):
    fn, x0 = well
    ff = ForceField(model, transport.electrodes, fn)
    scale = ForceField(model, transport.electrodes, fn).force(0, x0 + [1.0, 0, 0])
    assert np.linalg.norm(ff.force(0, x0)) < 1e-8 * np.linalg.norm(scale)


def test_total_force_dc_linearity(model):
    rng = np.random.default_rng(0)
    ids = [e for e in model.layout.ids if e != "RF"]
    dc = dict(zip(ids, rng.uniform(-2, 2, len(ids))))
    p = np.array([-100.0, 3.0, 115.0])
    zero = total_force(model, {}, p)
    f1 = total_force(model, dc, p) - zero
    f2 = total_force(model, {k: 2 * v for k, v in dc.items()}, p) - zero
    assert np.allclose(f2, 2 * f1, rtol=1e-9, atol=1e-12 * np.abs(f1).max())


@pytest.mark.parametrize("offset", [(0, 0, 2.0), (0, 1.5, 0), (0, 1.0, -2.0)])
def test_period_averaged_rf_force_matches_secular(model, transport, well, offset):
    # average the instantaneous force along the first-order micromotion path
    fn, x0 = well
    p = x0 + np.array(offset)
    rf = ForceField(model, transport.electrodes, fn, "full-rf")
    sec = ForceField(model, transport.electrodes, fn, "secular")
    om = model.drive.omega * 1e-6
    ts = np.arange(64) / 64 * model.drive.period_us
    f = np.array([rf.force(t, p) for t in ts])
    xi = -(f - f.mean(0)) / rf.mass / om**2
    avg = np.mean([rf.force(t, p + d) for t, d in zip(ts, xi)], axis=0)
    ref = sec.force(0, p)
    assert np.linalg.norm(avg - ref) <= 0.05 * np.linalg.norm(ref)


# -- integrator -----------------------------------------------------------------------------------

def test_ion_at_rest_stays_put(model, transport, well):
    fn, x0 = well
    tr = run_static(model, transport, fn, x0, 1000.0, every=100)
    assert np.max(np.linalg.norm(tr.x - x0, axis=1)) < 0.01


def test_axial_oscillation_frequency(model, transport, well):
    fn, x0 = well
    tr = run_static(model, transport, fn, x0 + [1.0, 0, 0], 200.0, every=1)
    assert oscillation_frequency(tr.t, tr.x[:, 0]) == pytest.approx(141e3, rel=0.01)
    power = np.abs(np.fft.rfft(tr.x[:, 0] - tr.x[:, 0].mean(), 2**18))
    f = np.fft.rfftfreq(2**18, (tr.t[1] - tr.t[0]) * 1e-6)
    assert f[np.argmax(power)] == pytest.approx(141e3, rel=0.01)


def test_verlet_energy_has_no_secular_drift():
    # step chosen so the numerical period is exactly 40 steps; the sampled
    # energy is then periodic and any drift over 1e4 periods is accumulated error
    omega = 1.0
    h = np.sqrt(2 * (1 - np.cos(2 * np.pi / 40))) / omega
    t, x, v, _ = velocity_verlet(lambda _t, y: -omega**2 * y, [1.0], [0.0], 0.0, h, 40 * 10**4)
    e = 0.5 * v[:, 0] ** 2 + 0.5 * omega**2 * x[:, 0] ** 2
    first, last = e[:4000].mean(), e[-4000:].mean()
    assert abs(last - first) / first < 1e-6


def test_verlet_is_second_order(model, transport, well):
    fn, x0 = well
    start = x0 + np.array([1.0, 0.3, -0.2])

    def end(dt):
        return run_static(model, transport, fn, start, 20.0, dt=dt, every=10**6).x[-1]
    ref = end(0.00125)
    e1 = np.linalg.norm(end(0.01) - ref)
    e2 = np.linalg.norm(end(0.005) - ref)
    assert 3.5 < e1 / e2 < 4.6


def test_time_reversal(model, transport):
    x0, _ = initial_state(model, transport)
    tg = np.arange(len(transport)) * transport.dwell_us
    volts = transport.voltages

    def lin(t):
        return np.array([np.interp(t, tg, volts[:, k]) for k in range(volts.shape[1])])
    T = 100.0
    cfg = IntegratorConfig(step_us=0.02, record_every=10**6)
    fwd = integrate(model, transport.electrodes, lin, cfg, x0, np.zeros(3), T)
    assert fwd.x[-1, 0] - x0[0] > 100  # the ion really moved
    back = integrate(model, transport.electrodes, lambda t: lin(T - t), cfg,
                     fwd.x[-1], -fwd.v[-1], T)
    assert np.linalg.norm(back.x[-1] - x0) < 1e-3


def test_mathieu_q_stable(model, well):
    _, x0 = well
    q = mathieu_q(model, x0)
    assert np.max(np.abs(q)) < 0.9
    assert abs(q.sum()) < 1e-3 * np.max(np.abs(q))  # Laplace: RF Hessian is traceless


def test_full_rf_radial_frequency_matches_pseudopotential(model, basis, transport, well):
    fn, x0 = well
    sec = secular_frequencies(model, basis.full_voltages(fn(0)), x0)
    period = model.drive.period_us
    tr = run_static(model, transport, fn, x0 + [0, 0.5, 0.5], 20.0, dt=period / 100,
                    mode="full-rf", every=1)
    for axis in (1, 2):
        k = int(np.argmax(np.abs(sec.axes[axis])))
        f = oscillation_frequency(tr.t, tr.x[:, axis], smooth_us=period)
        assert f == pytest.approx(sec.frequencies[k], rel=0.05)


def test_full_rf_step_bound(model, transport, well):
    fn, x0 = well
    with pytest.raises(DynamicsError, match="period/100"):
        run_static(model, transport, fn, x0, 1.0, dt=0.001, mode="full-rf")
    with pytest.raises(DynamicsError):
        IntegratorConfig(step_us=0.0).validate()
    with pytest.raises(DynamicsError):
        IntegratorConfig(mode="quantum").validate()


# -- links ----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ideal_link(model, transport):
    return simulate_link(model, transport, None, return_trajectory=True)


def test_ideal_link(ideal_link):
    rep, traj = ideal_link
    assert rep.success and rep.reached_target and not rep.escaped
    assert rep.duration_us == pytest.approx(412.5)
    assert rep.mean_speed == pytest.approx(1.66, abs=0.01)
    assert rep.link_rate == pytest.approx(2424, abs=1)
    assert rep.mean_speed * rep.duration_us == rep.distance_um
    assert rep.distance_um == 684.0
    assert traj.t[-1] >= rep.duration_us


def test_truncated_waveform_misses_zone2(model, transport, layout):
    half = transport.truncated(len(transport) // 2)
    rep = simulate_link(model, half, None, target_um=layout.zones["Zone2"])
    assert not rep.reached_target
    assert rep.target_um == layout.zones["Zone2"]


def test_escape_is_reported(model, transport):
    v = transport.voltages.copy()
    v[1:] *= 40
    kick = dataclasses.replace(transport, voltages=v)
    rep, traj = simulate_link(model, kick, None, return_trajectory=True)
    assert rep.escaped and not rep.success
    assert 0 < rep.escape_time_us < kick.duration_us
    assert traj.escaped and traj.t[-1] == rep.escape_time_us
    assert rep.message


def test_duration_ladder_with_filters(model, transport, chain):
    rows = sweep("duration", [412.5, 1650.0, 4125.0], SweepContext(model, transport, chain=chain))
    reps = [r["report"] for r in rows]
    assert all(r.success for r in reps)
    n = [r.final_quanta for r in reps]
    assert n[0] >= n[1] >= n[2]
    # the 412.5 µs row is the plain link
    direct = simulate_link(model, transport, chain)
    assert reps[0].as_dict() == direct.as_dict()


def test_gap_sweep_both_succeed(model, transport, synth_cfg):
    ctx = SweepContext(model, transport, synthesis=synth_cfg)
    rows = sweep("gap_x", [0.0, 10.0], ctx)
    assert [r["error"] for r in rows] == [None, None]
    assert all(r["report"].success for r in rows)


def test_sweep_rows_survive_failures(model, transport):
    rows = sweep("duration", [-1.0, 412.5], SweepContext(model, transport))
    assert rows[0]["report"] is None and rows[0]["error"]
    assert rows[1]["report"].success


def test_sweep_rejects_bad_input(model, transport):
    with pytest.raises(ValueError):
        sweep("duration", [], SweepContext(model, transport))
    with pytest.raises(ValueError):
        sweep("temperature", [1.0], SweepContext(model, transport))


def test_thermal_initial_state_is_seeded(model, transport):
    a = initial_state(model, transport, temperature_k=1e-3, seed=11)
    b = initial_state(model, transport, temperature_k=1e-3, seed=11)
    c = initial_state(model, transport, temperature_k=1e-3, seed=12)
    assert np.array_equal(a[1], b[1]) and not np.array_equal(a[1], c[1])


# -- final-well energy ------------------------------------------------------------------------

def test_motional_quanta_formula():
    f = 141e3
    assert motional_quanta(HBAR * 2 * np.pi * f, f) == pytest.approx(0.5, rel=1e-12)
    assert motional_quanta(0.0, f) == 0.0
    assert motional_quanta(0.2 * HBAR * 2 * np.pi * f, f) == 0.0


def test_axial_energy_at_rest_and_kicked(model, basis, transport, well):
    fn, x0 = well
    v = basis.full_voltages(fn(0))
    rest = axial_energy(model, v, x0, np.zeros(3))
    assert motional_quanta(rest.energy_j, rest.frequency_hz) == 0.0
    assert rest.frequency_hz == pytest.approx(141e3, rel=0.01)
    w = 2 * np.pi * rest.frequency_hz
    vx = np.sqrt(2 * HBAR * w / model.ion.mass_kg)  # m/s == µm/µs
    kicked = axial_energy(model, v, x0, np.array([vx, 0, 0]))
    assert kicked.energy_j == pytest.approx(HBAR * w, rel=1e-9)
    assert motional_quanta(kicked.energy_j, kicked.frequency_hz) == pytest.approx(0.5, rel=1e-9)


def test_axial_energy_without_well_raises(model, well):
    _, x0 = well
    with pytest.raises(NonHarmonicWellError):
        axial_energy(model, {}, x0, np.zeros(3))


# -- statistics -------------------------------------------------------------------------------

def test_loss_bound_values():
    b = loss_upper_bound(15e6)
    assert b.point == pytest.approx(6.67e-8, rel=1e-3)
    assert round(b.point, 8) == 7e-8
    assert loss_upper_bound(1).point == 1.0
    b = loss_upper_bound(10**6, 0.95)
    assert b.exact == pytest.approx(1 - 0.05 ** 1e-6, rel=1e-9)
    assert b.exact == pytest.approx(np.log(20) / 1e6, rel=1e-5)


def test_loss_bound_errors():
    with pytest.raises(ValueError):
        loss_upper_bound(0)
    with pytest.raises(ValueError):
        loss_upper_bound(10, confidence=1.0)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 10**9), conf=st.floats(0.5, 0.999))
def test_loss_bound_zero_failure_identity(n, conf):
    # exact bound p solves (1 - p)^N = 1 - confidence
    b = loss_upper_bound(n, conf)
    assert stats.binom.cdf(0, n, b.exact) == pytest.approx(1 - conf, rel=1e-6)
    assert b.point == 1 / n


def test_cumulative_distance():
    assert cumulative_distance_km(15e6) == pytest.approx(10.26, abs=1e-9)


# -- trajectory records ---------------------------------------------------------------------

def test_trajectory_round_trip(ideal_link):
    _, traj = ideal_link
    back = loads_trajectory(dumps_trajectory(traj))
    assert np.array_equal(back.t, traj.t)
    assert np.array_equal(back.x, traj.x) and np.array_equal(back.v, traj.v)


def test_trajectory_invariants():
    z = np.zeros((3, 3))
    with pytest.raises(DynamicsError):
        Trajectory(np.array([0.0, 1.0, 1.0]), z, z, np.zeros(3), np.zeros(3))
    bad = z.copy()
    bad[1, 2] = np.nan
    with pytest.raises(DynamicsError):
        Trajectory(np.arange(3.0), bad, z, np.zeros(3), np.zeros(3))
