import math

import numpy as np
import pytest
from scipy import stats

from qdtimebin import dynamics as dyn
from qdtimebin.config import SimConfig
from qdtimebin.hilbert import Level, QuantumState, basis_state, superpose
from qdtimebin.pulses import (PulseSegment, PulseSequence, build_generation_pulse, build_ghz,
                              build_rabi, build_ramsey, build_spin_preparation, build_timebin)


def _delay_seq(duration, period=100e-9):
    return PulseSequence((PulseSegment("delay", 0.0, duration),), period)


def _drive_seq(duration, rabi, period=100e-9):
    return PulseSequence((PulseSegment("drive", 0.0, duration, rabi=rabi),), period)


def test_collapse_operators():
    ch = dyn.collapse_operators(SimConfig())
    rad = [c for c in ch if c.kind == "radiative"]
    assert len(rad) == 4
    v = [c.rate for c in rad if c.transition.kind == "vertical"]
    d = [c.rate for c in rad if c.transition.kind == "diagonal"]
    assert v == [5e9, 5e9] and d == [1e9, 1e9]
    assert v[0] / (v[0] + d[0]) == pytest.approx(5 / 6)
    rates = {c.rate for c in dyn.collapse_operators(SimConfig(purcell_factor=1.0)) if c.kind == "radiative"}
    assert rates == {1e9}
    deph = [c for c in dyn.collapse_operators(SimConfig(t2_star=math.inf)) if c.kind == "dephasing"]
    assert deph[0].rate == 0.0


def test_hamiltonian_at():
    cfg = SimConfig()
    seq = PulseSequence((PulseSegment("drive", 0.0, 1e-9, rabi=2e9),
                         PulseSegment("delay", 1e-9, 1e-9),
                         PulseSegment("drive", 2e-9, 1e-9, rabi=0.0)), 100e-9)
    free = dyn.hamiltonian_at(cfg, seq, 1.5e-9).matrix
    np.testing.assert_allclose(free - np.diag(np.diag(free)), 0)
    np.testing.assert_allclose(dyn.hamiltonian_at(cfg, seq, 2.5e-9).matrix, free)
    h = dyn.hamiltonian_at(cfg, seq, 0.5e-9).matrix
    assert h[Level.T, Level.hbar] == pytest.approx(1e9)
    np.testing.assert_allclose(h, h.conj().T)
    with pytest.raises(ValueError):
        dyn.hamiltonian_at(cfg, seq, 5e-9)


def test_master_identity_without_dynamics():
    cfg = SimConfig(gamma0=0.0, t2_star=math.inf, hole_splitting=0.0, trion_splitting=0.0)
    rho = QuantumState(np.diag([0.3, 0.2, 0.4, 0.1]).astype(complex))
    out = dyn.propagate_master(rho, cfg, _delay_seq(5e-9), 0.0, 5e-9)
    np.testing.assert_allclose(out.data, rho.data, atol=1e-12)


def test_master_trion_decay():
    cfg = SimConfig(t2_star=math.inf)
    seq = _delay_seq(2e-9)
    g = cfg.trion_decay_rate
    for t in (0.1e-9, 0.3e-9, 1e-9):
        out = dyn.propagate_master(basis_state(Level.T), cfg, seq, 0.0, t)
        assert out.populations()[Level.T] == pytest.approx(math.exp(-g * t), rel=1e-7)
        # diagonal share of the decayed population
        assert out.populations()[Level.h] == pytest.approx((1 - math.exp(-g * t)) / 6, rel=1e-7)


def test_master_rabi_closed_form():
    cfg = SimConfig.ideal(gamma0=0.0)
    rabi = 2 * math.pi * 1e9
    seq = _drive_seq(10e-9, rabi)
    for t in np.linspace(0, 10e-9, 23):
        out = dyn.propagate_master(basis_state(Level.hbar), cfg, seq, 0.0, float(t))
        assert out.populations()[Level.T] == pytest.approx(math.sin(rabi * t / 2) ** 2, abs=1e-6)


def test_step_size_precondition():
    cfg = SimConfig()
    seq = build_rabi(cfg, 1.0)
    bound = dyn.step_bound(cfg, seq, None)
    assert bound <= cfg.precession_period / 20
    assert bound <= 1 / cfg.vertical_rate / 20
    with pytest.raises(dyn.StepSizeError):
        dyn.propagate_master(basis_state(Level.h), cfg, seq, 0.0, 1e-9, dt=2 * bound)
    dyn.propagate_master(basis_state(Level.h), cfg, seq, 0.0, 1e-9, dt=bound)


@pytest.mark.parametrize("make", [
    lambda c: build_timebin(c, "A"),
    lambda c: build_timebin(c, "B"),
    lambda c: build_ramsey(c, 0.5e-9, "half"),
    lambda c: build_rabi(c, 2.0),
    lambda c: build_ghz(c, 2),
    lambda c: build_spin_preparation(c, 5e-9),
])
def test_master_state_validity(make):
    cfg = SimConfig()
    seq = make(cfg)
    for t in np.linspace(0, seq.span, 7)[1:]:
        out = dyn.propagate_master(basis_state(Level.h), cfg, seq, 0.0, float(t))
        rho = out.data
        np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
        assert np.trace(rho).real == pytest.approx(1.0, abs=1e-9)
        assert np.linalg.eigvalsh(rho).min() > -1e-9


def test_larmor_frequency():
    cfg = SimConfig(t2_star=math.inf)
    plus = superpose([(1, basis_state(Level.h)), (1, basis_state(Level.hbar))])
    span = 150e-12
    seq = _delay_seq(span)
    n = 300
    times = np.arange(n) * span / n
    sx = [2 * dyn.propagate_master(plus, cfg, seq, 0.0, float(t)).data[0, 1].real for t in times]
    spectrum = np.abs(np.fft.rfft(sx - np.mean(sx)))
    freqs = np.fft.rfftfreq(n, span / n)
    peak = freqs[np.argmax(spectrum)]
    assert abs(peak - cfg.hole_splitting / (2 * math.pi)) <= freqs[1]


def test_dephasing_coherence_decay():
    cfg = SimConfig(hole_splitting=0.0, trion_splitting=0.0)
    plus = superpose([(1, basis_state(Level.h)), (1, basis_state(Level.hbar))])
    seq = _delay_seq(5e-9)
    for t in (1e-9, 2.445e-9, 4e-9):
        c = abs(dyn.propagate_master(plus, cfg, seq, 0.0, t).data[0, 1])
        assert c == pytest.approx(0.5 * math.exp(-t / cfg.t2_star), rel=1e-6)


def test_area_quadrature_moments():
    cfg = SimConfig(pulse_area_error=0.2)
    x, w = dyn.area_quadrature(cfg)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.dot(w, x) == pytest.approx(1.0, abs=1e-12)
    assert np.dot(w, (x - 1) ** 2) == pytest.approx(0.04, abs=1e-12)
    assert dyn.area_quadrature(cfg, 1.3)[0].tolist() == [1.3]


# -- trajectories -----------------------------------------------------------------------

def test_zero_decay_gives_no_jumps():
    cfg = SimConfig(gamma0=0.0, t2_star=math.inf)
    rec = dyn.run_trajectory(cfg, _delay_seq(5e-9), 1, initial=basis_state(Level.T))
    assert rec.jumps == () and rec.final_label == "T"


def test_jump_times_exponential():
    cfg = SimConfig(t2_star=math.inf)
    recs = dyn.simulate_ensemble(cfg, _delay_seq(5e-9), 11, 10000, initial=basis_state(Level.T))
    times = np.array([r.jumps[0].time for r in recs if r.jumps])
    assert len(times) >= 9990
    # truncated at the 5 ns span: exp(-30), negligible
    p = stats.kstest(times, "expon", args=(0, 1 / cfg.trion_decay_rate)).pvalue
    assert p > 0.01
    for r in recs:
        t = [j.time for j in r.jumps]
        assert all(a < b for a, b in zip(t, t[1:]))


def test_detected_fraction():
    cfg = SimConfig(t2_star=math.inf, detection_efficiency=0.3)
    recs = dyn.simulate_ensemble(cfg, _delay_seq(5e-9), 12, 10000, initial=basis_state(Level.T))
    jumps = [j for r in recs for j in r.jumps]
    frac = np.mean([j.detected for j in jumps])
    se = math.sqrt(0.3 * 0.7 / len(jumps))
    assert abs(frac - 0.3) < 3 * se


def test_ensemble_determinism_and_seeding():
    cfg = SimConfig()
    seq = build_timebin(cfg, "A")
    st1, s1 = dyn.run_ensemble(cfg, seq, 300, 42)
    st2, s2 = dyn.run_ensemble(cfg, seq, 300, 42, threads=3, chunk=64)
    assert s1 == s2 and st1.means == st2.means
    one = dyn.simulate_ensemble(cfg, seq, 42, 1)[0]
    ref = dyn.run_trajectory(cfg, seq, dyn.trajectory_seed(42, 0))
    assert one.jumps == ref.jumps and one.seed == ref.seed
    # a record depends only on its own index
    tail = dyn.simulate_ensemble(cfg, seq, 42, 5, offset=295)
    full = dyn.simulate_ensemble(cfg, seq, 42, 300)
    assert [r.jumps for r in tail] == [r.jumps for r in full[295:]]
    assert dyn.trajectory_seed(42, 1) != dyn.trajectory_seed(42, 0)
    assert dyn.trajectory_seed(43, 0) != dyn.trajectory_seed(42, 0)


def test_standard_error_scaling():
    cfg = SimConfig(t2_star=math.inf)
    seq = build_generation_pulse(cfg, 100e-12, tail=1e-12)
    st_small, _ = dyn.run_ensemble(cfg, seq, 1000, 5, initial=basis_state(Level.hbar))
    st_big, _ = dyn.run_ensemble(cfg, seq, 4000, 6, initial=basis_state(Level.hbar))
    ratio = st_small["pop_T"][1] / st_big["pop_T"][1]
    assert ratio == pytest.approx(2.0, rel=0.2)
    # standard error is the sample stdev over sqrt(count)
    recs = dyn.simulate_ensemble(cfg, seq, 6, 4000, initial=basis_state(Level.hbar))
    pops = np.array([r.populations()[Level.T] for r in recs if r.charged])
    assert st_big["pop_T"][1] == pytest.approx(pops.std(ddof=1) / math.sqrt(len(pops)), rel=1e-12)


def test_ramsey_populations_match_master():
    cfg = SimConfig()
    seq = build_ramsey(cfg, 0.2e-9, "half")
    st, _ = dyn.run_ensemble(cfg, seq, 10000, 21)
    we = dyn.window_expectations(cfg, seq)
    pops = we.final_state.populations()
    for lvl in Level:
        m, e = st[f"pop_{lvl.name}"]
        assert abs(m - pops[lvl]) <= 3 * max(e, 1e-12) + 1e-9, lvl
    m, e = st["charged"]
    assert abs(m - we.charged_final) <= 3 * e
    for w in seq.windows:
        m, e = st[f"detected_{w}"]
        assert abs(m - we.detected[w]) <= 3 * e


def test_records_to_stream_windows():
    cfg = SimConfig()
    seq = build_timebin(cfg, "A")
    _, s = dyn.run_ensemble(cfg, seq, 200, 3)
    assert set(s.windows) == {"gen1", "gen2", "readout"}
    assert len(s) == 200
    assert s.repetition_period_ps == round(seq.repetition_period * 1e12)
