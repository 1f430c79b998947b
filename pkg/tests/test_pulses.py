import math

import numpy as np
import pytest
from scipy.linalg import expm, expm_frechet

from qdtimebin.config import SimConfig
from qdtimebin.pulses import (PulseSegment, PulseSequence, SequenceError, best_single_pulse_flip,
                              build_generation_pulse, build_ghz, build_rabi, build_ramsey,
                              build_spin_preparation, build_storage, build_timebin,
                              calibrate_composite_flip, calibrate_composite_half,
                              composite_unitary, describe_sequence, effective_composite,
                              flip_fidelity, precession, rotation_unitary)

SX = np.array([[0, 1], [1, 0]], complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


def _expm_rotation(config, power, duration):
    theta = config.stark_kappa * math.sqrt(power)
    h = 0.5 * config.hole_splitting * SZ + theta / (2 * duration) * SX
    return expm(-1j * h * duration)


@pytest.mark.parametrize("power", [0.0, 0.3, 1.0, 2.7, 4.0])
@pytest.mark.parametrize("cfg", [SimConfig(), SimConfig.field_9t(), SimConfig(hole_splitting=0.0)])
def test_rotation_unitary_matches_expm(power, cfg):
    u = rotation_unitary(cfg, power, 6e-12)
    np.testing.assert_allclose(u, _expm_rotation(cfg, power, 6e-12), atol=1e-12)
    np.testing.assert_allclose(u @ u.conj().T, np.eye(2), atol=1e-12)


def test_rotation_unitary_limits():
    cfg = SimConfig()
    u = rotation_unitary(cfg, 0.0, 6e-12)
    phi = cfg.hole_splitting * 6e-12
    np.testing.assert_allclose(u, np.diag([np.exp(-0.5j * phi), np.exp(0.5j * phi)]), atol=1e-14)
    u = rotation_unitary(SimConfig(hole_splitting=0.0), 1.0, 6e-12)
    assert flip_fidelity(u) == pytest.approx(1.0, abs=1e-14)
    # 10 ps precession, 6 ps pulse: the tilted axis spoils a single-pulse flip
    assert flip_fidelity(rotation_unitary(SimConfig.field_9t(), 1.0, 6e-12)) < 0.95
    with pytest.raises(ValueError):
        rotation_unitary(cfg, -1.0, 6e-12)
    with pytest.raises(ValueError):
        rotation_unitary(cfg, 1.0, 0.0)


def test_rotation_unitary_derivative():
    cfg = SimConfig()
    tau = 6e-12
    for p in (0.2, 1.0, 3.0):
        theta = cfg.stark_kappa * math.sqrt(p)
        a = -1j * (0.5 * cfg.hole_splitting * tau * SZ + 0.5 * theta * SX)
        da = -1j * 0.5 * cfg.stark_kappa / (2 * math.sqrt(p)) * SX
        _, analytic = expm_frechet(a, da)
        h = 1e-6
        fd = (rotation_unitary(cfg, p + h, tau) - rotation_unitary(cfg, p - h, tau)) / (2 * h)
        np.testing.assert_allclose(fd, analytic, atol=1e-6)


def test_calibration_degenerate_limit():
    cfg = SimConfig(hole_splitting=0.0, trion_splitting=0.0)
    flip = calibrate_composite_flip(cfg)
    assert flip.fidelity == pytest.approx(1.0, abs=1e-9)
    # two pulses of area pi/2 each
    assert cfg.rotation_angle(flip.power) == pytest.approx(math.pi / 2, abs=1e-5)
    half = calibrate_composite_half(cfg)
    assert half.fidelity == pytest.approx(1.0, abs=1e-9)
    assert 2 * cfg.rotation_angle(half.power) == pytest.approx(math.pi / 2, abs=1e-5)


def _fine_flip_grid(cfg, n_power, n_delay):
    # independent closed form: axis-angle composition without the library helpers
    tau = cfg.rotation_duration
    p = np.linspace(0.0, math.sqrt(cfg.max_rotation_power), n_power)[:, None] ** 2
    d = np.linspace(0.0, cfg.precession_period, n_delay)[None, :]
    ax = cfg.stark_kappa * np.sqrt(p) / 2
    az = cfg.hole_splitting * tau / 2
    phi = np.sqrt(ax**2 + az**2)
    s = np.where(phi > 0, np.sin(phi) / np.where(phi > 0, phi, 1), 1.0)
    u00, u01 = np.cos(phi) - 1j * s * az, -1j * s * ax
    u10, u11 = u01, np.cos(phi) + 1j * s * az
    e = np.exp(-0.5j * cfg.hole_splitting * d)
    # (U P U)_{10} with P = diag(e, conj(e)); the outer frame phase does not change |.|
    m10 = u10 * e * u00 + u11 * np.conj(e) * u10
    return p[:, 0], d[0], np.abs(m10) ** 2


def test_composite_flip_6t_against_fine_grid():
    cfg = SimConfig()
    flip = calibrate_composite_flip(cfg)
    assert flip.ok and flip.fidelity >= 0.99
    powers, delays, f = _fine_flip_grid(cfg, 1601, 601)
    assert flip.fidelity >= f.max() - 1e-9
    near = np.argwhere(f >= f.max() - 1e-4)
    dp = math.sqrt(cfg.max_rotation_power) / 160
    dd = cfg.precession_period / 60
    dist = np.min(np.hypot((np.sqrt(powers[near[:, 0]]) - math.sqrt(flip.power)) / dp,
                           (delays[near[:, 1]] - flip.delay) / dd))
    assert dist <= 1.0


def test_composite_unitary_consistency():
    cfg = SimConfig()
    for comp in (calibrate_composite_flip(cfg), calibrate_composite_half(cfg)):
        u = comp.unitary
        np.testing.assert_allclose(u @ u.conj().T, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(u, composite_unitary(cfg, comp.power, comp.delay), atol=1e-14)
        np.testing.assert_allclose(comp.effective,
                                   precession(cfg, -comp.duration) @ u, atol=1e-14)
        assert 0 <= comp.delay <= cfg.precession_period
        assert 0 <= comp.power <= cfg.max_rotation_power


def test_composite_half_6t():
    cfg = SimConfig()
    half = calibrate_composite_half(cfg)
    u = half.effective
    assert flip_fidelity(u @ u) >= 0.98
    pops = np.abs(u[:, 0]) ** 2
    np.testing.assert_allclose(pops, [0.5, 0.5], atol=0.01)


def test_composite_beats_single_pulse_at_9t():
    cfg = SimConfig.field_9t()
    _, single = best_single_pulse_flip(cfg)
    assert calibrate_composite_flip(cfg).fidelity > single


def test_calibration_deterministic():
    cfg = SimConfig(purcell_factor=4.0)  # fresh cache entry
    a = calibrate_composite_flip(cfg)
    calibrate_composite_flip.cache_clear()
    b = calibrate_composite_flip(cfg)
    assert (a.power, a.delay, a.fidelity) == (b.power, b.delay, b.fidelity)


def test_effective_composite_vectorized():
    cfg = SimConfig()
    comp = calibrate_composite_half(cfg)
    scales = np.array([0.9, 1.0, 1.1])
    batch = effective_composite(cfg, comp.power, comp.delay, scales)
    for k, s in enumerate(scales):
        np.testing.assert_allclose(batch[k], effective_composite(cfg, comp.power, comp.delay, s),
                                   atol=1e-14)


def _check_sequence(seq):
    prev = 0.0
    for seg in seq.segments:
        assert seg.start >= prev - 1e-18 and seg.duration > 0
        prev = seg.end
    assert seq.span <= seq.repetition_period
    wins = sorted(seq.windows.values())
    for (a1, b1), (a2, b2) in zip(wins, wins[1:]):
        assert b1 <= a2
    for a, b in wins:
        for seg in seq.rotations():
            assert seg.end <= a or seg.start >= b


def test_timebin_builders():
    cfg = SimConfig()
    a, b = build_timebin(cfg, "A"), build_timebin(cfg, "B")
    for seq in (a, b):
        _check_sequence(seq)
        assert set(seq.windows) == {"gen1", "gen2", "readout"}
    assert len(b.rotations()) == len(a.rotations()) + 2
    flip = calibrate_composite_flip(cfg)
    extra = [s for s in b.rotations() if s.start >= b.windows["gen2"][1]]
    assert len(extra) == 2 and all(s.power == flip.power for s in extra)
    for seg in a.segments:
        if seg.label.startswith("generation") and seg.kind == "drive":
            assert seg.rabi * seg.duration == pytest.approx(math.pi)
    with pytest.raises(SequenceError):
        build_timebin(cfg, "C")


@pytest.mark.parametrize("mode", ["ghz", "cluster"])
def test_ghz_builder(mode):
    cfg = SimConfig()
    seq = build_ghz(cfg, 3, mode)
    _check_sequence(seq)
    assert sorted(seq.windows) == sorted([f"tau{k}" for k in range(1, 7)] + ["readout"])
    # initial, 3 x (pi + inter-photon), final: two pulses each
    assert len(seq.rotations()) == 2 * (2 + 2 * 3)
    with pytest.raises(SequenceError):
        build_ghz(cfg, 0)


def test_ramsey_builder():
    cfg = SimConfig()
    seq = build_ramsey(cfg, 1e-9, "half")
    _check_sequence(seq)
    r = seq.rotations()
    assert len(r) == 4
    comp = calibrate_composite_half(cfg)
    assert r[2].start - r[1].end == pytest.approx(1e-9)
    assert r[1].start - r[0].end == pytest.approx(comp.delay)
    assert len(build_ramsey(cfg, 0.0, "pi").rotations()) == 4
    with pytest.raises(SequenceError):
        build_ramsey(cfg, 1e-6)
    with pytest.raises(SequenceError):
        build_ramsey(cfg, -1e-12)
    with pytest.raises(SequenceError):
        build_ramsey(cfg, 0.0, "quarter")


def test_other_builders():
    cfg = SimConfig()
    for seq in (build_rabi(cfg, 1.0), build_spin_preparation(cfg, 10e-9),
                build_generation_pulse(cfg, 40e-12), build_storage(cfg, 2e-6)):
        _check_sequence(seq)
    assert build_storage(cfg, 2e-6).repetition_period >= 2e-6
    assert build_generation_pulse(cfg, 40e-12, rabi=0.0).segments[0].rabi == 0.0


def test_sequence_validation():
    with pytest.raises(SequenceError):
        PulseSegment("laser", 0.0, 1e-12)
    with pytest.raises(SequenceError):
        PulseSegment("delay", 0.0, 0.0)
    a = PulseSegment("delay", 0.0, 2e-12)
    b = PulseSegment("rotation", 1e-12, 2e-12, power=1.0)
    with pytest.raises(SequenceError):
        PulseSequence((a, b), 1e-9)
    r = PulseSegment("rotation", 0.0, 2e-12, power=1.0)
    with pytest.raises(SequenceError):
        PulseSequence((r,), 1e-9, {"w": (1e-12, 5e-12)})
    with pytest.raises(SequenceError):
        PulseSequence((PulseSegment("delay", 0.0, 2e-9),), 1e-9)


def test_describe_sequence():
    text = describe_sequence(build_timebin(SimConfig(), "A"))
    lines = text.splitlines()
    assert lines[0] == "sequence timebin-A"
    assert any(l.startswith("segment rotation") for l in lines)
    assert sum(l.startswith("window ") for l in lines) == 3
