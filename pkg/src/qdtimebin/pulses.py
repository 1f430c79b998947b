"""
Pulse segments, sequences, AC-Stark spin rotations and composite-rotation calibration.

Rotation pulses act on the ground spin only. During a pulse of length ``tau``
the spin sees ``H = (w_L/2) sz + (theta/(2 tau)) sx`` with
``theta = kappa * sqrt(power)``; when ``w_L * tau`` is not small the rotation
axis tilts towards z and a single pulse cannot flip the spin. Two pulses
separated by free precession (a composite rotation) recover a full flip.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .config import SimConfig
from .hilbert import DRIVEN, Transition


class SequenceError(ValueError):
    pass


KINDS = ("injection", "drive", "rotation", "delay")


@dataclass(frozen=True)
class PulseSegment:
    kind: str
    start: float
    duration: float
    rabi: float = 0.0
    detuning: float = 0.0
    target: Transition = DRIVEN
    power: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SequenceError(f"unknown segment kind {self.kind!r}")
        if not self.duration > 0:
            raise SequenceError(f"segment {self.label or self.kind} has non-positive duration")
        if self.kind == "rotation" and self.power < 0:
            raise SequenceError("rotation power must be >= 0")

    @property
    def end(self) -> float:
        return self.start + self.duration


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[PulseSegment, ...]
    repetition_period: float
    windows: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "windows", dict(self.windows))
        prev_end = 0.0
        for i, seg in enumerate(self.segments):
            if seg.start < prev_end - 1e-18:
                raise SequenceError(f"segment {i} ({seg.kind}) overlaps its predecessor")
            prev_end = seg.end
        for k, seg in enumerate(self.segments):
            if seg.kind == "injection" and k != 0:
                raise SequenceError("an injection segment must come first")
        wins = sorted(self.windows.items(), key=lambda kv: kv[1][0])
        for name, (a, b) in wins:
            if not 0 <= a < b <= self.repetition_period:
                raise SequenceError(f"window {name!r} outside the repetition")
            for seg in self.segments:
                if seg.kind == "rotation" and seg.start < b and seg.end > a:
                    raise SequenceError(f"window {name!r} overlaps a rotation pulse")
        for (n1, (_, b1)), (n2, (a2, _)) in zip(wins, wins[1:]):
            if a2 < b1:
                raise SequenceError(f"windows {n1!r} and {n2!r} overlap")
        if self.span > self.repetition_period:
            raise SequenceError(
                f"sequence span {self.span * 1e9:.3f} ns exceeds the repetition period "
                f"{self.repetition_period * 1e9:.3f} ns")

    @property
    def span(self) -> float:
        ends = [s.end for s in self.segments] + [b for _, b in self.windows.values()]
        return max(ends, default=0.0)

    @property
    def has_injection(self) -> bool:
        return bool(self.segments) and self.segments[0].kind == "injection"

    @property
    def start_time(self) -> float:
        """Time at which the emitter becomes live (end of injection, else 0)."""
        return self.segments[0].end if self.has_injection else 0.0

    def segment_at(self, t: float) -> PulseSegment | None:
        if not 0 <= t <= self.span:
            raise SequenceError(f"t = {t!r} s outside sequence span")
        for seg in self.segments:
            if seg.start <= t < seg.end:
                return seg
        return None

    def rotations(self) -> list[PulseSegment]:
        return [s for s in self.segments if s.kind == "rotation"]


def describe_sequence(seq: PulseSequence) -> str:
    """Human-readable listing, all times in integer-rounded picoseconds."""
    ps = lambda x: f"{x * 1e12:.3f}"
    lines = [f"sequence {seq.label or '-'}",
             f"repetition_period_ps {ps(seq.repetition_period)}",
             f"span_ps {ps(seq.span)}"]
    for seg in seq.segments:
        extra = ""
        if seg.kind == "drive":
            extra = (f" rabi_rad_per_ns={seg.rabi * 1e-9:.6g} detuning_rad_per_ns="
                     f"{seg.detuning * 1e-9:.6g} target={seg.target.name}")
        elif seg.kind == "rotation":
            extra = f" power={seg.power:.9g}"
        label = f" [{seg.label}]" if seg.label else ""
        lines.append(f"segment {seg.kind} start_ps={ps(seg.start)} duration_ps={ps(seg.duration)}{extra}{label}")
    for name, (a, b) in sorted(seq.windows.items(), key=lambda kv: kv[1][0]):
        lines.append(f"window {name} {ps(a)} {ps(b)}")
    return "\n".join(lines) + "\n"


# -- spin rotations --------------------------------------------------------------

def _su2(ax, az, angle_scale=1.0):
    """exp(-i (ax sx + az sz)) for array inputs, returned with shape (..., 2, 2)."""
    ax = np.asarray(ax, dtype=float)
    az = np.asarray(az, dtype=float)
    phi = np.hypot(ax, az)
    c = np.cos(phi)
    with np.errstate(invalid="ignore", divide="ignore"):
        sinc = np.where(phi > 0, np.sin(phi) / np.where(phi > 0, phi, 1.0), 1.0)
    u = np.empty(phi.shape + (2, 2), dtype=complex)
    u[..., 0, 0] = c - 1j * sinc * az
    u[..., 1, 1] = c + 1j * sinc * az
    u[..., 0, 1] = -1j * sinc * ax
    u[..., 1, 0] = -1j * sinc * ax
    return u


def rotation_unitary(config: SimConfig, power: float, duration: float,
                     area_scale: float = 1.0) -> np.ndarray:
    """Spin-subspace unitary (basis h, hbar) of one rectangular Stark pulse."""
    if power < 0:
        raise ValueError("power must be >= 0")
    if not duration > 0:
        raise ValueError("duration must be > 0")
    theta = config.rotation_angle(power) * area_scale
    return _su2(theta / 2, config.hole_splitting * duration / 2)


def precession(config: SimConfig, delay) -> np.ndarray:
    """Free spin evolution exp(-i (w_L/2) sz delay)."""
    return _su2(np.zeros_like(np.asarray(delay, dtype=float)),
                config.hole_splitting * np.asarray(delay, dtype=float) / 2)


def flip_fidelity(u: np.ndarray) -> float:
    return float(np.abs(u[..., 1, 0]) ** 2)


def half_fidelity(u: np.ndarray) -> float:
    """Overlap of U|h> with the closest equal superposition (relative phase free)."""
    return float(0.5 + np.abs(u[..., 0, 0]) * np.abs(u[..., 1, 0]))


@dataclass(frozen=True)
class CompositeRotation:
    target: str                 # "pi" or "half"
    power: float
    delay: float
    pulse_duration: float
    unitary: np.ndarray
    fidelity: float
    ok: bool
    effective: np.ndarray | None = None

    @property
    def duration(self) -> float:
        return 2 * self.pulse_duration + self.delay


def composite_unitary(config: SimConfig, power: float, delay: float,
                      area_scale: float = 1.0) -> np.ndarray:
    tau = config.rotation_duration
    u = rotation_unitary(config, power, tau, area_scale)
    return u @ precession(config, delay) @ u


def effective_composite(config: SimConfig, power: float, delay, area_scale=1.0) -> np.ndarray:
    """Composite unitary with the free precession over its duration removed.

    This is the net rotation seen in the frame co-precessing with the spin.
    """
    dur = 2 * config.rotation_duration + np.asarray(delay, dtype=float)
    return precession(config, -dur) @ composite_unitary(config, power, delay, area_scale)


def _composite_grid(config: SimConfig, powers, delays):
    tau = config.rotation_duration
    p, d = np.meshgrid(powers, delays, indexing="ij")
    u = _su2(config.stark_kappa * np.sqrt(p) / 2,
             np.full_like(p, config.hole_splitting * tau / 2))
    return precession(config, -(2 * tau + d)) @ u @ precession(config, d) @ u


def _half_score(u):
    u2 = u @ u
    return 0.5 * (0.5 + np.abs(u[..., 0, 0]) * np.abs(u[..., 1, 0])
                  + np.abs(u2[..., 1, 0]) ** 2)


def _flip_score(u):
    return np.abs(u[..., 1, 0]) ** 2


_SCORES = {"pi": _flip_score, "half": _half_score}
_FIDELITY = {"pi": flip_fidelity, "half": half_fidelity}


def calibrate_composite(config: SimConfig, target: str, n_power: int = 161,
                        n_delay: int = 61, threshold: float = 0.99,
                        tie: float = 1e-9) -> CompositeRotation:
    """Grid search over (power, inter-pulse delay), then bounded simplex refinement
    of every competitive grid local maximum.

    Candidates are scored on the co-precessing-frame unitary. The ``half``
    target averages the equal-superposition overlap of ``U|h>`` with the flip
    fidelity of ``U @ U`` so that the selected rotation axis lies in the
    equatorial plane. Among refined optima within ``tie`` of the best score
    the lowest power wins (least sensitive to area noise), then the shortest
    delay.
    """
    if target not in _SCORES:
        raise ValueError(f"unknown composite target {target!r}")
    score = _SCORES[target]
    period = config.precession_period
    pmax = config.max_rotation_power
    # uniform in pulse amplitude, so equivalent rotation angles tie exactly on the grid
    powers = np.linspace(0.0, math.sqrt(pmax), n_power) ** 2
    dmax = 0.0 if math.isinf(period) else period
    delays = np.linspace(0.0, dmax, n_delay) if dmax > 0 else np.array([0.0])
    s = score(_composite_grid(config, powers, delays))
    padded = np.pad(s, 1, constant_values=-np.inf)
    neigh = np.max([padded[1 + di:1 + di + s.shape[0], 1 + dj:1 + dj + s.shape[1]]
                    for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj], axis=0)
    starts = np.argwhere((s >= neigh) & (s >= s.max() - 0.05))

    def loss(x):
        p = min(max(x[0], 0.0), pmax)
        d = min(max(x[1], 0.0), dmax)
        return -float(score(effective_composite(config, p, d)))

    found = []
    for i, j in starts:
        x0 = np.array([powers[i], delays[j]])
        if dmax == 0.0:
            res = minimize(lambda x: loss([x[0], 0.0]), x0[:1], method="Nelder-Mead",
                           bounds=[(0.0, pmax)],
                           options=dict(xatol=1e-12, fatol=1e-15, maxiter=4000))
            x = (float(res.x[0]), 0.0)
        else:
            res = minimize(loss, x0, method="Nelder-Mead",
                           bounds=[(0.0, pmax), (0.0, dmax)],
                           options=dict(xatol=1e-16, fatol=1e-15, maxiter=4000))
            x = (min(max(float(res.x[0]), 0.0), pmax), min(max(float(res.x[1]), 0.0), dmax))
        if -loss(x) < s[i, j]:
            x = (float(x0[0]), float(x0[1]))
        found.append((-loss(x), x))
    top = max(f for f, _ in found)
    xp, xd = min((x for f, x in found if f >= top - tie), key=lambda x: (x[0], x[1]))
    u = composite_unitary(config, xp, xd)
    u.flags.writeable = False
    eff = effective_composite(config, xp, xd)
    eff.flags.writeable = False
    fid = _FIDELITY[target](eff)
    return CompositeRotation(target, xp, xd, config.rotation_duration, u, fid, fid >= threshold, eff)


@functools.lru_cache(maxsize=64)
def calibrate_composite_flip(config: SimConfig) -> CompositeRotation:
    return calibrate_composite(config, "pi")


@functools.lru_cache(maxsize=64)
def calibrate_composite_half(config: SimConfig) -> CompositeRotation:
    return calibrate_composite(config, "half")


def best_single_pulse_flip(config: SimConfig, n_power: int = 4001) -> tuple[float, float]:
    """(power, flip fidelity) of the best single pulse within the allowed power range."""
    powers = np.linspace(0.0, config.max_rotation_power, n_power)
    u = _su2(config.stark_kappa * np.sqrt(powers) / 2,
             np.full_like(powers, config.hole_splitting * config.rotation_duration / 2))
    f = np.abs(u[..., 1, 0]) ** 2
    k = int(np.argmax(f))
    return float(powers[k]), float(f[k])


# -- sequence builders -------------------------------------------------------------

class _Builder:
    def __init__(self, config: SimConfig, label: str):
        self.config = config
        self.label = label
        self.t = 0.0
        self.segments: list[PulseSegment] = []
        self.windows: dict[str, tuple[float, float]] = {}

    def add(self, kind, duration, **kw):
        seg = PulseSegment(kind, self.t, duration, **kw)
        self.segments.append(seg)
        self.t = seg.end
        return seg

    def wait(self, duration, label=""):
        if duration > 0:
            self.add("delay", duration, label=label)

    def inject(self):
        self.add("injection", self.config.injection_duration, label="injection")

    def drive(self, duration, rabi, label="", window=None, tail=None):
        start = self.t
        self.add("drive", duration, rabi=rabi, target=DRIVEN, label=label)
        tail = self.config.generation_tail if tail is None else tail
        self.wait(tail, label=f"{label} tail" if label else "tail")
        if window:
            self.windows[window] = (start, self.t)

    def rotation(self, power, label=""):
        self.add("rotation", self.config.rotation_duration, power=power, label=label)

    def composite(self, comp: CompositeRotation, label=""):
        self.rotation(comp.power, label=f"{label} 1" if label else "")
        self.wait(comp.delay, label="inter-pulse")
        self.rotation(comp.power, label=f"{label} 2" if label else "")

    def prepare(self):
        self.inject()
        self.drive(self.config.prep_duration, self.config.drive_rabi, label="preparation")

    def readout(self, window="readout"):
        self.drive(self.config.readout_duration, self.config.drive_rabi,
                   label="readout", window=window)

    def build(self, period: float | None = None) -> PulseSequence:
        period = self.config.repetition_period if period is None else period
        return PulseSequence(tuple(self.segments), period, self.windows, self.label)


def _composite_for(config: SimConfig, area: str) -> CompositeRotation:
    if area in ("half", "pi/2"):
        return calibrate_composite_half(config)
    if area in ("full", "pi"):
        return calibrate_composite_flip(config)
    raise SequenceError(f"unknown rotation area {area!r}")


def build_ramsey(config: SimConfig, delay: float, area: str = "half") -> PulseSequence:
    if delay < 0:
        raise SequenceError("Ramsey delay must be >= 0")
    comp = _composite_for(config, area)
    b = _Builder(config, f"ramsey-{area}")
    b.prepare()
    b.composite(comp, "ramsey 1")
    b.wait(delay, label="ramsey delay")
    b.composite(comp, "ramsey 2")
    b.readout()
    return b.build()


def build_timebin(config: SimConfig, variant: str = "A") -> PulseSequence:
    if variant not in ("A", "B"):
        raise SequenceError(f"unknown time-bin variant {variant!r}")
    half = calibrate_composite_half(config)
    flip = calibrate_composite_flip(config)
    b = _Builder(config, f"timebin-{variant}")
    b.prepare()
    b.composite(half, "pi/2")
    b.drive(config.generation_duration, config.generation_rabi, label="generation 1", window="gen1")
    b.composite(flip, "pi")
    b.drive(config.generation_duration, config.generation_rabi, label="generation 2", window="gen2")
    if variant == "B":
        b.composite(flip, "readout pi")
    b.readout()
    return b.build()


def build_ghz(config: SimConfig, n_photons: int, mode: str = "ghz") -> PulseSequence:
    """Two time bins per photon: gen, pi, gen, then the inter-photon rotation.

    The inter-photon rotation is a composite pi in ``ghz`` mode and a
    composite pi/2 in ``cluster`` mode; a final pi/2 precedes readout.
    """
    if n_photons < 1:
        raise SequenceError("need at least one photon")
    if mode not in ("ghz", "cluster"):
        raise SequenceError(f"unknown mode {mode!r}")
    half = calibrate_composite_half(config)
    flip = calibrate_composite_flip(config)
    b = _Builder(config, f"{mode}-{n_photons}")
    b.prepare()
    b.composite(half, "initial pi/2")
    for k in range(n_photons):
        b.drive(config.generation_duration, config.generation_rabi,
                label=f"generation {2 * k + 1}", window=f"tau{2 * k + 1}")
        b.composite(flip, "pi")
        b.drive(config.generation_duration, config.generation_rabi,
                label=f"generation {2 * k + 2}", window=f"tau{2 * k + 2}")
        b.composite(flip if mode == "ghz" else half, "inter-photon")
    b.composite(half, "final pi/2")
    b.readout()
    return b.build()


def build_rabi(config: SimConfig, power: float) -> PulseSequence:
    b = _Builder(config, "rabi")
    b.prepare()
    b.rotation(power, label="rotation")
    b.readout()
    return b.build()


def build_spin_preparation(config: SimConfig, drive_duration: float) -> PulseSequence:
    b = _Builder(config, "spin-preparation")
    b.inject()
    b.drive(drive_duration, config.drive_rabi, label="preparation", window="prep")
    return b.build()


def build_generation_pulse(config: SimConfig, duration: float, rabi: float | None = None,
                           tail: float | None = None) -> PulseSequence:
    """A single resonant pulse on the enhanced transition, no injection (caller sets the state)."""
    b = _Builder(config, "generation")
    rabi = math.pi / duration if rabi is None else rabi
    b.drive(duration, rabi, label="generation",
            window="pulse", tail=5.0 / config.trion_decay_rate if tail is None else tail)
    return b.build()


def build_storage(config: SimConfig, wait: float) -> PulseSequence:
    if wait < 0:
        raise SequenceError("wait must be >= 0")
    b = _Builder(config, "storage")
    b.inject()
    b.wait(wait, label="storage")
    # storage waits may exceed the usual repetition period; stretch it
    return b.build(max(config.repetition_period, 2 * b.t))
