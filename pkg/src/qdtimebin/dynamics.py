"""
Emitter time evolution: Lindblad master equation and quantum-jump trajectories.

Every pulse segment has a time-independent generator in the frame rotating
with the driven ``T <-> hbar`` line, so both solvers work interval by
interval. The master equation uses fixed-step RK4; for a constant generator
one RK4 step is the fourth-order Taylor polynomial of ``L dt``, so an
interval of ``n`` steps is that polynomial raised to the ``n``-th power.

Hole escape is state independent. ``propagate_master`` therefore returns the
state conditional on the hole still being present, while the counting
functions track an extra ``empty`` level so click probabilities include
injection failure and escape exactly.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.linalg import expm

from .config import SimConfig
from .estimators import TimeTagStream
from .hilbert import (EMITTER_DIM, TRANSITIONS, Level, Operator, QuantumState, Transition,
                      level_energies, lowering_operator)
from .pulses import PulseSegment, PulseSequence, SequenceError

log = logging.getLogger(__name__)

TRACE_DRIFT_TOL = 1e-8
EMPTY = 4  # index of the dark "no hole" level in the extended master-equation space


class StepSizeError(ValueError):
    pass


@dataclass(frozen=True)
class CollapseChannel:
    rate: float
    operator: Operator | None
    kind: str                       # radiative | dephasing | escape
    transition: Transition | None = None


def collapse_operators(config: SimConfig) -> list[CollapseChannel]:
    out = []
    for t in TRANSITIONS:
        rate = config.vertical_rate if t.kind == "vertical" else config.diagonal_rate
        out.append(CollapseChannel(rate, lowering_operator(t), "radiative", t))
    sz = np.diag([1.0, -1.0, 0.0, 0.0]) / math.sqrt(2)
    # L = sz/sqrt(2) at rate 1/T2* decays the h-hbar coherence as exp(-t/T2*)
    out.append(CollapseChannel(config.dephasing_rate, Operator(sz, hermitian=True), "dephasing"))
    out.append(CollapseChannel(1.0 / config.hole_escape_time, None, "escape"))
    return out


# -- Hamiltonians -----------------------------------------------------------------------

def free_hamiltonian(config: SimConfig) -> np.ndarray:
    return np.diag(level_energies(config.hole_splitting, config.trion_splitting_value)).astype(complex)


def segment_hamiltonian(config: SimConfig, seg: PulseSegment | None,
                        area_scale: float = 1.0) -> np.ndarray:
    h = free_hamiltonian(config)
    if seg is None or seg.kind in ("delay", "injection"):
        return h
    if seg.kind == "drive":
        up, lo = seg.target.upper, seg.target.lower
        h[up, lo] += seg.rabi / 2
        h[lo, up] += seg.rabi / 2
        h[up, up] -= seg.detuning
        return h
    if seg.kind == "rotation":
        x = config.rotation_angle(seg.power) * area_scale / (2 * seg.duration)
        h[Level.h, Level.hbar] += x
        h[Level.hbar, Level.h] += x
        return h
    raise SequenceError(f"unknown segment kind {seg.kind!r}")


def hamiltonian_at(config: SimConfig, seq: PulseSequence, t: float,
                   area_scale: float = 1.0) -> Operator:
    return Operator(segment_hamiltonian(config, seq.segment_at(t), area_scale), hermitian=True)


# -- timelines ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    segment: PulseSegment | None        # None = free evolution

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def key(self):
        s = self.segment
        if s is None:
            return ("free",)
        return (s.kind, s.rabi, s.detuning, s.target, s.power, s.duration)


def timeline(seq: PulseSequence, split_at=()) -> list[Interval]:
    """Alternating free / active intervals covering [0, span].

    Delay segments fold into free intervals and a (possibly zero-length) free
    interval sits between every pair of active segments, so sequences that
    differ only in timing share one interval structure. ``split_at`` adds extra
    cut points inside intervals.
    """
    out: list[Interval] = []
    t = 0.0
    for seg in seq.segments:
        if seg.kind == "delay":
            continue
        out.append(Interval(t, seg.start, None))
        out.append(Interval(seg.start, seg.end, seg))
        t = seg.end
    out.append(Interval(t, max(seq.span, t), None))
    cuts = sorted(set(float(c) for c in split_at))
    if not cuts:
        return out
    split: list[Interval] = []
    for iv in out:
        a = iv.start
        for c in cuts:
            if iv.start < c < iv.end:
                split.append(Interval(a, c, iv.segment))
                a = c
        split.append(Interval(a, iv.end, iv.segment))
    return split


# -- superoperators ------------------------------------------------------------------------

def _spre_post(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of rho -> a rho b in row-major vectorization."""
    return np.kron(a, b.T)


def _dissipator(l: np.ndarray) -> np.ndarray:
    d = l.shape[0]
    eye = np.eye(d)
    ldl = l.conj().T @ l
    return _spre_post(l, l.conj().T) - 0.5 * (_spre_post(ldl, eye) + _spre_post(eye, ldl))


def _extend(m: np.ndarray) -> np.ndarray:
    out = np.zeros((EMITTER_DIM + 1, EMITTER_DIM + 1), dtype=complex)
    out[:EMITTER_DIM, :EMITTER_DIM] = m
    return out


def _channel_matrices(config: SimConfig, extended: bool):
    """(rate, matrix, kind, transition) with matrices in the 4- or 5-level space."""
    out = []
    for ch in collapse_operators(config):
        if ch.rate == 0:
            continue
        if ch.kind == "escape":
            if not extended:
                continue
            for lvl in range(EMITTER_DIM):
                m = np.zeros((EMITTER_DIM + 1,) * 2, dtype=complex)
                m[EMPTY, lvl] = 1.0
                out.append((ch.rate, m, "escape", None))
            continue
        m = ch.operator.matrix
        out.append((ch.rate, _extend(m) if extended else np.array(m), ch.kind, ch.transition))
    return out


def liouvillian(config: SimConfig, seg: PulseSegment | None, area_scale: float = 1.0,
                extended: bool = False, remove_detected: bool = False) -> np.ndarray:
    """Lindblad generator; ``remove_detected`` drops the detected share of radiative jumps
    (the no-click conditional generator)."""
    h = segment_hamiltonian(config, seg, area_scale)
    if extended:
        h = _extend(h)
    d = h.shape[0]
    eye = np.eye(d)
    gen = -1j * (_spre_post(h, eye) - _spre_post(eye, h))
    for rate, m, kind, _ in _channel_matrices(config, extended):
        gen = gen + rate * _dissipator(m)
        if remove_detected and kind == "radiative":
            gen = gen - config.detection_efficiency * rate * _spre_post(m, m.conj().T)
    return gen


def radiative_jump_superop(config: SimConfig, extended: bool = True) -> np.ndarray:
    d = EMITTER_DIM + (1 if extended else 0)
    out = np.zeros((d * d, d * d), dtype=complex)
    for rate, m, kind, _ in _channel_matrices(config, extended):
        if kind == "radiative":
            out += rate * _spre_post(m, m.conj().T)
    return out


def rk4_step_matrix(gen: np.ndarray, h: float) -> np.ndarray:
    a = gen * h
    eye = np.eye(gen.shape[0], dtype=complex)
    a2 = a @ a
    return eye + a + a2 / 2 + a2 @ a / 6 + a2 @ a2 / 24


def rk4_propagator(gen: np.ndarray, duration: float, dt: float) -> np.ndarray:
    if duration <= 0:
        return np.eye(gen.shape[0], dtype=complex)
    n = max(1, math.ceil(duration / dt - 1e-9))
    return np.linalg.matrix_power(rk4_step_matrix(gen, duration / n), n)


AREA_NODES = 15


def area_quadrature(config: SimConfig, area_scale: float | None = None,
                    n_nodes: int = AREA_NODES):
    """(scales, weights) for one rotation pulse.

    A fixed ``area_scale`` gives a single node; ``None`` averages the pulse-area
    error with Gauss-Hermite quadrature. Errors of different pulses are
    independent, so averaging each rotation propagator separately is exact.
    """
    if area_scale is not None:
        return np.array([float(area_scale)]), np.array([1.0])
    if config.pulse_area_error == 0:
        return np.array([1.0]), np.array([1.0])
    x, w = hermegauss(n_nodes)
    return 1.0 + config.pulse_area_error * x, w / math.sqrt(2 * math.pi)


def interval_propagator(config: SimConfig, seg: PulseSegment | None, make_gen, duration: float,
                        dt: float, area_scale: float | None = None) -> np.ndarray:
    """RK4 propagator of ``make_gen(scale)``, noise-averaged on rotation segments."""
    if seg is None or seg.kind != "rotation":
        return rk4_propagator(make_gen(1.0), duration, dt)
    scales, weights = area_quadrature(config, area_scale)
    out = 0.0
    for sc, w in zip(scales, weights):
        out = out + w * rk4_propagator(make_gen(sc), duration, dt)
    return out


def _max_scale(config: SimConfig, area_scale: float | None) -> float:
    return float(np.max(np.abs(area_quadrature(config, area_scale)[0])))


def step_bound(config: SimConfig, seq: PulseSequence, area_scale: float | None = 1.0) -> float:
    """Largest admissible RK4 step: 1/20 of the fastest period or lifetime."""
    scales = [1.0 / config.vertical_rate] if config.vertical_rate > 0 else []
    if config.hole_splitting:
        scales.append(2 * math.pi / abs(config.hole_splitting))
    omegas = []
    for s in seq.segments:
        if s.kind == "drive" and s.rabi:
            omegas.append(abs(s.rabi))
        elif s.kind == "rotation" and s.power:
            omegas.append(abs(config.rotation_angle(s.power) * _max_scale(config, area_scale))
                          / s.duration)
    if omegas:
        scales.append(2 * math.pi / max(omegas))
    if not scales:
        # nothing evolves fast; any step resolves the dynamics
        scales.append(max(seq.span, 1e-12))
    return min(scales) / 20


def default_dt(config: SimConfig, seq: PulseSequence, area_scale: float | None = None) -> float:
    dt = step_bound(config, seq, area_scale) / 8
    if config.trion_splitting_value:
        dt = min(dt, 2 * math.pi / abs(config.trion_splitting_value) / 80)
    return dt


def _check_dt(config, seq, dt, area_scale):
    bound = step_bound(config, seq, area_scale)
    if dt is None:
        return default_dt(config, seq, area_scale)
    if not 0 < dt <= bound * (1 + 1e-12):
        raise StepSizeError(f"dt = {dt:.3e} s exceeds the step bound {bound:.3e} s")
    return dt


def _vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho, dtype=complex).reshape(-1)


def _trace_row(d: int) -> np.ndarray:
    return np.eye(d).reshape(-1)


def _spin_mixed(extended: bool, p_charged: float = 1.0) -> np.ndarray:
    d = EMITTER_DIM + (1 if extended else 0)
    rho = np.zeros((d, d), dtype=complex)
    rho[Level.h, Level.h] = rho[Level.hbar, Level.hbar] = p_charged / 2
    if extended:
        rho[EMPTY, EMPTY] = 1.0 - p_charged
    return rho


def propagate_master(rho: QuantumState, config: SimConfig, seq: PulseSequence,
                     t0: float, t1: float, dt: float | None = None,
                     area_scale: float | None = None) -> QuantumState:
    """Lindblad evolution from ``t0`` to ``t1`` with fixed-step RK4.

    The injection segment, if crossed, resets the spin to the maximally mixed
    state at its end. The returned state is conditional on the hole being present.
    """
    if not 0 <= t0 <= t1 <= seq.span + 1e-18:
        raise SequenceError("propagation window outside sequence span")
    dt = _check_dt(config, seq, dt, area_scale)
    state = rho.as_density()
    if state.n_bins:
        raise ValueError("propagate_master acts on the bare emitter")
    v = _vec(state.data)
    tr_row = _trace_row(EMITTER_DIM)
    for iv in timeline(seq):
        a, b = max(iv.start, t0), min(iv.end, t1)
        if b <= a:
            if iv.segment is not None and iv.segment.kind == "injection" and t0 <= iv.end <= t1:
                v = _vec(_spin_mixed(False))
            continue
        v = interval_propagator(config, iv.segment,
                                lambda sc, seg=iv.segment: liouvillian(config, seg, sc),
                                b - a, dt, area_scale) @ v
        if iv.segment is not None and iv.segment.kind == "injection" and b == iv.end:
            v = _vec(_spin_mixed(False))
        drift = abs((tr_row @ v).real - 1.0)
        if drift > TRACE_DRIFT_TOL:
            log.warning("trace drift %.3e in interval [%g, %g]; renormalizing", drift, a, b)
            v = v / (tr_row @ v).real
    m = v.reshape(EMITTER_DIM, EMITTER_DIM)
    m = (m + m.conj().T) / 2
    return QuantumState(m / np.trace(m).real)


# -- counting statistics on the extended space -------------------------------------------------------

def _initial_extended(config: SimConfig, seq: PulseSequence, initial: QuantumState | None):
    if seq.has_injection:
        return _vec(_spin_mixed(True, config.hole_injection_prob)), seq.start_time
    if initial is None:
        raise ValueError("sequence without injection needs an initial state")
    rho = np.zeros((EMITTER_DIM + 1,) * 2, dtype=complex)
    rho[:EMITTER_DIM, :EMITTER_DIM] = initial.as_density().data
    return _vec(rho), 0.0


@dataclass(frozen=True)
class WindowExpectations:
    detected: dict
    emitted: dict
    charged_final: float
    final_state: QuantumState | None


def window_expectations(config: SimConfig, seq: PulseSequence, area_scale: float | None = None,
                        initial: QuantumState | None = None, dt: float | None = None,
                        windows=None) -> WindowExpectations:
    """Expected detected and emitted photons per repetition in each named window."""
    dt = _check_dt(config, seq, dt, area_scale)
    names = list(seq.windows if windows is None else windows)
    edges = [x for n in names for x in seq.windows[n]]
    v0, t_live = _initial_extended(config, seq, initial)
    d2 = (EMITTER_DIM + 1) ** 2
    nw = len(names)
    jump_row = _trace_row(EMITTER_DIM + 1) @ radiative_jump_superop(config)
    z = np.concatenate([v0, np.zeros(2 * nw, dtype=complex)])
    for iv in timeline(seq, split_at=edges + [t_live]):
        if iv.end <= t_live or iv.duration <= 0:
            continue
        inside = [k for k, n in enumerate(names)
                  if seq.windows[n][0] <= iv.start and iv.end <= seq.windows[n][1]]

        def make(sc, seg=iv.segment, inside=inside):
            gen = np.zeros((d2 + 2 * nw, d2 + 2 * nw), dtype=complex)
            gen[:d2, :d2] = liouvillian(config, seg, sc, extended=True)
            for k in inside:
                gen[d2 + k, :d2] = config.detection_efficiency * jump_row
                gen[d2 + nw + k, :d2] = jump_row
            return gen

        z = interval_propagator(config, iv.segment, make, iv.duration, dt, area_scale) @ z
    rho = z[:d2].reshape(EMITTER_DIM + 1, EMITTER_DIM + 1)
    charged = float(np.trace(rho[:EMITTER_DIM, :EMITTER_DIM]).real)
    final = None
    if charged > 1e-12:
        m = rho[:EMITTER_DIM, :EMITTER_DIM] / charged
        final = QuantumState((m + m.conj().T) / 2)
    det = {n: float(z[d2 + k].real) for k, n in enumerate(names)}
    emi = {n: float(z[d2 + nw + k].real) for k, n in enumerate(names)}
    return WindowExpectations(det, emi, charged, final)


def extended_propagator(config: SimConfig, seq: PulseSequence, t0: float, t1: float,
                        area_scale: float | None = None, dt: float | None = None) -> np.ndarray:
    """Superoperator on the extended (charged + empty) space from ``t0`` to ``t1``.

    Injection resets are not applied; start after the injection segment.
    """
    dt = _check_dt(config, seq, dt, area_scale)
    d2 = (EMITTER_DIM + 1) ** 2
    out = np.eye(d2, dtype=complex)
    for iv in timeline(seq, split_at=[t0, t1]):
        if iv.start < t0 or iv.end > t1 or iv.duration <= 0:
            continue
        out = interval_propagator(
            config, iv.segment, lambda sc, seg=iv.segment: liouvillian(config, seg, sc, extended=True),
            iv.duration, dt, area_scale) @ out
    return out


def extended_state(config: SimConfig, seq: PulseSequence, t: float,
                   area_scale: float | None = None,
                   initial: QuantumState | None = None, dt: float | None = None) -> np.ndarray:
    """Vectorized extended density matrix at time ``t`` (from injection or ``initial``)."""
    v0, t_live = _initial_extended(config, seq, initial)
    if t < t_live:
        raise SequenceError("requested time precedes the end of injection")
    return extended_propagator(config, seq, t_live, t, area_scale, dt) @ v0


def window_functional(config: SimConfig, seq: PulseSequence, t0: float, window: str,
                      area_scale: float | None = None, dt: float | None = None) -> np.ndarray:
    """Row vector ``f`` with expected detected counts in ``window`` = ``f @ v(t0)``.

    The window must start at or after ``t0``; everything after ``t0`` enters.
    """
    dt = _check_dt(config, seq, dt, area_scale)
    wa, wb = seq.windows[window]
    if wa < t0:
        raise SequenceError("window starts before the functional origin")
    d2 = (EMITTER_DIM + 1) ** 2
    jrow = config.detection_efficiency * (_trace_row(EMITTER_DIM + 1) @ radiative_jump_superop(config))
    total = np.eye(d2 + 1, dtype=complex)
    for iv in timeline(seq, split_at=[t0, wa, wb]):
        if iv.start < t0 or iv.duration <= 0:
            continue
        inside = wa <= iv.start and iv.end <= wb

        def make(sc, seg=iv.segment, inside=inside):
            gen = np.zeros((d2 + 1, d2 + 1), dtype=complex)
            gen[:d2, :d2] = liouvillian(config, seg, sc, extended=True)
            if inside:
                gen[d2, :d2] = jrow
            return gen

        total = interval_propagator(config, iv.segment, make, iv.duration, dt, area_scale) @ total
    return total[d2, :d2]


@dataclass(frozen=True)
class CoincidenceMoments:
    mean_gen: float             # E[n_gen]
    p_read: float               # P(at least one readout click)
    mean_joint: float           # E[n_gen * 1{readout click}]

    @property
    def correlation(self) -> float:
        return self.mean_joint / (self.mean_gen * self.p_read)


def coincidence_moments(config: SimConfig, seq: PulseSequence, gen_window: str,
                        read_window: str, area_scale: float | None = None,
                        initial: QuantumState | None = None,
                        dt: float | None = None) -> CoincidenceMoments:
    """Exact single-repetition moments behind the degree of correlation.

    Three blocks are propagated together: ``y`` (the state), ``w`` (the state
    with detected readout clicks removed) and ``x`` (sum over detected
    generation-window jumps of the post-jump state, then propagated without
    readout clicks). ``tr x`` at the end is ``E[n_gen 1{no readout click}]``.
    """
    dt = _check_dt(config, seq, dt, area_scale)
    ga, gb = seq.windows[gen_window]
    ra, rb = seq.windows[read_window]
    if gb > ra:
        raise SequenceError("generation window must precede the readout window")
    v0, t_live = _initial_extended(config, seq, initial)
    d2 = (EMITTER_DIM + 1) ** 2
    eta_j = config.detection_efficiency * radiative_jump_superop(config)
    z = np.concatenate([np.zeros(d2, complex), v0, v0])     # x, y, w
    for iv in timeline(seq, split_at=[ga, gb, ra, rb, t_live]):
        if iv.end <= t_live or iv.duration <= 0:
            continue
        in_read = ra <= iv.start and iv.end <= rb
        in_gen = ga <= iv.start and iv.end <= gb

        def make(sc, seg=iv.segment, in_read=in_read, in_gen=in_gen):
            full = liouvillian(config, seg, sc, extended=True)
            nc = liouvillian(config, seg, sc, extended=True,
                             remove_detected=True) if in_read else full
            gen = np.zeros((3 * d2, 3 * d2), dtype=complex)
            gen[:d2, :d2] = nc
            if in_gen:
                gen[:d2, d2:2 * d2] = eta_j
            gen[d2:2 * d2, d2:2 * d2] = full
            gen[2 * d2:, 2 * d2:] = nc
            return gen

        z = interval_propagator(config, iv.segment, make, iv.duration, dt, area_scale) @ z
    tr = _trace_row(EMITTER_DIM + 1)
    no_click = float((tr @ z[2 * d2:]).real)
    counts = window_expectations(config, seq, area_scale, initial, dt, windows=[gen_window])
    mean_gen = counts.detected[gen_window]
    joint = mean_gen - float((tr @ z[:d2]).real)
    return CoincidenceMoments(mean_gen, 1.0 - no_click, joint)


def emission_rate_trace(config: SimConfig, seq: PulseSequence, t0: float, t1: float,
                        n_points: int, rho0: QuantumState, dt: float | None = None,
                        area_scale: float | None = None):
    """Total radiative emission rate on a uniform grid, for a constant-generator stretch.

    Returns (times, rates, final state); [t0, t1] must lie inside one interval.
    """
    dt = _check_dt(config, seq, dt, area_scale)
    seg = seq.segment_at(0.5 * (t0 + t1))
    times = np.linspace(t0, t1, n_points)
    step = interval_propagator(config, seg, lambda sc: liouvillian(config, seg, sc),
                               times[1] - times[0], dt, area_scale)
    jrow = _trace_row(EMITTER_DIM) @ radiative_jump_superop(config, extended=False)
    v = _vec(rho0.as_density().data)
    rates = np.empty(n_points)
    for k in range(n_points):
        if k:
            v = step @ v
        rates[k] = (jrow @ v).real
    m = v.reshape(EMITTER_DIM, EMITTER_DIM)
    return times, rates, QuantumState((m + m.conj().T) / 2 / np.trace(m).real)


# -- quantum-jump trajectories ------------------------------------------------------------------

@dataclass(frozen=True)
class Jump:
    time: float
    transition: Transition
    detected: bool


@dataclass(frozen=True)
class JumpRecord:
    jumps: tuple
    final_label: str          # a Level name, or "empty" when no hole is present
    seed: int
    charged: bool
    final_state: np.ndarray | None = None

    def populations(self) -> np.ndarray | None:
        if self.final_state is None:
            return None
        return np.abs(self.final_state) ** 2


def trajectory_seed(master_seed: int, index: int) -> int:
    """64-bit child seed for trajectory ``index``; independent of any other index."""
    ss = np.random.SeedSequence(int(master_seed) & (2**64 - 1), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def _mv(m, v):
    """Batched 4x4 matrix-vector product with a fixed summation order.

    ``m`` is (4,4) or (n,4,4), ``v`` is (n,4). Explicit sums keep every
    trajectory's arithmetic independent of how many trajectories share the call.
    """
    if m.ndim == 2:
        return (m[None, :, 0] * v[:, 0, None] + m[None, :, 1] * v[:, 1, None]
                + m[None, :, 2] * v[:, 2, None] + m[None, :, 3] * v[:, 3, None])
    return (m[:, :, 0] * v[:, 0, None] + m[:, :, 1] * v[:, 1, None]
            + m[:, :, 2] * v[:, 2, None] + m[:, :, 3] * v[:, 3, None])


def _norm2(v):
    a = v.real * v.real + v.imag * v.imag
    return a[:, 0] + a[:, 1] + a[:, 2] + a[:, 3]


class _NoJumpPropagator:
    """exp(-i H_eff t) on batches of states via eigendecomposition (expm fallback).

    ``heff`` is one (4,4) matrix or a stack (n,4,4) with one matrix per
    trajectory; ``rows`` selects the stack entries matching the batch.
    """

    def __init__(self, heff: np.ndarray):
        self.heff = heff
        self.stacked = heff.ndim == 3
        lam, vec = np.linalg.eig(heff)
        cond = np.linalg.cond(vec)
        self.use_eig = bool(np.all(np.isfinite(cond)) and np.max(cond) < 1e8)
        if self.use_eig:
            self.lam, self.vec, self.inv = lam, vec, np.linalg.inv(vec)

    def _pick(self, a, rows):
        return a[rows] if self.stacked else a

    def coefficients(self, psi, rows):
        return _mv(self._pick(self.inv, rows), psi) if self.use_eig else psi

    def apply(self, coeff, tau, rows):
        if self.use_eig:
            lam = self._pick(self.lam, rows)
            e = np.exp(-1j * (lam if lam.ndim == 2 else lam[None, :]) * tau[:, None])
            return _mv(self._pick(self.vec, rows), coeff * e)
        h = self._pick(self.heff, rows)
        u = expm(-1j * (h if h.ndim == 3 else h[None]) * tau[:, None, None])
        return _mv(u, coeff)


_MAX_ROOT_ITER = 80
_BUFFER = 32


class _UniformBuffer:
    """Per-trajectory uniforms taken in stream order, refilled in blocks."""

    def __init__(self, rngs):
        self.rngs = rngs
        self.buf = np.empty((len(rngs), _BUFFER))
        self.ptr = np.full(len(rngs), _BUFFER)

    def take(self, idx: np.ndarray) -> np.ndarray:
        for i in idx[self.ptr[idx] >= _BUFFER]:
            self.buf[i] = self.rngs[i].random(_BUFFER)
            self.ptr[i] = 0
        out = self.buf[idx, self.ptr[idx]]
        self.ptr[idx] += 1
        return out


def _jump_times(prop, coeff, rows, n0, r, span, loss):
    """Solve ||psi(t)||^2 = r on (0, span] per row by safeguarded Newton on log-norm.

    Rows are frozen once converged, so each result depends only on its own data.
    """
    lo = np.zeros(len(r))
    hi = span.copy()
    n_end = _norm2(prop.apply(coeff, hi, rows))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = span * (np.log(n0) - np.log(r)) / (np.log(n0) - np.log(n_end))
    t = np.where(np.isfinite(t) & (t > 0) & (t < span), t, 0.5 * span)
    todo = np.ones(len(r), dtype=bool)
    log_r = np.log(r)
    for _ in range(_MAX_ROOT_ITER):
        k = np.flatnonzero(todo)
        if k.size == 0:
            break
        sub = rows[k] if rows is not None else None
        psi = prop.apply(coeff[k], t[k], sub)
        nrm = _norm2(psi)
        f = np.log(nrm) - log_r[k]
        lpsi = _mv(loss, psi)
        rate = (psi.conj() * lpsi).real.sum(axis=1) / nrm
        above = f > 0
        lo[k] = np.where(above, t[k], lo[k])
        hi[k] = np.where(above, hi[k], t[k])
        with np.errstate(divide="ignore", invalid="ignore"):
            step = t[k] + f / rate
        bad = ~np.isfinite(step) | (step <= lo[k]) | (step >= hi[k])
        new = np.where(bad, 0.5 * (lo[k] + hi[k]), step)
        done = (np.abs(f) < 1e-13) | (hi[k] - lo[k] <= 1e-15 * span[k])
        t[k] = np.where(done, t[k], new)
        todo[k[done]] = False
    return t


class _Engine:
    def __init__(self, config: SimConfig):
        self.config = config
        chans = _channel_matrices(config, extended=False)
        self.chans = [(rate, m, kind, t) for rate, m, kind, t in chans]
        self.rates = np.array([c[0] for c in self.chans])
        self.radiative = np.array([c[2] == "radiative" for c in self.chans])
        self.loss = sum(rate * (m.conj().T @ m) for rate, m, _, _ in self.chans) \
            if self.chans else np.zeros((4, 4), complex)

    def heff(self, seg, area_scale):
        if seg is not None and seg.kind == "rotation" and area_scale is not None:
            base = segment_hamiltonian(self.config, seg, 1.0) - 0.5j * self.loss
            x = self.config.rotation_angle(seg.power) / (2 * seg.duration)
            out = np.repeat(base[None], len(area_scale), axis=0)
            out[:, Level.h, Level.hbar] += x * (area_scale - 1.0)
            out[:, Level.hbar, Level.h] += x * (area_scale - 1.0)
            return out
        return segment_hamiltonian(self.config, seg, 1.0) - 0.5j * self.loss


def _simulate(config: SimConfig, seqs: list[PulseSequence], seeds: list[int],
              initial: QuantumState | None) -> list[JumpRecord]:
    """Quantum-jump trajectories, one per (sequence, seed) pair, processed in lockstep.

    All sequences must share one interval structure (they may differ in timing).
    Per trajectory the random draws are, in order: injection, initial spin,
    escape time, one area error per rotation pulse, first jump threshold; then
    per jump: channel, detection (radiative only), next threshold.
    """
    n = len(seeds)
    cache = {}
    lines = [cache[id(s)] if id(s) in cache else cache.setdefault(id(s), timeline(s)) for s in seqs]
    keys = [iv.key for iv in lines[0]]
    for ln in lines[1:]:
        if [iv.key for iv in ln] != keys:
            raise SequenceError("batched sequences must share one interval structure")
    eng = _Engine(config)
    rngs = [_rng(s) for s in seeds]
    seq0 = seqs[0]
    has_inj = seq0.has_injection
    sigma = config.pulse_area_error
    psi = np.zeros((n, EMITTER_DIM), dtype=complex)
    charged = np.ones(n, dtype=bool)
    escape_at = np.empty(n)
    n_rot = sum(1 for iv in lines[0] if iv.segment is not None and iv.segment.kind == "rotation")
    area = np.ones((n, n_rot))
    thresh = np.empty(n)
    t_live = np.array([s.start_time for s in seqs])
    if not has_inj:
        if initial is None:
            raise ValueError("sequence without injection needs an initial state")
        init = initial.as_density()
        w, vecs = np.linalg.eigh(init.data)
        w = np.clip(w, 0, None)
        cum = np.cumsum(w) / w.sum()
    for i, g in enumerate(rngs):
        u_inj, u_spin = g.random(), g.random()
        escape_at[i] = t_live[i] + g.exponential(config.hole_escape_time)
        area[i] = 1.0 + sigma * g.standard_normal(n_rot)
        thresh[i] = g.random()
        if has_inj:
            charged[i] = u_inj < config.hole_injection_prob
            psi[i, Level.h if u_spin < 0.5 else Level.hbar] = 1.0
        else:
            k = min(int(np.searchsorted(cum, u_spin, side="right")), len(w) - 1)
            psi[i] = vecs[:, k]
    uniforms = _UniformBuffer(rngs)
    jumps: list[list[Jump]] = [[] for _ in range(n)]
    alive = charged.copy()
    rot = 0
    for j, key in enumerate(keys):
        seg = lines[0][j].segment
        area_arg = None
        if seg is not None and seg.kind == "rotation":
            area_arg = area[:, rot] if sigma > 0 else None
            rot += 1
        starts = np.array([ln[j].start for ln in lines])
        ends = np.array([ln[j].end for ln in lines])
        starts = np.maximum(starts, t_live)
        stop = np.minimum(ends, escape_at)
        prop = _NoJumpPropagator(eng.heff(seg, area_arg))
        cur = starts.copy()
        while True:
            act = np.flatnonzero(alive & (stop > cur))
            if act.size == 0:
                break
            coeff = prop.coefficients(psi[act], act)
            remaining = stop[act] - cur[act]
            end_state = prop.apply(coeff, remaining, act)
            end_norm = _norm2(end_state)
            no_jump = end_norm > thresh[act]
            idx = act[no_jump]
            psi[idx] = end_state[no_jump]
            cur[idx] = stop[idx]
            jmp = ~no_jump
            if not jmp.any():
                continue
            jidx = act[jmp]
            jc = coeff[jmp]
            n0 = _norm2(psi[jidx])
            tj = _jump_times(prop, jc, jidx if prop.stacked else None, n0, thresh[jidx],
                             remaining[jmp], eng.loss)
            state = prop.apply(jc, tj, jidx)
            cur[jidx] = cur[jidx] + tj
            after = np.stack([_mv(m, state) for _, m, _, _ in eng.chans], axis=1)
            cum = np.cumsum(eng.rates[None, :] * _norm2(after.reshape(-1, EMITTER_DIM))
                            .reshape(jidx.size, -1), axis=1)
            x = uniforms.take(jidx) * cum[:, -1]
            c = np.minimum((cum <= x[:, None]).sum(axis=1), cum.shape[1] - 1)
            new = after[np.arange(jidx.size), c]
            psi[jidx] = new / np.sqrt(_norm2(new))[:, None]
            rad = eng.radiative[c]
            ridx = jidx[rad]
            det = uniforms.take(ridx) < config.detection_efficiency
            for i, ch, d in zip(ridx, c[rad], det):
                jumps[i].append(Jump(float(cur[i]), eng.chans[ch][3], bool(d)))
            thresh[jidx] = uniforms.take(jidx)
        escaped = alive & (escape_at <= ends)
        alive &= ~escaped

    out = []
    for i in range(n):
        if alive[i]:
            v = psi[i] / math.sqrt(_norm2(psi[i:i + 1])[0])
            label = Level(int(np.argmax(np.abs(v) ** 2))).name
            out.append(JumpRecord(tuple(jumps[i]), label, int(seeds[i]), True, v))
        else:
            out.append(JumpRecord(tuple(jumps[i]), "empty", int(seeds[i]), False, None))
    return out


def run_trajectory(config: SimConfig, seq: PulseSequence, seed: int,
                   initial: QuantumState | None = None) -> JumpRecord:
    return _simulate(config, [seq], [seed], initial)[0]


@dataclass(frozen=True)
class EnsembleStats:
    means: dict
    stderrs: dict
    count: int
    master_seed: int

    def __getitem__(self, key):
        return self.means[key], self.stderrs[key]


def _mean_se(values: np.ndarray):
    values = np.asarray(values, float)
    if values.size == 0:
        return math.nan, math.nan
    if values.size == 1:
        return float(values[0]), math.nan
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def records_to_stream(seq: PulseSequence, records: list[JumpRecord]) -> TimeTagStream:
    period_ps = int(round(seq.repetition_period * 1e12))
    windows = {k: (int(round(a * 1e12)), int(round(b * 1e12))) for k, (a, b) in seq.windows.items()}
    reps = []
    for rec in records:
        reps.append(tuple((min(int(round(j.time * 1e12)), period_ps - 1), j.transition.name)
                          for j in rec.jumps if j.detected))
    return TimeTagStream(period_ps, windows, tuple(reps))


def ensemble_stats(seq: PulseSequence, records: list[JumpRecord], master_seed: int) -> EnsembleStats:
    means, errs = {}, {}
    for name, (a, b) in seq.windows.items():
        det = np.array([sum(1 for j in r.jumps if j.detected and a <= j.time < b) for r in records])
        emi = np.array([sum(1 for j in r.jumps if a <= j.time < b) for r in records])
        means[f"detected_{name}"], errs[f"detected_{name}"] = _mean_se(det)
        means[f"emitted_{name}"], errs[f"emitted_{name}"] = _mean_se(emi)
    charged = np.array([r.charged for r in records], float)
    means["charged"], errs["charged"] = _mean_se(charged)
    pops = np.array([r.populations() for r in records if r.charged])
    for lvl in Level:
        col = pops[:, lvl] if len(pops) else np.array([])
        means[f"pop_{lvl.name}"], errs[f"pop_{lvl.name}"] = _mean_se(col)
    return EnsembleStats(means, errs, len(records), int(master_seed))


def simulate_ensemble(config: SimConfig, seqs, master_seed: int, n: int,
                      initial: QuantumState | None = None, threads: int = 1,
                      chunk: int = 2048, offset: int = 0) -> list[JumpRecord]:
    """Records for trajectory indices ``offset .. offset+n-1``.

    ``seqs`` is one sequence or a list of ``n`` timing variants sharing an
    interval structure. Chunks may run on several threads; each record depends
    only on its own seed, so results do not depend on ``threads`` or ``chunk``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(seqs, PulseSequence):
        seqs = [seqs] * n
    seeds = [trajectory_seed(master_seed, offset + i) for i in range(n)]
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]

    def work(ab):
        a, b = ab
        return _simulate(config, list(seqs[a:b]), seeds[a:b], initial)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, bounds))
    else:
        parts = [work(ab) for ab in bounds]
    return [r for part in parts for r in part]


def run_ensemble(config: SimConfig, seq: PulseSequence, n: int, master_seed: int,
                 initial: QuantumState | None = None, threads: int = 1,
                 chunk: int = 2048) -> tuple[EnsembleStats, TimeTagStream]:
    records = simulate_ensemble(config, seq, master_seed, n, initial, threads, chunk)
    return ensemble_stats(seq, records, master_seed), records_to_stream(seq, records)
