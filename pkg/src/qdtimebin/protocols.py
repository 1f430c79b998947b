"""
In-silico experiments: spin pumping, Rabi, Ramsey, time-bin correlations,
multi-photon entanglement, photon-number statistics and hole storage.

Most protocols offer two evolution paths. ``method="master"`` integrates the
Lindblad equation with every rotation propagator averaged over its area
error; ``method="trajectory"`` samples quantum jumps and draws one area error
per rotation pulse.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import minimize

from . import dynamics as dyn
from .config import SimConfig
from .estimators import (FitError, TimeTagStream, fit_exponential_envelope, fit_sinusoid,
                         fringe_frequency, timebin_correlations)
from .hilbert import EMITTER_DIM, Level, QuantumState, RegisterState, register_vector
from .pulses import (SequenceError, build_generation_pulse, build_ghz, build_rabi,
                     build_ramsey, build_spin_preparation, build_storage, build_timebin,
                     effective_composite, precession, rotation_unitary)

MAX_GHZ_PHOTONS = 4
METHODS = ("master", "trajectory")


@dataclass(frozen=True)
class Observable:
    value: float
    stderr: float | None = None
    count: int | None = None        # trajectories behind an ensemble estimate

    def __float__(self):
        return float(self.value)


@dataclass
class ProtocolResult:
    name: str
    scalars: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)       # name -> {column: array}
    states: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __getitem__(self, key) -> Observable:
        return self.scalars[key]

    def set(self, key, value, stderr=None, count=None):
        if count is not None and stderr is None:
            raise ValueError(f"ensemble scalar {key!r} needs a standard error")
        self.scalars[key] = Observable(float(value), None if stderr is None else float(stderr),
                                       None if count is None else int(count))

    def to_text(self) -> str:
        out = [f"protocol {self.name}"]
        for k, v in self.notes.items():
            out.append(f"note {k} {v}")
        for k, o in self.scalars.items():
            line = f"scalar {k} {o.value:.12g}"
            if o.stderr is not None:
                line += f" stderr {o.stderr:.6g}"
            if o.count is not None:
                line += f" n {o.count}"
            out.append(line)
        for k, t in self.traces.items():
            out.append(f"trace {k} columns {','.join(t)} rows {len(next(iter(t.values())))}")
        return "\n".join(out) + "\n"

    def trace_csv(self, name: str) -> str:
        cols = self.traces[name]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        data = np.column_stack([np.asarray(v, float) for v in cols.values()])
        np.savetxt(buf, data, delimiter=",", fmt="%.12g")
        return buf.getvalue()


def _check_method(method):
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, not {method!r}")


def _spin_mixed_state() -> QuantumState:
    return QuantumState(np.diag([0.5, 0.5, 0.0, 0.0]).astype(complex))


# -- spin preparation ------------------------------------------------------------

def spin_preparation_trace(config: SimConfig, drive_duration: float, n_points: int = 400,
                           method: str = "master", n: int = 10000, seed: int = 0,
                           threads: int = 1) -> ProtocolResult:
    """Emission while optically pumping out of ``hbar`` from a mixed spin.

    The exponential tail of the emission rate gives the pumping rate, compared
    with the rate-equation prediction.
    """
    if not drive_duration > 0:
        raise ValueError("drive duration must be > 0")
    _check_method(method)
    seq = build_spin_preparation(config, drive_duration)
    a, b = seq.windows["prep"]
    t_drive_end = a + drive_duration
    res = ProtocolResult("spin_preparation")
    res.set("pumping_rate_oracle", config.pumping_rate)
    if method == "master":
        times, rate, final = dyn.emission_rate_trace(config, seq, a, t_drive_end, n_points,
                                                     _spin_mixed_state())
        res.traces["emission"] = {"time_ns": (times - a) * 1e9, "rate_per_ns": rate * 1e-9}
        res.set("final_h_population", final.populations()[Level.h])
        t_rel = times - a
        # skip the coherent transient, keep the tail above numerical noise
        sel = (t_rel >= 10.0 / config.trion_decay_rate) & (rate > rate[0] * 1e-6)
        fit_rate = 0.0
        if sel.sum() >= 3 and rate[sel][-1] < rate[sel][0] * (1 - 1e-6):
            try:
                fit_rate = 1.0 / fit_exponential_envelope(t_rel[sel], rate[sel])["tau"]
            except FitError:
                fit_rate = 0.0
        res.set("pumping_rate", fit_rate)
        res.set("pumping_time", math.inf if fit_rate == 0 else 1.0 / fit_rate)
        return res
    records = dyn.simulate_ensemble(config, seq, seed, n, initial=None, threads=threads)
    charged = [r for r in records if r.charged]
    if not charged:
        raise RuntimeError("no charged repetitions")
    pops = np.array([r.populations()[Level.h] for r in charged])
    res.set("final_h_population", pops.mean(), pops.std(ddof=1) / math.sqrt(len(pops)), len(pops))
    # photons emitted during the drive, per charged repetition
    em = np.array([sum(1 for j in r.jumps if a <= j.time <= t_drive_end) for r in charged], float)
    res.set("emitted_per_charged", em.mean(), em.std(ddof=1) / math.sqrt(len(em)), len(em))
    return res


def spin_preparation_emitted_master(config: SimConfig, drive_duration: float) -> float:
    """Mean photons emitted during the pumping drive per charged repetition."""
    seq = build_spin_preparation(config, drive_duration)
    a, _ = seq.windows["prep"]
    times, rate, _ = dyn.emission_rate_trace(config, seq, a, a + drive_duration, 4001,
                                             _spin_mixed_state())
    return float(simpson(rate, x=times))


# -- Rabi -------------------------------------------------------------------------

def rabi_experiment(config: SimConfig, powers, method: str = "master", n: int = 10000,
                    seed: int = 0, threads: int = 1) -> ProtocolResult:
    """Readout intensity after a single rotation pulse of each power."""
    powers = np.asarray(list(powers), float)
    if powers.size == 0 or np.any(powers < 0):
        raise ValueError("powers must be a non-empty list of non-negative values")
    _check_method(method)
    res = ProtocolResult("rabi")
    vals, errs = [], []
    for k, p in enumerate(powers):
        seq = build_rabi(config, float(p))
        if method == "master":
            v = dyn.window_expectations(config, seq, windows=["readout"]).detected["readout"]
            vals.append(v)
            errs.append(0.0)
        else:
            st, _ = dyn.run_ensemble(config, seq, n, _sub_seed(seed, k), threads=threads)
            m, e = st["detected_readout"]
            vals.append(m)
            errs.append(e)
    res.traces["rabi"] = {"sqrt_power_rel": np.sqrt(powers), "power_rel": powers,
                          "detected_per_rep": np.array(vals), "stderr_per_rep": np.array(errs)}
    for k, (v, e) in enumerate(zip(vals, errs)):
        if method == "master":
            res.set(f"intensity_{k}", v)
        else:
            res.set(f"intensity_{k}", v, e, n)
    return res


def _sub_seed(seed: int, k: int) -> int:
    return dyn.trajectory_seed(seed, 1_000_000_000 + k)


# -- Ramsey -------------------------------------------------------------------------

def _ramsey_master(config: SimConfig, delays, area: str) -> np.ndarray:
    # the free delay is the only delay-dependent piece: propagate to it once,
    # and contract with a readout functional taken from the second rotation on
    seq0 = build_ramsey(config, 0.0, area)
    rots = seq0.rotations()
    c1_end = rots[1].end
    dt = dyn.default_dt(config, seq0)
    free = dyn.liouvillian(config, None, extended=True)
    v1 = dyn.extended_state(config, seq0, c1_end, dt=dt)
    f = dyn.window_functional(config, seq0, c1_end, "readout", dt=dt)
    return np.array([float((f @ (dyn.rk4_propagator(free, d, dt) @ v1)).real) for d in delays])


def ramsey_experiment(config: SimConfig, delays, area: str = "half", n: int = 200,
                      method: str = "master", seed: int = 0, threads: int = 1,
                      n_chunks: int = 16) -> ProtocolResult:
    """Readout intensity against the delay between two composite rotations.

    ``n`` is the repetition count per delay on the trajectory path. The fits
    give the fringe frequency (periodogram peak), the visibility over the
    first delay chunk, the exponential envelope time from chunked fixed-
    frequency fits and the fringe amplitude at the Larmor frequency.
    """
    delays = np.asarray(list(delays), float)
    if delays.size == 0 or np.any(delays < 0):
        raise ValueError("delays must be non-negative")
    if n < 1:
        raise ValueError("n must be >= 1")
    _check_method(method)
    res = ProtocolResult(f"ramsey_{area}")
    if method == "master":
        y = _ramsey_master(config, delays, area)
        sigma = None
    else:
        seqs = [build_ramsey(config, float(d), area) for d in delays]
        per_traj = [s for s in seqs for _ in range(n)]
        recs = dyn.simulate_ensemble(config, per_traj, seed, len(per_traj), threads=threads)
        a, b = seqs[0].windows["readout"]
        counts = np.empty(len(recs))
        for i, (r, s) in enumerate(zip(recs, per_traj)):
            wa, wb = s.windows["readout"]
            counts[i] = sum(1 for j in r.jumps if j.detected and wa <= j.time < wb)
        counts = counts.reshape(len(delays), n)
        y = counts.mean(axis=1)
        sd = counts.std(axis=1, ddof=1) if n > 1 else np.full(len(delays), np.nan)
        # floor the per-point error at the Poisson error of a single expected count
        floor = math.sqrt(max(y.mean(), 1.0 / n) / n)
        sigma = np.maximum(sd / math.sqrt(n), floor)
    res.traces["ramsey"] = {"delay_ns": delays * 1e9, "detected_per_rep": y,
                            "stderr_per_rep": np.zeros_like(y) if sigma is None else sigma}
    larmor = abs(config.hole_splitting) / (2 * math.pi)
    if larmor > 0 and delays.size >= 4:
        fit = fit_sinusoid(delays, y, larmor, sigma)
        cnt = None if sigma is None else n * len(delays)
        err = fit.errors["amplitude"] if sigma is not None else None
        res.set("fringe_amplitude", fit.params["amplitude"], err, cnt)
        res.set("mean_intensity", fit.params["offset"], fit.errors["offset"] if sigma is not None else None, cnt)
        f, df = fringe_frequency(delays, y)
        res.set("fringe_frequency", f)
        res.set("frequency_bin", df)
        res.set("expected_frequency", larmor)
        _ramsey_envelope(res, delays, y, sigma, f, n_chunks)
    return res


def _ramsey_envelope(res, delays, y, sigma, freq, n_chunks):
    edges = np.linspace(delays.min(), delays.max(), n_chunks + 1)
    centers, amps, vis = [], [], []
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (delays >= a) & (delays <= b)
        if sel.sum() < 4:
            continue
        s = None if sigma is None else sigma[sel]
        fit = fit_sinusoid(delays[sel], y[sel], freq, s)
        centers.append(delays[sel].mean())
        amps.append(fit.params["amplitude"])
        vis.append(fit.params["amplitude"] / fit.params["offset"] if fit.params["offset"] > 0 else 0.0)
    if vis:
        res.set("visibility", vis[0])
    res.traces["envelope"] = {"delay_ns": np.array(centers) * 1e9, "amplitude_per_rep": np.array(amps),
                              "visibility_frac": np.array(vis)}
    amps = np.array(amps)
    if len(amps) >= 3 and np.all(amps > 0):
        try:
            env = fit_exponential_envelope(np.array(centers), amps)
            res.set("envelope_time", env["tau"])
            res.set("envelope_time_err", env.errors["tau"])
        except FitError:
            pass


# -- time-bin correlations -------------------------------------------------------------

def timebin_master(config: SimConfig, variant: str) -> dict:
    """Exact degrees of correlation of both generation windows with the readout."""
    seq = build_timebin(config, variant)
    out = {}
    for win in ("gen1", "gen2"):
        out[win] = dyn.coincidence_moments(config, seq, win, "readout").correlation
    out["p_first"] = out["gen1"] / (out["gen1"] + out["gen2"])
    out["p_second"] = 1.0 - out["p_first"]
    return out


def timebin_experiment(config: SimConfig, variant: str = "A", n_reps: int = 10000,
                       seed: int = 0, threads: int = 1, master: bool = True,
                       max_offset: int | None = None) -> tuple[ProtocolResult, TimeTagStream]:
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    seq = build_timebin(config, variant)
    _, stream = dyn.run_ensemble(config, seq, n_reps, seed, threads=threads)
    res = ProtocolResult(f"timebin_{variant}")
    corr = timebin_correlations(stream, max_offset=max_offset, seed=seed & 0xFFFFFFFF)
    res.set("g2_gen1_readout", corr.g1, corr.g1_err, n_reps)
    res.set("g2_gen2_readout", corr.g2, corr.g2_err, n_reps)
    res.set("p_first", corr.p_first, corr.p_err, n_reps)
    res.set("p_second", corr.p_second, corr.p_err, n_reps)
    if master:
        m = timebin_master(config, variant)
        res.set("g2_gen1_readout_master", m["gen1"])
        res.set("g2_gen2_readout_master", m["gen2"])
        res.set("p_first_master", m["p_first"])
        res.set("p_second_master", m["p_second"])
    return res, stream


# -- multi-photon entanglement ---------------------------------------------------------------

_SY = np.array([[0, -1j], [1j, 0]])
_SX = np.array([[0, 1], [1, 0]], complex)
_SZ = np.diag([1.0, -1.0]).astype(complex)
_SPLUS = np.array([[0, 0], [1, 0]], complex)      # |1><0| on a time bin
_P_H = np.diag([1.0, 0.0]).astype(complex)
_P_HBAR = np.diag([0.0, 1.0]).astype(complex)


def _ry(theta):
    return np.cos(theta / 2) * np.eye(2) - 1j * np.sin(theta / 2) * _SY


def _y_alignment(u: np.ndarray) -> np.ndarray:
    """Diagonal z rotation R with the in-plane axis of R u R^dag along +y."""
    su = u / np.sqrt(np.linalg.det(u))
    if np.trace(su).real < 0:
        su = -su
    nx = (1j * np.trace(su @ _SX) / 2).real
    ny = (1j * np.trace(su @ _SY) / 2).real
    if math.hypot(nx, ny) < 1e-15:
        return np.eye(2, dtype=complex)
    beta = math.pi / 2 - math.atan2(ny, nx)
    return np.diag([np.exp(-0.5j * beta), np.exp(0.5j * beta)])


def align_to_y(u: np.ndarray) -> np.ndarray:
    """Conjugate by a z rotation so the rotation axis's in-plane part points along +y."""
    r = _y_alignment(u)
    return r @ u @ r.conj().T


@dataclass(frozen=True)
class GhzStep:
    kind: str              # rotation | generation | readout
    elapsed: float         # time since the previous step ended
    target: str = ""       # "pi" | "half" for rotations
    power: float = 0.0
    delay: float = 0.0
    bin: int = 0


def ghz_schedule(config: SimConfig, n_photons: int, mode: str = "ghz") -> list[GhzStep]:
    """Operations of the multi-photon sequence, with elapsed times for dephasing."""
    if not 1 <= n_photons <= MAX_GHZ_PHOTONS:
        raise SequenceError(f"photon count {n_photons} outside 1..{MAX_GHZ_PHOTONS}")
    seq = build_ghz(config, n_photons, mode)
    from .pulses import calibrate_composite_flip, calibrate_composite_half
    comps = {round(c.power, 12): c for c in (calibrate_composite_half(config),
                                             calibrate_composite_flip(config))}
    win_by_start = {a: name for name, (a, b) in seq.windows.items()}
    steps: list[GhzStep] = []
    segs = list(seq.segments)
    t_prev = None
    i = 0
    while i < len(segs):
        s = segs[i]
        if s.kind == "rotation":
            comp = comps[round(s.power, 12)]
            second = next(x for x in segs[i + 1:] if x.kind == "rotation")
            start = s.start
            end = second.end
            steps.append(GhzStep("rotation", 0.0 if t_prev is None else start - t_prev,
                                 comp.target, comp.power, comp.delay))
            t_prev = end
            i = segs.index(second) + 1
            continue
        if s.kind == "drive" and t_prev is not None:
            name = win_by_start.get(s.start, "")
            a, b = seq.windows[name]
            if name.startswith("tau"):
                steps.append(GhzStep("generation", b - t_prev, bin=int(name[3:])))
            else:
                steps.append(GhzStep("readout", a - t_prev))
            t_prev = b
        i += 1
    return steps


def _composite_frame(config: SimConfig, st: GhzStep):
    """Fixed unitaries (L, P, R) with net rotation L u(e1) P u(e2) R for pulse unitaries u."""
    nominal = effective_composite(config, st.power, st.delay)
    # the axis alignment is calibrated once, at nominal area, and reused for every sample
    r = _y_alignment(nominal)
    dur = 2 * config.rotation_duration + st.delay
    return r @ precession(config, -dur), precession(config, st.delay), r.conj().T


def _pulse(config: SimConfig, st: GhzStep, scale):
    return rotation_unitary(config, st.power, config.rotation_duration, scale)


def _superop(u: np.ndarray) -> np.ndarray:
    return np.kron(u, u.conj())


def rotation_channels(config: SimConfig, steps, rotations: str = "calibrated") -> dict:
    """Step index -> 4x4 spin superoperator, averaged over independent pulse-area errors."""
    out = {}
    scales, weights = dyn.area_quadrature(config)
    for k, st in enumerate(steps):
        if st.kind != "rotation":
            continue
        if rotations == "ideal":
            out[k] = _superop(_ry(math.pi if st.target == "pi" else math.pi / 2))
            continue
        left, mid, right = _composite_frame(config, st)
        pulse = sum(w * _superop(_pulse(config, st, sc)) for sc, w in zip(scales, weights))
        out[k] = _superop(left) @ pulse @ _superop(mid) @ pulse @ _superop(right)
    return out


def _apply_op(rho: np.ndarray, op: np.ndarray, axes: list[int], nf: int) -> np.ndarray:
    """rho -> O rho O^dag for an operator on tensor factors ``axes``."""
    k = len(axes)
    t = op.reshape((2,) * (2 * k))
    rho = np.tensordot(t, rho, axes=(list(range(k, 2 * k)), axes))
    rho = np.moveaxis(rho, list(range(k)), axes)
    bra = [a + nf for a in axes]
    rho = np.tensordot(t.conj(), rho, axes=(list(range(k, 2 * k)), bra))
    return np.moveaxis(rho, list(range(k)), bra)


def _apply_spin_channel(rho: np.ndarray, sup: np.ndarray, nf: int) -> np.ndarray:
    shape = rho.shape
    m = np.moveaxis(rho, [0, nf], [0, 1]).reshape(4, -1)
    m = (sup @ m).reshape((2, 2) + shape[1:nf] + shape[nf + 1:])
    return np.moveaxis(m, [0, 1], [0, nf])


def _dephase(rho: np.ndarray, elapsed: float, config: SimConfig, nf: int) -> np.ndarray:
    if config.dephasing_rate == 0 or elapsed <= 0:
        return rho
    c = math.exp(-elapsed * config.dephasing_rate)
    out = rho.copy()
    idx = [slice(None)] * (2 * nf)
    idx[0], idx[nf] = 0, 1
    out[tuple(idx)] *= c
    idx[0], idx[nf] = 1, 0
    out[tuple(idx)] *= c
    return out


def logical_to_bins(bits) -> list[int]:
    """Logical 1 = photon in the odd bin of its pair, 0 = photon in the even bin."""
    out = []
    for b in bits:
        out += [1, 0] if b else [0, 1]
    return out


def ghz_target(n_photons: int) -> np.ndarray:
    v = register_vector(logical_to_bins([0] * n_photons)) + register_vector(logical_to_bins([1] * n_photons))
    return v / math.sqrt(2)


def _ghz_density(config: SimConfig, steps, rotations, n_photons):
    """(no-loss, flagged-loss) spin (x) register density tensors after the last step."""
    nf = 1 + 2 * n_photons
    b_v = config.vertical_branching
    km = np.kron(_P_H, np.eye(2)) + math.sqrt(b_v) * np.kron(_P_HBAR, _SPLUS)
    kd = math.sqrt(1.0 - b_v) * np.array([[0, 1], [0, 0]], complex)    # hbar -> h, photon lost
    chans = rotation_channels(config, steps, rotations)
    ok = np.zeros((2,) * (2 * nf), complex)
    ok[(0,) * (2 * nf)] = 1.0                  # |h> (x) vacuum
    fail = np.zeros_like(ok)
    for k, st in enumerate(steps):
        ok = _dephase(ok, st.elapsed, config, nf)
        fail = _dephase(fail, st.elapsed, config, nf)
        if st.kind == "rotation":
            ok = _apply_spin_channel(ok, chans[k], nf)
            fail = _apply_spin_channel(fail, chans[k], nf)
        elif st.kind == "generation":
            lost = _apply_op(ok + fail, kd, [0], nf) if b_v < 1 else 0.0
            ok = _apply_op(ok, km, [0, st.bin], nf)
            fail = _apply_op(fail, km, [0, st.bin], nf) + lost
    return ok, fail


def ghz_generation(config: SimConfig, n_photons: int = 3, mode: str = "ghz",
                   rotations: str = "calibrated") -> ProtocolResult:
    """Branch-map evolution of spin (x) 2n-bin register through the sequence.

    Vertical decay emits into the window's bin with amplitude sqrt(branching).
    Diagonal decay flips the spin to ``h`` and its photon is lost; that branch
    stays in the state as an incoherent mixture and its weight is reported as
    ``loss_probability``. Readout keeps the ``hbar`` outcome after the final
    pi/2 rotation.
    """
    if rotations not in ("calibrated", "ideal"):
        raise ValueError("rotations must be 'calibrated' or 'ideal'")
    steps = ghz_schedule(config, n_photons, mode)
    dim = 2 ** (2 * n_photons)
    ok, fail = _ghz_density(config, steps, rotations, n_photons)
    mat = (ok + fail).reshape(2 * dim, 2 * dim)
    norm = float(np.trace(mat).real)
    success = float(np.trace(ok.reshape(2 * dim, 2 * dim)).real) / norm
    before = np.einsum("aiaj->ij", mat.reshape(2, dim, 2, dim)) / norm
    proj = mat.reshape(2, dim, 2, dim)[1, :, 1, :]
    p_read = float(np.trace(proj).real) / norm
    after = proj / np.trace(proj).real
    before = (before + before.conj().T) / 2
    after = (after + after.conj().T) / 2
    target = ghz_target(n_photons) if mode == "ghz" else cluster_target(n_photons)
    res = ProtocolResult(f"{mode}_{n_photons}")
    res.set("fidelity", float(np.vdot(target, after @ target).real))
    res.set("success_probability", success)
    res.set("readout_probability", p_read)
    res.set("loss_probability", 1.0 - success)
    res.states["photons_before_readout"] = RegisterState(before, 2 * n_photons)
    res.states["photons"] = RegisterState(after, 2 * n_photons)
    res.states["target"] = target
    res.notes["rotations"] = rotations
    return res


def cluster_target(n_photons: int) -> np.ndarray:
    """Photonic output of the loss-free protocol with perfect rotations in cluster mode."""
    cfg = SimConfig.ideal()
    steps = ghz_schedule(cfg, n_photons, "cluster")
    rho, _ = _ghz_density(cfg, steps, "ideal", n_photons)
    dim = 2 ** (2 * n_photons)
    proj = rho.reshape(2, dim, 2, dim)[1, :, 1, :]
    w, v = np.linalg.eigh((proj + proj.conj().T) / 2)
    top = v[:, -1]
    k = int(np.argmax(np.abs(top) > 1e-12))
    return top * (abs(top[k]) / top[k])


def ghz_trajectories(config: SimConfig, n_photons: int = 3, mode: str = "ghz",
                     n_runs: int = 10000, seed: int = 0,
                     rotations: str = "calibrated") -> ProtocolResult:
    """Monte Carlo over the same branch map: sampled pulse-area errors, dephasing
    flips, diagonal decays and readout clicks, one pure register state per run.

    The fidelity is averaged over runs with a readout click, which estimates
    the ratio of projected overlap to projection probability of the map.
    """
    steps = ghz_schedule(config, n_photons, mode)
    nf = 1 + 2 * n_photons
    dim = 2 ** (2 * n_photons)
    rot_steps = [k for k, st in enumerate(steps) if st.kind == "rotation"]
    # per run: two area errors per composite, then click, then (dephasing, decay) per step
    normals = np.empty((n_runs, len(rot_steps), 2))
    unif = np.empty((n_runs, 1 + 2 * len(steps)))
    for i in range(n_runs):
        g = np.random.Generator(np.random.Philox(dyn.trajectory_seed(seed, i)))
        normals[i] = g.standard_normal((len(rot_steps), 2))
        unif[i] = g.random(1 + 2 * len(steps))
    sigma = 0.0 if rotations == "ideal" else config.pulse_area_error
    b_v = config.vertical_branching
    psi = np.zeros((n_runs, 2) + (2,) * (2 * n_photons), complex)
    psi[(slice(None),) + (0,) * nf] = 1.0
    lost = np.zeros(n_runs, bool)
    for k, st in enumerate(steps):
        if config.dephasing_rate and st.elapsed > 0:
            p = 0.5 * (1 - math.exp(-st.elapsed * config.dephasing_rate))
            flip = unif[:, 1 + 2 * k] < p
            psi[flip, 1] *= -1
        if st.kind == "rotation":
            if rotations == "ideal":
                u = np.repeat(_ry(math.pi if st.target == "pi" else math.pi / 2)[None], n_runs, axis=0)
            else:
                q = rot_steps.index(k)
                left, mid, right = _composite_frame(config, st)
                u = (left @ _pulse(config, st, 1.0 + sigma * normals[:, q, 0]) @ mid
                     @ _pulse(config, st, 1.0 + sigma * normals[:, q, 1]) @ right)
            psi = np.einsum("nij,nj...->ni...", u, psi)
        elif st.kind == "generation":
            flat = psi.reshape(n_runs, 2, -1)
            p_hbar = np.sum(np.abs(flat[:, 1]) ** 2, axis=1) / np.sum(np.abs(flat) ** 2, axis=(1, 2))
            loss = unif[:, 2 + 2 * k] < (1 - b_v) * p_hbar
            lost |= loss
            new = np.zeros_like(psi)
            occupied = np.moveaxis(psi[:, 1], st.bin, 1)      # bin axis after batch
            new_hbar = np.zeros_like(occupied)
            new_hbar[:, 1] = math.sqrt(b_v) * occupied[:, 0]
            new[:, 0] = psi[:, 0]
            new[:, 1] = np.moveaxis(new_hbar, 1, st.bin)
            # diagonal decay: hbar -> h with the photon lost
            new[loss, 0] = psi[loss, 1]
            new[loss, 1] = 0.0
            psi = new
            norm = np.sqrt(np.sum(np.abs(psi.reshape(n_runs, -1)) ** 2, axis=1))
            psi = psi / norm.reshape((-1,) + (1,) * nf)
    flat = psi.reshape(n_runs, 2, dim)
    norm2 = np.sum(np.abs(flat) ** 2, axis=(1, 2))
    proj = flat[:, 1]
    pn = np.sum(np.abs(proj) ** 2, axis=1)
    click = unif[:, 0] < pn / norm2
    target = ghz_target(n_photons) if mode == "ghz" else cluster_target(n_photons)
    fid = np.abs(proj @ target.conj()) ** 2 / np.maximum(pn, 1e-300)
    res = ProtocolResult(f"{mode}_{n_photons}_trajectories")
    f = fid[click]
    if f.size == 0:
        raise RuntimeError("no runs with a readout click")
    res.set("fidelity", f.mean(), f.std(ddof=1) / math.sqrt(f.size) if f.size > 1 else 0.0, f.size)
    kept = (~lost).astype(float)
    res.set("success_probability", kept.mean(), kept.std(ddof=1) / math.sqrt(n_runs), n_runs)
    c = click.astype(float)
    res.set("readout_probability", c.mean(), c.std(ddof=1) / math.sqrt(n_runs), n_runs)
    return res


# -- photon statistics and storage -------------------------------------------------------------

def photon_number_distribution(config: SimConfig, pulse_duration: float, n: int = 10000,
                               seed: int = 0, rabi: float | None = None, threads: int = 1,
                               max_count: int = 10) -> ProtocolResult:
    """Emitted photons per resonant pulse starting from ``hbar``."""
    if not pulse_duration > 0:
        raise ValueError("pulse duration must be > 0")
    seq = build_generation_pulse(config, pulse_duration, rabi)
    init = QuantumState(np.eye(EMITTER_DIM)[Level.hbar].astype(complex))
    recs = dyn.simulate_ensemble(config, seq, seed, n, initial=init, threads=threads)
    a, b = seq.windows["pulse"]
    counts = np.array([sum(1 for j in r.jumps if a <= j.time <= b) for r in recs])
    hist = np.bincount(np.minimum(counts, max_count), minlength=max_count + 1) / n
    res = ProtocolResult("photon_number")
    res.traces["distribution"] = {"photons_count": np.arange(max_count + 1), "probability_frac": hist}
    res.set("mean_photons", counts.mean(), counts.std(ddof=1) / math.sqrt(n), n)
    p2 = (counts >= 2).astype(float)
    res.set("p_multi", p2.mean(), p2.std(ddof=1) / math.sqrt(n), n)
    p0 = (counts == 0).astype(float)
    res.set("p_zero", p0.mean(), p0.std(ddof=1) / math.sqrt(n), n)
    we = dyn.window_expectations(config, seq, initial=init, windows=["pulse"])
    res.set("mean_photons_master", we.emitted["pulse"])
    return res


def hole_storage_trace(config: SimConfig, wait_times, n: int = 10000, seed: int = 0,
                       threads: int = 1) -> ProtocolResult:
    """Probability the dot still holds a hole after each wait, with an MLE escape time."""
    waits = np.asarray(list(wait_times), float)
    if waits.size == 0 or np.any(waits < 0):
        raise ValueError("wait times must be non-negative")
    seqs = [build_storage(config, float(w)) for w in waits]
    per_traj = [s for s in seqs for _ in range(n)]
    # escape is spin independent; skipping dephasing jumps leaves the charge statistics unchanged
    recs = dyn.simulate_ensemble(config.replace(t2_star=math.inf), per_traj, seed, len(per_traj), threads=threads)
    k = np.array([r.charged for r in recs], float).reshape(len(waits), n)
    surv = k.mean(axis=1)
    err = np.sqrt(np.maximum(surv * (1 - surv), 1e-300) / n)
    exact = config.hole_injection_prob * np.exp(-waits / config.hole_escape_time)
    res = ProtocolResult("hole_storage")
    res.traces["storage"] = {"wait_ns": waits * 1e9, "charged_frac": surv, "stderr_frac": err,
                             "charged_master_frac": exact}
    for i, (s, e, x) in enumerate(zip(surv, err, exact)):
        res.set(f"charged_{i}", s, e, n)
        res.set(f"charged_{i}_master", x)
    hits = k.sum(axis=1)
    tau, p = escape_time_mle(waits, hits, n)
    res.set("escape_time", tau)
    res.set("injection_probability", p)
    return res


def escape_time_mle(waits, hits, n: int) -> tuple[float, float]:
    """Binomial maximum likelihood for survival ``p exp(-t/tau)``; returns (tau, p)."""
    waits = np.asarray(waits, float)
    hits = np.asarray(hits, float)
    scale = max(waits.max(), 1e-30)

    def nll(x):
        p = 1 / (1 + math.exp(-x[0]))
        rate = math.exp(x[1]) / scale
        q = np.clip(p * np.exp(-rate * waits), 1e-300, 1 - 1e-16)
        return -float(np.sum(hits * np.log(q) + (n - hits) * np.log1p(-q)))

    p0 = min(max(hits[np.argmin(waits)] / n, 1e-3), 1 - 1e-3)
    best = minimize(nll, [math.log(p0 / (1 - p0)), math.log(0.1)], method="Nelder-Mead",
                    options=dict(xatol=1e-10, fatol=1e-10, maxiter=4000))
    p = 1 / (1 + math.exp(-best.x[0]))
    return scale / math.exp(best.x[1]), p
