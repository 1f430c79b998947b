"""
States and operators for the charged-dot emitter and its time-bin photon register.

The emitter is a four-level double-lambda system: two ground (hole) spin
states ``h``/``hbar`` and two trion states ``T``/``Tbar``. A register of
``n_bins`` two-level time-bin modes (vacuum / one photon) may be tensored on
the right of the emitter. Factor 0 is the emitter, factor ``k`` (1-based) is
time bin ``k``; bin 1 is the most significant register bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import sqrtm

EMITTER_DIM = 4

PURE_NORM_TOL = 1e-9
HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-9
PSD_TOL = -1e-9


class Level(enum.IntEnum):
    h = 0
    hbar = 1
    T = 2
    Tbar = 3

    @property
    def is_ground(self) -> bool:
        return self in (Level.h, Level.hbar)


class HilbertError(ValueError):
    pass


@dataclass(frozen=True)
class Transition:
    """Radiative decay ``upper -> lower``; ``vertical`` ones are cavity-enhanced."""

    upper: Level
    lower: Level
    kind: str

    @property
    def name(self) -> str:
        return f"{self.upper.name}-{self.lower.name}"

    def detuning(self, hole_splitting: float, trion_splitting: float) -> float:
        """Angular frequency relative to the driven ``T -> hbar`` line (rad/s)."""
        energy = level_energies(hole_splitting, trion_splitting)
        return float(energy[self.upper] - energy[self.lower])


DRIVEN = Transition(Level.T, Level.hbar, "vertical")
TRANSITIONS = (
    DRIVEN,
    Transition(Level.T, Level.h, "diagonal"),
    Transition(Level.Tbar, Level.h, "vertical"),
    Transition(Level.Tbar, Level.hbar, "diagonal"),
)
TRANSITIONS_BY_NAME = {t.name: t for t in TRANSITIONS}


def level_energies(hole_splitting: float, trion_splitting: float) -> np.ndarray:
    # Rotating frame anchored to T -> hbar: both sit at zero.
    return np.array([hole_splitting, 0.0, 0.0, trion_splitting])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class QuantumState:
    """Pure vector or density matrix over emitter (4) x register (2**n_bins)."""

    data: np.ndarray
    n_bins: int = 0
    kind: str = field(init=False)

    def __post_init__(self):
        data = _frozen(self.data)
        dim = EMITTER_DIM * 2 ** self.n_bins
        if data.ndim == 1:
            kind = "pure"
            if data.shape != (dim,):
                raise HilbertError(f"expected vector of length {dim}, got {data.shape}")
            norm = np.linalg.norm(data)
            if abs(norm - 1.0) > PURE_NORM_TOL:
                raise HilbertError(f"state norm {norm!r} is not 1")
        elif data.ndim == 2:
            kind = "density"
            if data.shape != (dim, dim):
                raise HilbertError(f"expected {dim}x{dim} matrix, got {data.shape}")
            if np.max(np.abs(data - data.conj().T)) > HERMITIAN_TOL:
                raise HilbertError("density matrix is not Hermitian")
            tr = np.trace(data).real
            if abs(tr - 1.0) > TRACE_TOL:
                raise HilbertError(f"density matrix trace {tr!r} is not 1")
            if np.linalg.eigvalsh(data).min() < PSD_TOL:
                raise HilbertError("density matrix has negative eigenvalues")
        else:
            raise HilbertError("state data must be a vector or a square matrix")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", kind)

    @property
    def dim(self) -> int:
        return EMITTER_DIM * 2 ** self.n_bins

    @property
    def is_pure(self) -> bool:
        return self.kind == "pure"

    def density(self) -> np.ndarray:
        if self.is_pure:
            return np.outer(self.data, self.data.conj())
        return np.array(self.data)

    def as_density(self) -> "QuantumState":
        return self if not self.is_pure else QuantumState(self.density(), self.n_bins)

    def norm(self) -> float:
        if self.is_pure:
            return float(np.linalg.norm(self.data))
        return float(np.trace(self.data).real)

    def populations(self) -> np.ndarray:
        """Emitter level populations (register traced out)."""
        rho = partial_trace(self, "emitter").data
        return np.real(np.diag(rho)).copy()


@dataclass(frozen=True)
class Operator:
    matrix: np.ndarray
    n_bins: int = 0
    hermitian: bool = False

    def __post_init__(self):
        m = _frozen(self.matrix)
        dim = EMITTER_DIM * 2 ** self.n_bins
        if m.shape != (dim, dim):
            raise HilbertError(f"operator must be {dim}x{dim}, got {m.shape}")
        if self.hermitian and np.max(np.abs(m - m.conj().T)) > HERMITIAN_TOL:
            raise HilbertError("operator flagged Hermitian is not")
        object.__setattr__(self, "matrix", m)

    @property
    def dag(self) -> "Operator":
        return Operator(self.matrix.conj().T, self.n_bins, self.hermitian)

    def __matmul__(self, other):
        if isinstance(other, Operator):
            _check_bins(self.n_bins, other.n_bins)
            return Operator(self.matrix @ other.matrix, self.n_bins)
        if isinstance(other, QuantumState):
            _check_bins(self.n_bins, other.n_bins)
            if other.is_pure:
                return self.matrix @ other.data
            return self.matrix @ other.data @ self.matrix.conj().T
        return NotImplemented


def _check_bins(a: int, b: int):
    if a != b:
        raise HilbertError(f"dimension mismatch: {a} vs {b} time bins")


def canonical_phase(vec: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    """Rotate the global phase so the first nonzero amplitude is real and >= 0."""
    vec = np.asarray(vec, dtype=complex)
    nz = np.flatnonzero(np.abs(vec) > atol)
    if nz.size == 0:
        return vec.copy()
    a = vec[nz[0]]
    out = vec * (abs(a) / a)
    out[nz[0]] = abs(a)
    return out


def register_vector(bits: Sequence[int]) -> np.ndarray:
    """Occupation ket of the register; ``bits[k-1]`` is the occupation of bin k."""
    v = np.zeros(2 ** len(bits), dtype=complex)
    idx = 0
    for b in bits:
        idx = 2 * idx + int(b)
    v[idx] = 1.0
    return v


def basis_state(level: Level, n_bins: int = 0) -> QuantumState:
    v = np.zeros(EMITTER_DIM, dtype=complex)
    v[Level(level)] = 1.0
    return QuantumState(np.kron(v, register_vector([0] * n_bins)), n_bins)


def product_state(level: Level, bits: Sequence[int]) -> QuantumState:
    v = np.zeros(EMITTER_DIM, dtype=complex)
    v[Level(level)] = 1.0
    return QuantumState(np.kron(v, register_vector(bits)), len(bits))


def superpose(terms: Iterable[tuple[complex, QuantumState]]) -> QuantumState:
    terms = list(terms)
    if not terms:
        raise HilbertError("no terms to superpose")
    n_bins = terms[0][1].n_bins
    vec = np.zeros(terms[0][1].dim, dtype=complex)
    for c, s in terms:
        if not s.is_pure:
            raise HilbertError("superpose needs pure states")
        _check_bins(n_bins, s.n_bins)
        vec = vec + complex(c) * s.data
    norm = np.linalg.norm(vec)
    if norm < 1e-14:
        raise HilbertError("superposition is the zero vector")
    return QuantumState(vec / norm, n_bins)


def emitter_operator(m: np.ndarray, n_bins: int = 0) -> np.ndarray:
    """Embed a 4x4 emitter matrix as ``m (x) I_register``."""
    return np.kron(np.asarray(m, dtype=complex), np.eye(2 ** n_bins))


def spin_operator(u: np.ndarray, n_bins: int = 0) -> np.ndarray:
    """Embed a 2x2 matrix on span{h, hbar}; trion block untouched (identity)."""
    m = np.eye(EMITTER_DIM, dtype=complex)
    m[:2, :2] = u
    return emitter_operator(m, n_bins)


def bin_operator(m: np.ndarray, k: int, n_bins: int) -> np.ndarray:
    """Embed a 2x2 matrix on time bin ``k`` (1-based)."""
    if not 1 <= k <= n_bins:
        raise HilbertError(f"bin {k} outside register of {n_bins}")
    left = np.eye(EMITTER_DIM * 2 ** (k - 1))
    right = np.eye(2 ** (n_bins - k))
    return np.kron(np.kron(left, np.asarray(m, dtype=complex)), right)


def lowering_operator(t: Transition, n_bins: int = 0) -> Operator:
    m = np.zeros((EMITTER_DIM, EMITTER_DIM), dtype=complex)
    m[t.lower, t.upper] = 1.0
    return Operator(emitter_operator(m, n_bins), n_bins)


def _psd_sqrt(rho: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((rho + rho.conj().T) / 2)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.conj().T


def fidelity(a: QuantumState, b: QuantumState) -> float:
    """|<a|b>|^2 for pure states, Uhlmann fidelity (tr sqrt(sqrt(a) b sqrt(a)))^2 otherwise."""
    if a.dim != b.dim:
        raise HilbertError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.is_pure and b.is_pure:
        f = abs(np.vdot(a.data, b.data)) ** 2
    elif a.is_pure or b.is_pure:
        psi, rho = (a.data, b.data) if a.is_pure else (b.data, a.data)
        f = np.vdot(psi, rho @ psi).real
    else:
        s = _psd_sqrt(a.data)
        m = sqrtm(s @ b.data @ s)
        f = np.trace(m).real ** 2
    return float(min(max(f, 0.0), 1.0))


def _keep_factors(keep, n_bins: int) -> list[int]:
    if isinstance(keep, str):
        if keep == "emitter":
            return [0]
        if keep == "photons":
            return list(range(1, n_bins + 1))
        raise HilbertError(f"unknown factor selector {keep!r}")
    factors = sorted(set(int(k) for k in keep))
    if any(k < 0 or k > n_bins for k in factors):
        raise HilbertError(f"factor selector {keep!r} outside 0..{n_bins}")
    return factors


def partial_trace(state: QuantumState, keep) -> QuantumState:
    """Reduced density matrix on the kept factors.

    ``keep`` is ``"emitter"``, ``"photons"`` or an iterable of factor indices
    (0 = emitter, k = time bin k). Kept factors stay in ascending order. The
    result is a plain matrix wrapped as a state only when it still has the
    emitter factor; otherwise a ``RegisterState`` is returned.
    """
    factors = _keep_factors(keep, state.n_bins)
    dims = [EMITTER_DIM] + [2] * state.n_bins
    rho = state.density().reshape(dims + dims)
    n = len(dims)
    traced = [i for i in range(n) if i not in factors]
    # trace out from the highest axis down so lower indices stay valid
    for i in sorted(traced, reverse=True):
        cur = rho.ndim // 2
        rho = np.trace(rho, axis1=i, axis2=i + cur)
    kdim = int(np.prod([dims[i] for i in factors])) if factors else 1
    rho = rho.reshape(kdim, kdim)
    if factors and factors[0] == 0:
        return QuantumState(rho, len(factors) - 1)
    return RegisterState(rho, len(factors))


@dataclass(frozen=True)
class RegisterState:
    """Density matrix over time-bin modes only (emitter traced out)."""

    data: np.ndarray
    n_bins: int

    def __post_init__(self):
        data = _frozen(self.data)
        dim = 2 ** self.n_bins
        if data.shape != (dim, dim):
            raise HilbertError(f"expected {dim}x{dim} register matrix")
        if abs(np.trace(data).real - 1.0) > TRACE_TOL:
            raise HilbertError("register state trace is not 1")
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return 2 ** self.n_bins

    @property
    def is_pure(self) -> bool:
        return False

    def density(self) -> np.ndarray:
        return np.array(self.data)

    def purity(self) -> float:
        return float(np.trace(self.data @ self.data).real)


def register_fidelity(rho: RegisterState, target: np.ndarray) -> float:
    """Fidelity of a register density matrix with a pure register ket."""
    target = np.asarray(target, dtype=complex)
    return float(min(max(np.vdot(target, rho.data @ target).real, 0.0), 1.0))
