"""Physical and timing parameters, plus the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class SimConfig:
    """All rates in 1/s, splittings and Rabi frequencies in rad/s, times in s.

    Timing knobs left as ``None`` are derived from the rates (see the
    matching properties without the ``_override`` suffix).
    """

    gamma0: float = 1.0e9
    purcell_factor: float = 5.0
    hole_splitting: float = TWO_PI / 15e-12
    trion_splitting: float | None = None
    t2_star: float = 2.445e-9
    hole_injection_prob: float = 0.5
    hole_escape_time: float = 1.0e-6
    detection_efficiency: float = 0.1
    pulse_area_error: float = 0.35
    stark_kappa: float = math.pi
    rotation_duration: float = 6e-12
    diagonal_rate_scale: float = 1.0
    max_rotation_power: float = 4.0
    generation_duration_override: float | None = None
    generation_tail_override: float | None = None
    readout_duration_override: float | None = None
    drive_rabi_override: float | None = None
    prep_duration_override: float | None = None
    injection_duration: float = 50e-12
    repetition_period: float = 100e-9

    # -- derived quantities -------------------------------------------------
    @property
    def trion_splitting_value(self) -> float:
        if self.trion_splitting is None:
            return 1.5 * self.hole_splitting
        return self.trion_splitting

    @property
    def vertical_rate(self) -> float:
        return self.purcell_factor * self.gamma0

    @property
    def diagonal_rate(self) -> float:
        return self.diagonal_rate_scale * self.gamma0

    @property
    def trion_decay_rate(self) -> float:
        return self.vertical_rate + self.diagonal_rate

    @property
    def dephasing_rate(self) -> float:
        return 0.0 if math.isinf(self.t2_star) else 1.0 / self.t2_star

    @property
    def enhanced_lifetime(self) -> float:
        return 1.0 / self.vertical_rate

    @property
    def vertical_branching(self) -> float:
        return self.vertical_rate / self.trion_decay_rate

    @property
    def generation_duration(self) -> float:
        if self.generation_duration_override is not None:
            return self.generation_duration_override
        return 2.0 * self.enhanced_lifetime

    @property
    def generation_rabi(self) -> float:
        # rectangular pi pulse
        return math.pi / self.generation_duration

    @property
    def generation_tail(self) -> float:
        if self.generation_tail_override is not None:
            return self.generation_tail_override
        return 2.0 * self.enhanced_lifetime

    @property
    def readout_duration(self) -> float:
        if self.readout_duration_override is not None:
            return self.readout_duration_override
        return 5.0 / self.vertical_rate

    @property
    def drive_rabi(self) -> float:
        """Rabi frequency of the long preparation / readout drives."""
        if self.drive_rabi_override is not None:
            return self.drive_rabi_override
        return self.trion_decay_rate

    @property
    def pumping_rate(self) -> float:
        return pumping_rate(self, self.drive_rabi)

    @property
    def prep_duration(self) -> float:
        if self.prep_duration_override is not None:
            return self.prep_duration_override
        rate = self.pumping_rate
        if rate <= 0:
            return 20e-9
        return min(10.0 / rate, 60e-9)

    @property
    def precession_period(self) -> float:
        return math.inf if self.hole_splitting == 0 else TWO_PI / abs(self.hole_splitting)

    def rotation_angle(self, power: float) -> float:
        return self.stark_kappa * math.sqrt(power)

    # -- validation -----------------------------------------------------------
    def problems(self) -> list[str]:
        out = []
        if not self.gamma0 > 0:
            out.append("gamma0 must be > 0")
        if not self.purcell_factor >= 1:
            out.append("purcellFactor must be ≥ 1")
        if not self.t2_star > 0:
            out.append("t2Star must be > 0")
        if not 0 <= self.hole_injection_prob <= 1:
            out.append("holeInjectionProb must lie in [0, 1]")
        if not self.hole_escape_time > 0:
            out.append("holeEscapeTime must be > 0")
        if not 0 < self.detection_efficiency <= 1:
            out.append("detectionEfficiency must lie in (0, 1]")
        if not self.pulse_area_error >= 0:
            out.append("pulseAreaError must be ≥ 0")
        if not self.rotation_duration > 0:
            out.append("rotationDuration must be > 0")
        if not self.diagonal_rate_scale >= 0:
            out.append("diagonalRateScale must be ≥ 0")
        if not self.max_rotation_power > 0:
            out.append("maxRotationPower must be > 0")
        if not self.repetition_period > 0:
            out.append("repetitionPeriod must be > 0")
        for name in ("generation_duration_override", "generation_tail_override",
                     "readout_duration_override", "drive_rabi_override",
                     "prep_duration_override"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                out.append(f"{name.removesuffix('_override')} must be > 0")
        if not out and self.enhanced_lifetime * 100 > self.repetition_period:
            out.append("enhanced lifetime is not ≪ repetition period")
        return out

    def validate(self) -> "SimConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    def replace(self, **kw) -> "SimConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def field_6t(cls, **kw) -> "SimConfig":
        return cls(**kw)

    @classmethod
    def field_9t(cls, **kw) -> "SimConfig":
        return cls(hole_splitting=TWO_PI / 10e-12, **kw)

    @classmethod
    def ideal(cls, **kw) -> "SimConfig":
        """No diagonal decay, no dephasing, no area noise, no precession, short pulses."""
        base = dict(
            diagonal_rate_scale=0.0,
            t2_star=math.inf,
            pulse_area_error=0.0,
            hole_splitting=0.0,
            trion_splitting=0.0,
            generation_duration_override=10e-12,
            generation_tail_override=2e-9,
        )
        base.update(kw)
        return cls(**base)


def pumping_rate(config: SimConfig, rabi: float, detuning: float = 0.0) -> float:
    """Optical-pumping rate out of ``hbar`` from 4-level rate equations.

    Coherent drive of ``hbar <-> T`` is replaced by symmetric
    absorption/stimulated-emission at ``W = (Omega^2/2) G2 / (G2^2 + delta^2)``
    with G2 the optical coherence decay rate; the pumping rate is the slow
    eigenvalue of the {hbar, T} block.
    """
    g_t = config.trion_decay_rate
    if config.diagonal_rate == 0 or rabi == 0:
        return 0.0
    g2 = g_t / 2 + config.dephasing_rate / 4
    w = 0.5 * rabi**2 * g2 / (g2**2 + detuning**2)
    block = np.array([[-w, w + config.vertical_rate],
                      [w, -(w + g_t)]])
    return float(-np.max(np.linalg.eigvals(block).real))


# -- text format --------------------------------------------------------------

# key -> (field, factor, divisor): SI value = number * factor / divisor, with the
# divisor an exact power of ten so decimal text maps to the nearest float
_KEYS = {
    "gamma0_per_ns": ("gamma0", 1e9, 1.0),
    "purcell_factor": ("purcell_factor", 1.0, 1.0),
    "hole_splitting_ghz": ("hole_splitting", TWO_PI * 1e9, 1.0),
    "trion_splitting_ghz": ("trion_splitting", TWO_PI * 1e9, 1.0),
    "t2star_ns": ("t2_star", 1.0, 1e9),
    "hole_injection_prob": ("hole_injection_prob", 1.0, 1.0),
    "hole_escape_ns": ("hole_escape_time", 1.0, 1e9),
    "detection_efficiency": ("detection_efficiency", 1.0, 1.0),
    "pulse_area_error": ("pulse_area_error", 1.0, 1.0),
    "stark_kappa_rad": ("stark_kappa", 1.0, 1.0),
    "rotation_pulse_ps": ("rotation_duration", 1.0, 1e12),
    "diagonal_rate_scale": ("diagonal_rate_scale", 1.0, 1.0),
    "max_rotation_power": ("max_rotation_power", 1.0, 1.0),
    "generation_duration_ps": ("generation_duration_override", 1.0, 1e12),
    "generation_tail_ps": ("generation_tail_override", 1.0, 1e12),
    "readout_duration_ps": ("readout_duration_override", 1.0, 1e12),
    "drive_rabi_rad_per_ns": ("drive_rabi_override", 1e9, 1.0),
    "prep_duration_ns": ("prep_duration_override", 1.0, 1e9),
    "injection_duration_ps": ("injection_duration", 1.0, 1e12),
    "repetition_period_ns": ("repetition_period", 1.0, 1e9),
}
_AUTO = {"trion_splitting", "generation_duration_override", "generation_tail_override",
         "readout_duration_override", "drive_rabi_override", "prep_duration_override"}


def parse_config(text: str, source: str = "<config>") -> SimConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment; ``auto`` resets a derived knob."""
    values = {}
    seen = set()
    errors = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            errors.append(f"{source}:{lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errors.append(f"{source}:{lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        name, factor, divisor = _KEYS[key]
        if val.lower() == "auto":
            if name not in _AUTO:
                errors.append(f"{source}:{lineno}: {key} has no automatic value")
                continue
            values[name] = None
            continue
        try:
            num = float(val)
        except ValueError:
            errors.append(f"{source}:{lineno}: {key}: cannot parse number {val!r}")
            continue
        values[name] = _to_si(num, factor, divisor)
    if errors:
        raise ConfigError(errors)
    return SimConfig(**values)


def load_config(path) -> SimConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from exc
    return parse_config(text, str(path))


def _to_si(num: float, factor: float, divisor: float) -> float:
    return num * factor / divisor if factor != 1.0 else num / divisor


def _fmt(x: float, factor: float, divisor: float) -> str:
    """Shortest decimal that parses back to exactly ``x``."""
    if not math.isfinite(x):
        return repr(x)
    v = x * divisor / factor
    for digits in range(1, 18):
        cand = float(f"{v:.{digits}g}")
        if _to_si(cand, factor, divisor) == x:
            return repr(cand)
    return repr(v)


def dump_config(config: SimConfig) -> str:
    lines = []
    for key, (name, factor, divisor) in _KEYS.items():
        v = getattr(config, name)
        lines.append(f"{key} = {'auto' if v is None else _fmt(v, factor, divisor)}")
    return "\n".join(lines) + "\n"
