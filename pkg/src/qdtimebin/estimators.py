"""
Estimators on detected-photon time tags and on scanned intensity traces.

Tag times are integer picoseconds within a repetition. The text format is::

    period_ps <int>
    window <name> <start_ps> <end_ps>
    rep <index>
    tag <time_ps> <channel>
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.stats import norm, t as student_t


class StreamFormatError(ValueError):
    pass


class CorrelationError(ValueError):
    pass


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class TimeTagStream:
    repetition_period_ps: int
    windows: dict = field(default_factory=dict)
    repetitions: tuple = ()

    def __post_init__(self):
        period = int(self.repetition_period_ps)
        if period <= 0:
            raise StreamFormatError("repetition period must be positive")
        wins = {str(k): (int(a), int(b)) for k, (a, b) in self.windows.items()}
        for name, (a, b) in wins.items():
            if not 0 <= a < b <= period:
                raise StreamFormatError(f"window {name!r} outside the repetition")
        ordered = sorted(wins.items(), key=lambda kv: kv[1])
        for (n1, (_, b1)), (n2, (a2, _)) in zip(ordered, ordered[1:]):
            if a2 < b1:
                raise StreamFormatError(f"windows {n1!r} and {n2!r} overlap")
        reps = tuple(tuple((int(t), str(ch)) for t, ch in rep) for rep in self.repetitions)
        for i, rep in enumerate(reps):
            for t, ch in rep:
                if not 0 <= t < period:
                    raise StreamFormatError(f"rep {i}: tag time {t} ps outside [0, {period})")
        object.__setattr__(self, "repetition_period_ps", period)
        object.__setattr__(self, "windows", wins)
        object.__setattr__(self, "repetitions", reps)

    def __len__(self):
        return len(self.repetitions)

    def counts(self, window: str) -> np.ndarray:
        """Detected photons in ``window`` for every repetition."""
        if window not in self.windows:
            raise KeyError(f"no window {window!r}; available: {', '.join(sorted(self.windows)) or 'none'}")
        a, b = self.windows[window]
        return np.array([sum(1 for t, _ in rep if a <= t < b) for rep in self.repetitions],
                        dtype=float)

    def reordered(self, order) -> "TimeTagStream":
        return TimeTagStream(self.repetition_period_ps, self.windows,
                             tuple(self.repetitions[i] for i in order))

    def relabeled(self, mapping) -> "TimeTagStream":
        reps = tuple(tuple((t, mapping.get(ch, ch)) for t, ch in rep) for rep in self.repetitions)
        return TimeTagStream(self.repetition_period_ps, self.windows, reps)

    def thinned(self, keep_prob: float, seed: int) -> "TimeTagStream":
        rng = np.random.default_rng(seed)
        reps = []
        for rep in self.repetitions:
            keep = rng.random(len(rep)) < keep_prob
            reps.append(tuple(tag for tag, k in zip(rep, keep) if k))
        return TimeTagStream(self.repetition_period_ps, self.windows, tuple(reps))


# -- serialization -----------------------------------------------------------------

def serialize_stream(s: TimeTagStream) -> bytes:
    out = io.StringIO()
    out.write(f"period_ps {s.repetition_period_ps}\n")
    for name, (a, b) in sorted(s.windows.items(), key=lambda kv: (kv[1], kv[0])):
        out.write(f"window {name} {a} {b}\n")
    for i, rep in enumerate(s.repetitions):
        out.write(f"rep {i}\n")
        for t, ch in rep:
            out.write(f"tag {t} {ch}\n")
    return out.getvalue().encode("utf-8")


def _int_field(tok: str, lineno: int, what: str) -> int:
    try:
        return int(tok)
    except ValueError:
        raise StreamFormatError(f"line {lineno}: {what}: expected integer, got {tok!r}") from None


def parse_stream(data: bytes | str) -> TimeTagStream:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    period = None
    windows: dict[str, tuple[int, int]] = {}
    reps: list[list[tuple[int, str]]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts:
            continue
        key = parts[0]
        if key == "period_ps":
            if len(parts) != 2:
                raise StreamFormatError(f"line {lineno}: period_ps takes one field")
            if period is not None:
                raise StreamFormatError(f"line {lineno}: duplicate period_ps")
            period = _int_field(parts[1], lineno, "period_ps")
            if period <= 0:
                raise StreamFormatError(f"line {lineno}: period_ps must be positive")
        elif key == "window":
            if len(parts) != 4:
                raise StreamFormatError(f"line {lineno}: window needs <name> <start_ps> <end_ps>")
            if reps:
                raise StreamFormatError(f"line {lineno}: window after first rep")
            name = parts[1]
            if name in windows:
                raise StreamFormatError(f"line {lineno}: duplicate window {name!r}")
            windows[name] = (_int_field(parts[2], lineno, "window start"),
                             _int_field(parts[3], lineno, "window end"))
        elif key == "rep":
            if len(parts) != 2:
                raise StreamFormatError(f"line {lineno}: rep takes one field")
            idx = _int_field(parts[1], lineno, "rep index")
            if idx != len(reps):
                raise StreamFormatError(f"line {lineno}: rep index {idx}, expected {len(reps)}")
            reps.append([])
        elif key == "tag":
            if len(parts) != 3:
                raise StreamFormatError(f"line {lineno}: tag needs <time_ps> <channel>")
            if not reps:
                raise StreamFormatError(f"line {lineno}: tag before any rep")
            t = _int_field(parts[1], lineno, "tag time")
            if period is None:
                raise StreamFormatError(f"line {lineno}: tag before period_ps")
            if not 0 <= t < period:
                raise StreamFormatError(
                    f"line {lineno}: rep {len(reps) - 1} tag time {t} ps outside [0, {period})")
            reps[-1].append((t, parts[2]))
        else:
            raise StreamFormatError(f"line {lineno}: unknown record {key!r}")
    if period is None:
        raise StreamFormatError("missing period_ps header")
    try:
        return TimeTagStream(period, windows, tuple(tuple(r) for r in reps))
    except StreamFormatError as exc:
        raise StreamFormatError(f"invalid stream: {exc}") from None


# -- degree of correlation ----------------------------------------------------------------

def _cross_mean(a: np.ndarray, b: np.ndarray, max_offset: int | None) -> float:
    n = len(a)
    if max_offset is None or max_offset >= n - 1:
        return float((a.sum() * b.sum() - (a * b).sum()) / (n * (n - 1)))
    total = 0.0
    pairs = 0
    for k in range(1, max_offset + 1):
        total += (a[:-k] * b[k:]).sum() + (a[k:] * b[:-k]).sum()
        pairs += 2 * (n - k)
    return float(total / pairs)


def _doc_value(a, b, max_offset):
    same = float((a * b).mean())
    if same == 0.0:
        return 0.0
    cross = _cross_mean(a, b, max_offset)
    if cross == 0.0:
        raise CorrelationError("no cross-repetition coincidences; normalization undefined")
    return same / cross


def _coincidence_inputs(s: TimeTagStream, gen: str, read: str):
    for w in (gen, read):
        if w not in s.windows:
            raise KeyError(f"no window {w!r}; available: {', '.join(sorted(s.windows)) or 'none'}")
    if len(s) < 2:
        raise CorrelationError("need at least two repetitions")
    return s.counts(gen), (s.counts(read) > 0).astype(float)


def _bootstrap_indices(n: int, n_boot: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=(n_boot, n))


def degree_of_correlation(s: TimeTagStream, gen_window: str, read_window: str,
                          max_offset: int | None = None, n_boot: int = 200,
                          seed: int = 0) -> tuple[float, float]:
    """Generation-window photons in repetitions with a readout click, normalized by
    the same quantity paired across different repetitions.

    Returns ``(value, stderr)``; the error is a repetition-level bootstrap.
    """
    a, b = _coincidence_inputs(s, gen_window, read_window)
    value = _doc_value(a, b, max_offset)
    boots = []
    for idx in _bootstrap_indices(len(a), n_boot, seed):
        try:
            boots.append(_doc_value(a[idx], b[idx], max_offset))
        except CorrelationError:
            pass
    err = float(np.std(boots, ddof=1)) if len(boots) > 1 else math.nan
    return value, err


def conditional_timebin_probability(g1: float, g2: float, which: str) -> float:
    if which not in ("first", "second"):
        raise ValueError(f"which must be 'first' or 'second', not {which!r}")
    total = g1 + g2
    if not total > 0:
        raise ValueError("g1 + g2 must be positive")
    return (g1 if which == "first" else g2) / total


@dataclass(frozen=True)
class TimebinCorrelations:
    g1: float
    g1_err: float
    g2: float
    g2_err: float
    p_first: float
    p_second: float
    p_err: float
    repetitions: int


def timebin_correlations(s: TimeTagStream, gen1: str = "gen1", gen2: str = "gen2",
                         read: str = "readout", max_offset: int | None = None,
                         n_boot: int = 200, seed: int = 0) -> TimebinCorrelations:
    """Both degrees of correlation and the conditional time-bin probabilities,
    with errors from one shared bootstrap so the probability error includes
    the g1/g2 covariance."""
    a1, b = _coincidence_inputs(s, gen1, read)
    a2 = s.counts(gen2)
    g1 = _doc_value(a1, b, max_offset)
    g2 = _doc_value(a2, b, max_offset)
    bg1, bg2, bp = [], [], []
    for idx in _bootstrap_indices(len(b), n_boot, seed):
        try:
            x1 = _doc_value(a1[idx], b[idx], max_offset)
            x2 = _doc_value(a2[idx], b[idx], max_offset)
        except CorrelationError:
            continue
        bg1.append(x1)
        bg2.append(x2)
        if x1 + x2 > 0:
            bp.append(x2 / (x1 + x2))
    sd = lambda v: float(np.std(v, ddof=1)) if len(v) > 1 else math.nan
    p2 = conditional_timebin_probability(g1, g2, "second")
    return TimebinCorrelations(g1, sd(bg1), g2, sd(bg2), 1.0 - p2, p2, sd(bp), len(b))


# -- fitting ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    params: dict
    errors: dict
    residual_norm: float

    def __getitem__(self, key):
        return self.params[key]


def _sinusoid_design(x, freq):
    w = 2 * math.pi * freq
    return np.column_stack([np.ones_like(x), np.cos(w * x), np.sin(w * x)])


def fit_sinusoid(x, y, freq: float, sigma=None) -> FitResult:
    """Weighted linear least squares of ``c + a cos(2 pi f x) + b sin(2 pi f x)``.

    With ``sigma`` given the parameter covariance uses those errors; otherwise it
    is scaled by the residual variance.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    a = _sinusoid_design(x, freq)
    wts = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, float)
    aw = a * wts[:, None]
    yw = y * wts
    normal = aw.T @ aw
    if np.linalg.cond(normal) > 1e12:
        raise FitError("singular normal equations in sinusoid fit")
    coef = np.linalg.solve(normal, aw.T @ yw)
    resid = yw - aw @ coef
    rss = float(resid @ resid)
    dof = max(len(y) - 3, 1)
    cov = np.linalg.inv(normal) * (1.0 if sigma is not None else max(rss / dof, 1e-300))
    c, ca, sb = coef
    amp = math.hypot(ca, sb)
    if amp > 0:
        g = np.array([0.0, ca / amp, sb / amp])
        amp_err = math.sqrt(max(g @ cov @ g, 0.0))
    else:
        amp_err = math.sqrt(max((cov[1, 1] + cov[2, 2]) / 2, 0.0))
    return FitResult(dict(offset=c, amplitude=amp, phase=math.atan2(-sb, ca), freq=freq),
                     dict(offset=math.sqrt(max(cov[0, 0], 0.0)), amplitude=amp_err),
                     math.sqrt(rss))


def _default_band(x):
    span = x.max() - x.min()
    dx = np.median(np.diff(np.sort(x)))
    return (0.5 / span, 0.5 / dx)


def scan_sinusoid(x, y, band=None, n_grid: int | None = None, sigma=None) -> FitResult:
    """Best sinusoid-plus-offset fit over frequencies in ``band`` (cycles per x unit)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2:
        raise FitError("need at least two points")
    if len(x) < 3 or np.ptp(x) == 0:
        raise FitError("singular normal equations: too few distinct points")
    lo, hi = band if band is not None else _default_band(x)
    n_grid = n_grid or max(8 * len(x), 64)
    freqs = np.linspace(lo, hi, n_grid)

    def rss(f):
        try:
            return fit_sinusoid(x, y, f, sigma).residual_norm
        except FitError:
            return math.inf

    vals = np.array([rss(f) for f in freqs])
    if not np.isfinite(vals).any():
        raise FitError("singular normal equations at every scanned frequency")
    k = int(np.argmin(vals))
    step = freqs[1] - freqs[0] if n_grid > 1 else 0.0
    res = minimize_scalar(rss, bounds=(max(lo, freqs[k] - step), min(hi, freqs[k] + step)),
                          method="bounded", options=dict(xatol=step * 1e-6 + 1e-300))
    f = float(res.x) if res.fun <= vals[k] else float(freqs[k])
    return fit_sinusoid(x, y, f, sigma)


def visibility(x, y, band=None, sigma=None) -> tuple[float, float]:
    """Fringe visibility amplitude/offset of the best sinusoid fit, clamped to [0, 1]."""
    y = np.asarray(y, float)
    if np.any(y < 0):
        raise FitError("intensities must be non-negative")
    if np.ptp(y) == 0 and len(y) >= 2:
        return 0.0, 0.0
    fit = scan_sinusoid(x, y, band, sigma=sigma)
    c, amp = fit.params["offset"], fit.params["amplitude"]
    if c <= 0:
        raise FitError("non-positive fitted offset")
    v = amp / c
    dv = math.hypot(fit.errors["amplitude"] / c, amp * fit.errors["offset"] / c**2)
    return float(min(max(v, 0.0), 1.0)), float(dv)


def fit_exponential_envelope(t, amplitude) -> FitResult:
    """Straight-line fit of log(amplitude) against t; returns ``tau`` and ``amplitude``.

    The slope interval is the exact Student-t interval with the two-sigma normal
    coverage; ``tau = -1/slope`` maps it to an asymmetric interval, and the
    reported tau error is half of its wider side so that ``tau +- 2 err`` covers it.
    """
    t = np.asarray(t, float)
    amp = np.asarray(amplitude, float)
    if len(t) < 3:
        raise FitError("need at least three points")
    if np.any(amp <= 0):
        raise FitError("amplitudes must be positive")
    a = np.column_stack([np.ones_like(t), t])
    coef, *_ = np.linalg.lstsq(a, np.log(amp), rcond=None)
    resid = np.log(amp) - a @ coef
    rss = float(resid @ resid)
    dof = len(t) - 2
    s2 = max(rss / dof, 1e-30)
    cov = np.linalg.inv(a.T @ a) * s2
    slope = coef[1]
    if slope >= 0:
        raise FitError("envelope does not decay")
    tau = -1.0 / slope
    se = math.sqrt(cov[1, 1])
    k = float(student_t.ppf(norm.cdf(2.0), dof))
    lo, hi = slope - k * se, slope + k * se
    if hi < 0:
        tau_err = max(-1.0 / hi - tau, tau + 1.0 / lo) / 2
    else:
        # interval reaches a non-decaying slope: tau is unbounded above
        tau_err = math.inf
    a0 = math.exp(coef[0])
    return FitResult(dict(tau=tau, amplitude=a0),
                     dict(tau=tau_err, amplitude=a0 * math.sqrt(cov[0, 0])),
                     math.sqrt(rss))


def fringe_frequency(x, y, pad: int = 8) -> tuple[float, float]:
    """Peak of the zero-padded periodogram; returns (frequency, native bin width)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    dx = np.median(np.diff(x))
    n = len(x)
    spectrum = np.abs(np.fft.rfft(y - y.mean(), n * pad))
    freqs = np.fft.rfftfreq(n * pad, dx)
    k = int(np.argmax(spectrum[1:])) + 1
    return float(freqs[k]), float(1.0 / (n * dx))
