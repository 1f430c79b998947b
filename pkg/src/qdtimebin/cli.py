"""Command-line front end: ``validate``, ``run``, ``analyze`` and ``describe``.

Every ``run`` writes ``<prefix>.summary.txt``, one ``<prefix>.<trace>.csv``
per trace, ``<prefix>.stream.txt`` for protocols that produce time tags, and
``<prefix>.manifest.txt``. A manifest holds everything needed to reproduce
the outputs byte for byte (``run --from-manifest``).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import protocols as proto
from .config import ConfigError, SimConfig, dump_config, load_config, parse_config
from .estimators import (CorrelationError, StreamFormatError, degree_of_correlation,
                         parse_stream, serialize_stream, timebin_correlations)
from .pulses import (SequenceError, build_generation_pulse, build_ghz, build_rabi, build_ramsey,
                     build_spin_preparation, build_storage, build_timebin, describe_sequence)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

PROTOCOLS = ("spinprep", "rabi", "ramsey", "timebin", "ghz", "photnum", "storage")

# protocol -> protocol-specific flags it accepts
_ALLOWED = {
    "spinprep": {"method", "reps", "duration"},
    "rabi": {"method", "reps", "powers"},
    "ramsey": {"method", "reps", "delays", "area"},
    "timebin": {"reps", "variant"},
    "ghz": {"method", "reps", "mode", "photons", "rotations"},
    "photnum": {"reps", "duration"},
    "storage": {"reps", "waits"},
}
_PARAM_FLAGS = sorted(set().union(*_ALLOWED.values()))


class UsageError(Exception):
    """Bad flags or inputs; maps to the validation exit code."""


def default_config_path() -> Path:
    return Path(str(resources.files("qdtimebin") / "data" / "default.cfg"))


def parse_range(text: str, unit: float, what: str) -> np.ndarray:
    """``start:stop:step`` (stop inclusive) or a comma list, scaled by ``unit``."""
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise UsageError(f"{what}: need step > 0 and stop >= start in {text!r}")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            vals = start + step * np.arange(n)
        else:
            vals = np.array([float(p) for p in text.split(",") if p.strip()])
    except ValueError:
        raise UsageError(f"{what}: cannot parse {text!r} (expected start:stop:step or a,b,c)") from None
    if vals.size == 0:
        raise UsageError(f"{what}: empty list")
    return vals * unit


# -- manifest -----------------------------------------------------------------------

@dataclass
class RunManifest:
    protocol: str
    seed: int
    config: SimConfig
    params: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_text(self) -> str:
        lines = [f"version {self.version}", f"protocol {self.protocol}", f"seed {self.seed}"]
        lines += [f"param {k} {v}" for k, v in sorted(self.params.items())]
        lines += [f"output {o}" for o in self.outputs]
        lines.append("config")
        lines += ["  " + ln for ln in dump_config(self.config).splitlines()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<manifest>") -> "RunManifest":
        head, cfg_lines, in_cfg = {}, [], False
        params, outputs = {}, []
        for lineno, raw in enumerate(text.splitlines(), 1):
            if in_cfg:
                cfg_lines.append(raw.strip())
                continue
            if not raw.strip():
                continue
            key, _, rest = raw.strip().partition(" ")
            if key == "config":
                in_cfg = True
            elif key == "param":
                name, _, val = rest.partition(" ")
                params[name] = val
            elif key == "output":
                outputs.append(rest)
            elif key in ("version", "protocol", "seed"):
                head[key] = rest
            else:
                raise UsageError(f"{source}:{lineno}: unknown manifest entry {key!r}")
        missing = {"version", "protocol", "seed"} - set(head)
        if missing or not in_cfg:
            raise UsageError(f"{source}: manifest lacks {', '.join(sorted(missing | ({'config'} if not in_cfg else set())))}")
        try:
            seed = int(head["seed"])
        except ValueError:
            raise UsageError(f"{source}: bad seed {head['seed']!r}") from None
        cfg = parse_config("\n".join(cfg_lines), source)
        return cls(head["protocol"], seed, cfg, params, outputs, head["version"])


# -- protocol dispatch ----------------------------------------------------------------

def _resolve_params(protocol: str, given: dict, config: SimConfig) -> dict:
    """Fill in defaults and return canonical string-valued parameters."""
    bad = sorted(k for k, v in given.items() if v is not None and k not in _ALLOWED[protocol])
    if bad:
        flags = ", ".join("--" + b for b in bad)
        raise UsageError(f"{flags} not valid for protocol {protocol!r}")
    p = {k: v for k, v in given.items() if v is not None}
    allowed = _ALLOWED[protocol]
    if "method" in allowed:
        p.setdefault("method", "master")
        if p["method"] not in ("master", "trajectory"):
            raise UsageError("--method must be 'master' or 'trajectory'")
    if "reps" in allowed:
        default = {"ramsey": 200, "storage": 10000}.get(protocol, 10000)
        try:
            p["reps"] = str(int(p.get("reps", default)))
        except ValueError:
            raise UsageError(f"--reps: not an integer: {p['reps']!r}") from None
        if int(p["reps"]) < 2:
            raise UsageError("--reps must be >= 2")
    if protocol == "rabi":
        p.setdefault("powers", "0:4:0.05")
    if protocol == "ramsey":
        p.setdefault("delays", "0:5000:1" if p["method"] == "master" else "0:300:3")
        p.setdefault("area", "half")
        if p["area"] not in ("half", "pi"):
            raise UsageError("--area must be 'half' or 'pi'")
    if protocol == "timebin":
        p.setdefault("variant", "A")
        if p["variant"] not in ("A", "B"):
            raise UsageError("--variant must be A or B")
    if protocol == "ghz":
        p.setdefault("mode", "ghz")
        p.setdefault("photons", "3")
        p.setdefault("rotations", "calibrated")
        if p["mode"] not in ("ghz", "cluster"):
            raise UsageError("--mode must be 'ghz' or 'cluster'")
        if p["rotations"] not in ("calibrated", "ideal"):
            raise UsageError("--rotations must be 'calibrated' or 'ideal'")
        try:
            n = int(p["photons"])
        except ValueError:
            raise UsageError(f"--photons: not an integer: {p['photons']!r}") from None
        if not 1 <= n <= 6:
            raise UsageError("--photons must lie in 1..6")
        p["photons"] = str(n)
    if protocol == "spinprep":
        p.setdefault("duration", repr(config.prep_duration * 1e9))
    if protocol == "photnum":
        p.setdefault("duration", repr(config.generation_duration * 1e9))
    if "duration" in p:
        try:
            d = float(p["duration"])
        except ValueError:
            raise UsageError(f"--duration: cannot parse {p['duration']!r}") from None
        if not d > 0:
            raise UsageError("--duration must be > 0")
    if protocol == "storage":
        p.setdefault("waits", "0:3000:250")
    # parse once to reject malformed ranges early
    for key, what in (("powers", "--powers"), ("delays", "--delays"), ("waits", "--waits")):
        if key in p:
            vals = parse_range(p[key], 1.0, what)
            if np.any(vals < 0):
                raise UsageError(f"{what}: values must be non-negative")
    return {k: str(v) for k, v in p.items()}


def _sequence_for(protocol: str, p: dict, config: SimConfig):
    if protocol == "spinprep":
        return build_spin_preparation(config, float(p["duration"]) * 1e-9)
    if protocol == "rabi":
        return build_rabi(config, float(parse_range(p["powers"], 1.0, "--powers")[-1]))
    if protocol == "ramsey":
        return build_ramsey(config, float(parse_range(p["delays"], 1e-12, "--delays")[0]), p["area"])
    if protocol == "timebin":
        return build_timebin(config, p["variant"])
    if protocol == "ghz":
        return build_ghz(config, int(p["photons"]), p["mode"])
    if protocol == "photnum":
        return build_generation_pulse(config, float(p["duration"]) * 1e-9)
    return build_storage(config, float(parse_range(p["waits"], 1e-9, "--waits")[0]))


def execute(protocol: str, p: dict, config: SimConfig, seed: int, threads: int = 1):
    """Run a protocol; returns (ProtocolResult, TimeTagStream | None)."""
    method = p.get("method")
    reps = int(p.get("reps", 0))
    if protocol == "spinprep":
        return proto.spin_preparation_trace(config, float(p["duration"]) * 1e-9, method=method,
                                            n=reps, seed=seed, threads=threads), None
    if protocol == "rabi":
        powers = parse_range(p["powers"], 1.0, "--powers")
        return proto.rabi_experiment(config, powers, method=method, n=reps, seed=seed,
                                     threads=threads), None
    if protocol == "ramsey":
        delays = parse_range(p["delays"], 1e-12, "--delays")
        return proto.ramsey_experiment(config, delays, p["area"], n=reps, method=method,
                                       seed=seed, threads=threads), None
    if protocol == "timebin":
        return proto.timebin_experiment(config, p["variant"], reps, seed=seed, threads=threads)
    if protocol == "ghz":
        n = int(p["photons"])
        if method == "master":
            res = proto.ghz_generation(config, n, p["mode"], rotations=p["rotations"])
            res.states.clear()
            return res, None
        return proto.ghz_trajectories(config, n, p["mode"], reps, seed, p["rotations"]), None
    if protocol == "photnum":
        return proto.photon_number_distribution(config, float(p["duration"]) * 1e-9, reps,
                                                seed=seed, threads=threads), None
    waits = parse_range(p["waits"], 1e-9, "--waits")
    return proto.hole_storage_trace(config, waits, reps, seed=seed, threads=threads), None


def _output_names(prefix: Path, result, has_stream: bool) -> dict:
    out = {"summary": prefix.with_name(prefix.name + ".summary.txt")}
    for name in result.traces:
        out[f"trace:{name}"] = prefix.with_name(f"{prefix.name}.{name}.csv")
    if has_stream:
        out["stream"] = prefix.with_name(prefix.name + ".stream.txt")
    out["manifest"] = prefix.with_name(prefix.name + ".manifest.txt")
    return out


def run_protocol(protocol: str, p: dict, config: SimConfig, seed: int, prefix: Path,
                 threads: int = 1, force: bool = False) -> list[Path]:
    config.validate()
    result, stream = execute(protocol, p, config, seed, threads)
    names = _output_names(prefix, result, stream is not None)
    clash = [str(f) for f in names.values() if f.exists()]
    if clash and not force:
        raise UsageError("refusing to overwrite existing outputs (use --force): " + ", ".join(clash))
    manifest = RunManifest(protocol, seed, config, p, [f.name for f in names.values()])
    texts = {"summary": result.to_text().encode(), "manifest": manifest.to_text().encode()}
    for name in result.traces:
        texts[f"trace:{name}"] = result.trace_csv(name).encode()
    if stream is not None:
        texts["stream"] = serialize_stream(stream)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    for key, path in names.items():
        path.write_bytes(texts[key])
    return list(names.values())


# -- commands ---------------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cfg.validate()
    print(f"{args.config}: valid")
    print(f"  enhanced lifetime {cfg.enhanced_lifetime * 1e12:.4g} ps, "
          f"precession period {cfg.precession_period * 1e12:.4g} ps, "
          f"pumping time {1e9 / cfg.pumping_rate if cfg.pumping_rate > 0 else float('inf'):.4g} ns")
    return EXIT_OK


def _given_params(args) -> dict:
    return {k: getattr(args, k) for k in _PARAM_FLAGS}


def cmd_run(args) -> int:
    if args.from_manifest:
        clash = [k for k in _PARAM_FLAGS + ["config"] if getattr(args, k) is not None]
        if args.protocol is not None or args.seed is not None or clash:
            raise UsageError("--from-manifest cannot be combined with a protocol, --seed, --config or protocol flags")
        path = Path(args.from_manifest)
        try:
            text = path.read_text()
        except OSError as exc:
            raise UsageError(f"{path}: cannot read ({exc.strerror})") from None
        m = RunManifest.from_text(text, str(path))
        if m.protocol not in PROTOCOLS:
            raise UsageError(f"{path}: unknown protocol {m.protocol!r}")
        if m.version != __version__:
            print(f"warning: manifest written by version {m.version}, running {__version__}",
                  file=sys.stderr)
        protocol, config, seed = m.protocol, m.config, m.seed
        p = _resolve_params(protocol, dict(m.params), config)
    else:
        if args.protocol is None:
            raise UsageError("run needs a protocol or --from-manifest")
        protocol = args.protocol
        config = load_config(args.config or default_config_path())
        seed = 0 if args.seed is None else args.seed
        p = _resolve_params(protocol, _given_params(args), config)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    prefix = Path(args.out) if args.out else Path(protocol)
    files = run_protocol(protocol, p, config, seed, prefix, args.threads, args.force)
    for f in files:
        print(f)
    return EXIT_OK


def analyze_stream(data: bytes, gen_windows: list[str], read_window: str,
                   max_offset: int | None = None, seed: int = 0) -> str:
    s = parse_stream(data)
    names = sorted(s.windows)
    missing = [w for w in list(gen_windows) + [read_window] if w not in s.windows]
    if missing:
        raise UsageError(f"unknown window(s) {', '.join(missing)}; available: {', '.join(names)}")
    res = proto.ProtocolResult("analyze")
    res.notes["repetitions"] = len(s)
    if len(gen_windows) == 2:
        c = timebin_correlations(s, gen_windows[0], gen_windows[1], read_window,
                                 max_offset=max_offset, seed=seed)
        res.set(f"g2_{gen_windows[0]}_{read_window}", c.g1, c.g1_err, c.repetitions)
        res.set(f"g2_{gen_windows[1]}_{read_window}", c.g2, c.g2_err, c.repetitions)
        res.set("p_first", c.p_first, c.p_err, c.repetitions)
        res.set("p_second", c.p_second, c.p_err, c.repetitions)
    else:
        for w in gen_windows:
            v, e = degree_of_correlation(s, w, read_window, max_offset=max_offset, seed=seed)
            res.set(f"g2_{w}_{read_window}", v, e, len(s))
    return res.to_text()


def cmd_analyze(args) -> int:
    path = Path(args.stream)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise UsageError(f"{path}: cannot read ({exc.strerror})") from None
    if not args.gen_window or not args.read_window:
        try:
            names = ", ".join(sorted(parse_stream(data).windows))
        except StreamFormatError:
            names = "?"
        raise UsageError(f"analyze needs --gen-window and --read-window; available windows: {names}")
    text = analyze_stream(data, args.gen_window, args.read_window, args.max_offset, args.seed)
    if args.out:
        out = Path(args.out)
        if out.exists() and not args.force:
            raise UsageError(f"refusing to overwrite {out} (use --force)")
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_describe(args) -> int:
    config = load_config(args.config or default_config_path())
    p = _resolve_params(args.protocol, _given_params(args), config)
    sys.stdout.write(describe_sequence(_sequence_for(args.protocol, p, config)))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_INVALID)


def _protocol_flags(sp):
    sp.add_argument("--config", help="config file (default: shipped defaults)")
    sp.add_argument("--method", help="master | trajectory")
    sp.add_argument("--reps", help="repetitions (per point for ramsey and storage)")
    sp.add_argument("--variant", help="time-bin variant A | B")
    sp.add_argument("--mode", help="ghz | cluster")
    sp.add_argument("--photons", help="photon count for ghz")
    sp.add_argument("--rotations", help="calibrated | ideal spin rotations for ghz")
    sp.add_argument("--delays", help="ramsey delays start:stop:step_ps")
    sp.add_argument("--powers", help="rabi powers start:stop:step or a,b,c")
    sp.add_argument("--waits", help="storage waits start:stop:step_ns")
    sp.add_argument("--area", help="ramsey rotation area half | pi")
    sp.add_argument("--duration", help="drive duration in ns (spinprep, photnum)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="qdtimebin", description="Spin-photon time-bin source simulator")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="run a protocol and write outputs")
    r.add_argument("protocol", nargs="?", choices=PROTOCOLS)
    _protocol_flags(r)
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--out", help="output prefix (default: protocol name)")
    r.add_argument("--force", action="store_true", help="overwrite existing outputs")
    r.add_argument("--from-manifest", help="re-run a manifest")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="correlation estimators on a saved stream")
    a.add_argument("stream")
    a.add_argument("--gen-window", action="append", help="repeat for two time bins")
    a.add_argument("--read-window")
    a.add_argument("--max-offset", type=int, help="farthest repetition offset for normalization")
    a.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    a.add_argument("--out")
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("describe", help="print a protocol's pulse sequence")
    d.add_argument("protocol", choices=PROTOCOLS)
    _protocol_flags(d)
    d.set_defaults(func=cmd_describe)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SequenceError, StreamFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CorrelationError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
