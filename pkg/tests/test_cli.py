import numpy as np
import pytest

from qdtimebin.cli import (EXIT_INVALID, EXIT_OK, RunManifest, default_config_path, main,
                           parse_range)
from qdtimebin.config import load_config
from qdtimebin.estimators import TimeTagStream, parse_stream, serialize_stream


def _scalars(text):
    out = {}
    for line in text.splitlines():
        parts = line.split()
        if parts and parts[0] == "scalar":
            out[parts[1]] = float(parts[2])
    return out


def test_validate(tmp_path, capsys):
    assert main(["validate", str(default_config_path())]) == EXIT_OK
    assert "valid" in capsys.readouterr().out
    bad = tmp_path / "bad.cfg"
    bad.write_text("purcell_factor = 0.5\nt2star_ns = -1\n")
    assert main(["validate", str(bad)]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "purcellFactor" in err and "t2Star" in err
    assert main(["validate", str(tmp_path / "missing.cfg")]) == EXIT_INVALID


def test_flag_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "rabi", "--variant", "A"]) == EXIT_INVALID
    assert "--variant" in capsys.readouterr().err
    assert main(["run", "timebin", "--reps", "ten"]) == EXIT_INVALID
    assert main(["run", "ramsey", "--delays", "5:1:1"]) == EXIT_INVALID
    with pytest.raises(SystemExit) as exc:
        main(["run", "bogus"])
    assert exc.value.code == EXIT_INVALID
    assert main(["run"]) == EXIT_INVALID
    assert not list(tmp_path.iterdir())


def test_parse_range():
    np.testing.assert_allclose(parse_range("0:10:5", 1e-12, "delays"), [0, 5e-12, 10e-12])
    np.testing.assert_allclose(parse_range("1,2.5", 1.0, "powers"), [1.0, 2.5])


def test_ramsey_run_is_reproducible(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = ["run", "ramsey", "--method", "trajectory", "--reps", "20", "--delays", "0:60:3", "--seed", "7"]
    assert main(args + ["--out", "a/r"]) == EXIT_OK
    assert main(args + ["--out", "b/r"]) == EXIT_OK
    for suffix in ("summary.txt", "ramsey.csv"):
        assert (tmp_path / "a" / f"r.{suffix}").read_bytes() == (tmp_path / "b" / f"r.{suffix}").read_bytes()


def test_timebin_run_and_analyze(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "timebin", "--reps", "3000", "--seed", "0", "--out", "tb"]) == EXIT_OK
    capsys.readouterr()
    summary = _scalars((tmp_path / "tb.summary.txt").read_text())
    for key in ("g2_gen1_readout", "g2_gen2_readout", "p_first", "p_second"):
        assert key in summary
    stream_path = tmp_path / "tb.stream.txt"
    args = ["analyze", str(stream_path), "--gen-window", "gen1", "--gen-window", "gen2",
            "--read-window", "readout"]
    assert main(args) == EXIT_OK
    got = _scalars(capsys.readouterr().out)
    for key in ("g2_gen1_readout", "g2_gen2_readout", "p_second"):
        assert got[key] == pytest.approx(summary[key], abs=1e-12)
    # repetition order does not enter the estimators
    s = parse_stream(stream_path.read_bytes())
    order = np.random.default_rng(1).permutation(len(s))
    shuffled = tmp_path / "shuffled.txt"
    shuffled.write_bytes(serialize_stream(s.reordered(order)))
    assert main(["analyze", str(shuffled), "--gen-window", "gen1", "--read-window", "readout"]) == EXIT_OK
    got = _scalars(capsys.readouterr().out)
    assert got["g2_gen1_readout"] == pytest.approx(summary["g2_gen1_readout"], rel=1e-9)


def test_analyze_lists_windows(tmp_path, capsys):
    path = tmp_path / "s.txt"
    path.write_bytes(serialize_stream(TimeTagStream(1000, {"early": (0, 100), "late": (500, 600)},
                                                    [[(10, "d")], []])))
    assert main(["analyze", str(path), "--gen-window", "early"]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "early" in err and "late" in err
    assert main(["analyze", str(path), "--gen-window", "x", "--read-window", "late"]) == EXIT_INVALID
    assert "available" in capsys.readouterr().err
    path.write_text("period_ps 100\nrep 0\ntag 150 d\n")
    assert main(["analyze", str(path), "--gen-window", "a", "--read-window", "b"]) == EXIT_INVALID
    assert "line 3" in capsys.readouterr().err


def test_ghz_summary(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "ghz", "--photons", "2", "--out", "g"]) == EXIT_OK
    summary = _scalars((tmp_path / "g.summary.txt").read_text())
    assert 0 < summary["fidelity"] <= 1 and 0 < summary["success_probability"] <= 1


def test_overwrite_refused(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    args = ["run", "storage", "--reps", "200", "--waits", "0:20:10", "--out", "st"]
    assert main(args) == EXIT_OK
    before = (tmp_path / "st.summary.txt").read_bytes()
    assert main(args + ["--seed", "5"]) == EXIT_INVALID
    assert "--force" in capsys.readouterr().err
    assert (tmp_path / "st.summary.txt").read_bytes() == before
    assert main(args + ["--seed", "5", "--force"]) == EXIT_OK


def test_manifest_replay(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["run", "timebin", "--reps", "500", "--seed", "11", "--variant", "B", "--out", "a/t"]) == EXIT_OK
    manifest = tmp_path / "a" / "t.manifest.txt"
    m = RunManifest.from_text(manifest.read_text())
    assert m.protocol == "timebin" and m.seed == 11
    assert m.config == load_config(default_config_path())
    assert main(["run", "--from-manifest", str(manifest), "--out", "b/t"]) == EXIT_OK
    for suffix in ("summary.txt", "stream.txt", "manifest.txt"):
        assert (tmp_path / "a" / f"t.{suffix}").read_bytes() == (tmp_path / "b" / f"t.{suffix}").read_bytes()
    assert main(["run", "timebin", "--from-manifest", str(manifest)]) == EXIT_INVALID


def test_thread_count_does_not_change_outputs(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    for threads in ("1", "3"):
        assert main(["run", "timebin", "--reps", "800", "--seed", "4", "--threads", threads,
                     "--out", f"t{threads}"]) == EXIT_OK
    for suffix in ("summary.txt", "stream.txt"):
        assert (tmp_path / f"t1.{suffix}").read_bytes() == (tmp_path / f"t3.{suffix}").read_bytes()


def test_describe(capsys):
    assert main(["describe", "timebin", "--variant", "B"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("sequence timebin-B") and "window readout" in out
