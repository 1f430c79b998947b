import math

import pytest
from hypothesis import given, settings, strategies as st

from qdtimebin.cli import default_config_path
from qdtimebin.config import (ConfigError, SimConfig, dump_config, load_config, parse_config,
                              pumping_rate)

from oracles import pumping_rate_full


def test_defaults_valid_and_derived():
    c = SimConfig().validate()
    assert c.vertical_rate == pytest.approx(5e9)
    assert c.diagonal_rate == pytest.approx(1e9)
    assert c.vertical_branching == pytest.approx(5 / 6)
    assert c.trion_splitting_value == pytest.approx(1.5 * c.hole_splitting)
    assert c.precession_period == pytest.approx(15e-12)
    assert SimConfig.field_9t().precession_period == pytest.approx(10e-12)
    assert c.rotation_angle(1.0) == pytest.approx(math.pi)
    assert c.generation_rabi * c.generation_duration == pytest.approx(math.pi)


def test_shipped_config_matches_defaults():
    c = load_config(default_config_path()).validate()
    ref = SimConfig()
    for name in ("gamma0", "purcell_factor", "hole_splitting", "t2_star", "pulse_area_error",
                 "hole_escape_time", "repetition_period", "rotation_duration"):
        assert getattr(c, name) == pytest.approx(getattr(ref, name), rel=1e-15)


@pytest.mark.parametrize("text, message", [
    ("purcell_factor = 0.5", "purcellFactor must be ≥ 1"),
    ("t2star_ns = -1", "t2Star"),
    ("detection_efficiency = 0", "detectionEfficiency"),
    ("hole_injection_prob = 1.5", "holeInjectionProb"),
    ("repetition_period_ns = 0.5", "repetition period"),
])
def test_invariant_violations(text, message):
    with pytest.raises(ConfigError) as err:
        parse_config(text).validate()
    assert message in str(err.value)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ConfigError) as err:
        parse_config("# c\npurcell_factor = x\nbogus = 1\npurcell_factor = 2\nnot a pair", "f.cfg")
    msg = str(err.value)
    assert "f.cfg:2" in msg and "f.cfg:3" in msg and "f.cfg:5" in msg
    assert len(err.value.problems) == 4


def test_auto_values():
    c = parse_config("generation_duration_ps = auto\ntrion_splitting_ghz = auto")
    assert c.generation_duration_override is None and c.trion_splitting is None
    with pytest.raises(ConfigError):
        parse_config("t2star_ns = auto")


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


_decimal = st.decimals(min_value="0.001", max_value="5000", places=6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(_decimal, _decimal, _decimal, _decimal)
def test_dump_parse_round_trip(t2, split, tau, esc):
    text = (f"t2star_ns = {t2}\nhole_splitting_ghz = {split}\n"
            f"rotation_pulse_ps = {tau}\nhole_escape_ns = {esc}\n")
    c = parse_config(text)
    assert parse_config(dump_config(c)) == c


@pytest.mark.parametrize("fp, rabi_scale", [(5, 1.0), (5, 0.3), (2, 1.0), (10, 2.0)])
def test_pumping_rate_oracle(fp, rabi_scale):
    c = SimConfig(purcell_factor=fp)
    rabi = rabi_scale * c.trion_decay_rate
    assert pumping_rate(c, rabi) == pytest.approx(pumping_rate_full(c, rabi), rel=1e-9)


def test_pumping_rate_limits():
    assert pumping_rate(SimConfig(diagonal_rate_scale=0.0), 1e9) == 0.0
    assert pumping_rate(SimConfig(), 0.0) == 0.0
