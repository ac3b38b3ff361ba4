import json

import pytest

from cvfl.config import ExperimentConfig, LearnerConfig, Seeds, load_config, preset
from cvfl.exceptions import ConfigurationError


@pytest.mark.parametrize("name", ["freeway", "parking-lot"])
def test_preset_json_round_trip(name):
    cfg = preset(name)
    assert ExperimentConfig.from_json(cfg.to_json()) == cfg


def test_freeway_preset_values():
    cfg = preset("freeway")
    assert (cfg.K, cfg.i_max, cfg.t_c, cfg.n_max) == (30, 50, 25, 2)
    r = cfg.radio
    assert (r.total_rbs, r.rb_bandwidth, r.transmit_power, r.noise_dbm, r.delta) == (4, 180e3, 0.1, -114.0, 2.0)
    assert r.model_size_bits == 160e3 and r.shadowing_sigma_db == 3.0
    m = cfg.mobility
    assert m.coverage_diameter == 2000.0 and m.lanes == 6
    assert m.lane_bounds_kmh == ((60.0, 80.0), (80.0, 100.0), (100.0, 120.0))
    assert cfg.learner.hidden == (64, 64) and cfg.learner.epochs == 1


def test_parking_lot_preset_values():
    cfg = preset("parking-lot")
    assert (cfg.i_max, cfg.t_c) == (30, 25)
    assert cfg.mobility.parked
    assert cfg.mobility.coverage_diameter <= cfg.mobility.transmission_range


def test_unknown_preset():
    with pytest.raises(ConfigurationError):
        preset("motorway")


def test_overrides():
    cfg = preset("freeway").with_overrides(seed=4, rounds=10, total_rbs=2, model_size_bits=320e3)
    assert cfg.i_max == 10 and cfg.t_c == 10
    assert cfg.radio.total_rbs == 2 and cfg.radio.model_size_bits == 320e3
    assert cfg.seeds == Seeds.from_base(4)
    assert Seeds.from_base(4) != Seeds.from_base(5)


def test_partial_config_uses_defaults():
    cfg = ExperimentConfig.from_dict({"K": 10, "radio": {"total_rbs": 2}})
    assert cfg.K == 10 and cfg.radio.total_rbs == 2 and cfg.radio.rb_bandwidth == 180e3


@pytest.mark.parametrize(
    "data",
    [
        {"t_c": 60},
        {"clustering_fraction": 0.0},
        {"scenario": "city"},
        {"learner": {"hidden": []}},
        {"shift": {"n_shifts": 2, "swap_pairs": [[[1, 12]], []]}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(data)


def test_unknown_key_names_path():
    with pytest.raises(ConfigurationError, match=r"radio\.bogus"):
        ExperimentConfig.from_dict({"radio": {"bogus": 1}})


def test_error_reports_line_of_offending_key(tmp_path):
    text = json.dumps({"K": 30, "radio": {"total_rbs": 4, "rb_bandwidth": -5}}, indent=2)
    path = tmp_path / "c.json"
    path.write_text(text)
    with pytest.raises(ConfigurationError) as err:
        load_config(path)
    line = next(i for i, l in enumerate(text.splitlines(), 1) if '"rb_bandwidth"' in l)
    assert str(err.value).startswith(f"line {line}:")


def test_syntax_error_reports_line():
    with pytest.raises(ConfigurationError, match=r"^line 3:"):
        ExperimentConfig.from_json('{\n  "K": 3,\n  "i_max": ,\n}')


def test_learner_validation():
    with pytest.raises(ConfigurationError):
        LearnerConfig(batch_size=0)
