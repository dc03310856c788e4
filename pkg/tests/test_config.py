"""Run configuration: defaults, validation, strict JSON loading."""

import json

import pytest

from fsstis.config import (VARIANTS, Config, ConfigError, config_from_dict,
                           load_config)


def test_defaults_match_documented_protocol():
    cfg = Config()
    assert cfg.n_intervals == 10
    assert cfg.interval_h == 0.01
    assert cfg.momentum == 0.9
    assert cfg.lr_source == 0.001
    assert cfg.lr_finetune == 0.0005
    assert cfg.k_shot == 1
    assert cfg.eval_repeats == 20
    assert cfg.variant == "full"


def test_variant_names_are_closed_set():
    assert VARIANTS == ("full", "no-ode", "no-fft", "no-rsp", "no-reg",
                        "no-dsloss")
    for v in VARIANTS:
        assert Config(variant=v).variant == v


@pytest.mark.parametrize("kw", [
    {"variant": "no-such"},
    {"image_size": 30},
    {"image_size": 24},          # divisible by 8 but under the minimum
    {"k_shot": 0},
    {"n_intervals": 0},
    {"interval_h": 0.0},
    {"interval_h": -0.01},
    {"tau": 0.0},
    {"lr_source": -1.0},
    {"lr_finetune": 0.0},
    {"momentum": 1.0},
    {"momentum": -0.1},
    {"alpha1": -0.5},
    {"alpha2": -0.5},
    {"eval_repeats": 0},
    {"images_per_category": 0},
    {"channels": 0},
    {"iterations_source": -1},
    {"iterations_finetune": -1},
])
def test_invalid_fields_rejected(kw):
    with pytest.raises(ConfigError):
        Config(**kw)


def test_zero_iterations_allowed():
    # zero-iteration runs are legal (a checkpoint passes through unchanged)
    cfg = Config(iterations_source=0, iterations_finetune=0)
    assert cfg.iterations_source == 0


def test_replace_revalidates():
    cfg = Config()
    assert cfg.replace(seed=9).seed == 9
    with pytest.raises(ConfigError):
        cfg.replace(image_size=31)


def test_round_trip_through_dict():
    cfg = Config(seed=3, channels=16, variant="no-fft", tau=5.0)
    again = config_from_dict(cfg.to_dict())
    assert again == cfg


def test_unknown_key_reports_its_line(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{\n "seed": 1,\n "epochs": 7\n}', encoding="utf-8")
    with pytest.raises(ConfigError, match=r"epochs.*line 3"):
        load_config(path)


def test_unknown_key_without_text_still_named():
    with pytest.raises(ConfigError, match="epochs"):
        config_from_dict({"epochs": 7})


def test_malformed_json_names_location(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('{"seed": 1,,}', encoding="utf-8")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(path)


def test_non_object_root_rejected(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text('[1, 2, 3]', encoding="utf-8")
    with pytest.raises(ConfigError, match="object"):
        load_config(path)


def test_wrong_value_type_becomes_config_error():
    with pytest.raises(ConfigError):
        config_from_dict({"seed": 1, "nonsense": True, "more": 2})


def test_load_config_accepts_partial_files(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"seed": 42, "channels": 8}), encoding="utf-8")
    cfg = load_config(path)
    assert cfg.seed == 42 and cfg.channels == 8
    assert cfg.image_size == 64  # untouched defaults survive
