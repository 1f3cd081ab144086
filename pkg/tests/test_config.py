import json
import math

import pytest

from smoothlab.config import ConfigError, load_config, parse_config
from smoothlab.energy import EnergyParams


def test_empty_config_gives_defaults():
    cfg = parse_config({})
    assert cfg.energy_params() == EnergyParams()
    assert cfg.gd.learning_rate == 0.01 and cfg.gd.iterations == 100
    assert cfg.train_config().crop == 64 and cfg.train_config().epochs == 30
    assert cfg.train_config(network="PAPER26").crop == 224


def test_overrides_layer_on_preset():
    cfg = parse_config({"preset": "texture", "energy": {"lambda_e": 0.2}, "gd": {"iterations": 7}})
    params = cfg.energy_params()
    assert params.alpha == 20.0 and params.h == 5 and params.lambda_e == 0.2
    assert cfg.gd.iterations == 7


def test_infinity_string():
    assert parse_config({"energy": {"c1": "inf"}}).energy_params().c1 == math.inf


@pytest.mark.parametrize("doc,key", [
    ({"enrgy": {}}, "enrgy"),
    ({"energy": {"alpah": 1}}, "energy.alpah"),
    ({"gd": {"lr": 1}}, "gd.lr"),
    ({"energy": {"h": 4}}, "energy"),
    ({"irls": {"p_mode": "dynamic"}}, "irls"),
    ({"preset": "nope"}, "preset"),
    ({"train": {"epochs": -1}}, "train"),
])
def test_errors_name_the_key(doc, key):
    with pytest.raises(ConfigError) as err:
        parse_config(doc)
    assert str(err.value).startswith(key)


def test_resolved_dump_round_trips(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"preset": "detail"}))
    cfg = load_config(path)
    doc = json.loads(cfg.dumps())
    assert doc["energy"]["c1"] == "inf" and doc["preset"] == "detail"
    assert set(doc) == {"preset", "energy", "gd", "irls", "train"}


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        load_config(path)
