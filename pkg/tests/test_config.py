import json

import pytest

from stann.config import RunConfig, dump_config, load_config, parse_config, variant_overrides
from stann.errors import ConfigError


def test_parse_comments_and_types():
    cfg = parse_config("# header\nlam = 0.25  # weight\nN=4\nvariant = 'D'\nflag = true\n\n")
    assert cfg == {"lam": 0.25, "N": 4, "variant": "D", "flag": True}


@pytest.mark.parametrize("text", ["lam 0.1", "= 3", "a = 1\na = 2"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_from_dict_coerces_and_validates():
    cfg = RunConfig.from_dict({"lam": "0.2", "epochs": 10.0, "origins": "3", "data": "x.csv"})
    assert cfg.train.lam == 0.2 and cfg.train.epochs == 10 and cfg.origins == 3 and cfg.data == "x.csv"
    for bad in ({"nope": 1}, {"epochs": "many"}, {"lr": True}, {"lr": -1.0}, {"strategy": "greedy"}, {"origins": 0}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)


def test_dump_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"lam": 0.123456789, "variant": "R", "rf": "0.02", "seeds": 3})
    p = tmp_path / "run.cfg"
    p.write_text(dump_config(cfg))
    assert RunConfig.from_dict(load_config(p)) == cfg


def test_manifest_json_is_a_config(tmp_path):
    cfg = RunConfig.from_dict({"tau": 5})
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps({"command": "cv", "config": cfg.to_dict()}))
    assert RunConfig.from_dict(load_config(p)) == cfg
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_variant_flags():
    assert variant_overrides("stnn") == {"variant": "plain", "max_lag": 1}
    assert variant_overrides("stann-d") == {"variant": "D"}
    with pytest.raises(ConfigError):
        variant_overrides("lstm")


def test_to_dict_is_flat_and_sorted():
    d = RunConfig().to_dict()
    assert list(d) == sorted(d)
    assert "lam" in d and "strategy" in d and "train" not in d
