import json
import logging

import pytest

from osgait.config import ConfigError, ExperimentConfig


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.save(tmp_path / "c.json")
    back = ExperimentConfig.load(tmp_path / "c.json")
    assert back == cfg and back.digest == cfg.digest


def test_partial_sections_merge_with_defaults():
    cfg = ExperimentConfig.from_dict({"model": {"N_p": 16}, "eval": {"ks": [1, 3]}})
    assert cfg.model.N_p == 16 and cfg.model.N_f == ExperimentConfig().model.N_f
    assert cfg.eval.ks == (1, 3)


@pytest.mark.parametrize("raw, match", [
    ({"bogus": 1}, "unknown key"),
    ({"train": {"lr": 1e-3}}, r"unknown key.*train"),
    ({"seed": "x"}, "integer"),
    ({"eval": {"ks": 3}}, "list"),
    ({"train": {"learning_rate": -1.0}}, "learning_rate"),
    ({"deterministic": 1}, "true/false"),
])
def test_invalid_configs_rejected(raw, match):
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(tmp_path / "bad.json")


def test_digest_tracks_content(caplog):
    a, b = ExperimentConfig(), ExperimentConfig.from_dict({"seed": 1})
    assert a.digest != b.digest and len(a.digest) == 64
    with caplog.at_level(logging.INFO, logger="osgait.config"):
        b.log_resolved()
    assert b.digest in caplog.text and json.dumps(b.to_dict(), sort_keys=True) in caplog.text


def test_ablation_resolves_into_model():
    cfg = ExperimentConfig.from_dict({"ablation": "v3"})
    assert not cfg.resolved_model().use_decoder and cfg.model.use_decoder
