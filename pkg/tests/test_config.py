import json

import pytest

from svquant.config import RunConfig, from_dict, load_config
from svquant.exceptions import ConfigurationError


def test_defaults():
    cfg = from_dict({})
    assert cfg.train.epochs == 40 and cfg.train.decay_epochs == (20, 32)
    assert cfg.finetune.epochs == 20 and cfg.finetune.decay_epochs == (10, 16)
    assert cfg.quant == {"scheme": "uniform", "bits": 8, "alpha": 3.0}
    assert cfg.eval["window"] == 400 and cfg.eval["hop"] == 300


def test_single_seed_reaches_every_section():
    cfg = from_dict({"seed": 3, "corpus": {"seed": 99}}, seed=7)
    assert cfg.seed == cfg.corpus.seed == cfg.model.seed == cfg.train.seed == cfg.finetune.seed == 7


def test_finetune_quant_keys():
    cfg = from_dict({"finetune": {"scheme": "POT", "bits": 4, "alpha": 2, "epochs": 6}})
    assert cfg.quant == {"scheme": "pot", "bits": 4, "alpha": 2.0}
    assert cfg.finetune.stage == "qat" and cfg.finetune.decay_epochs == (3, 4)


@pytest.mark.parametrize("raw", [
    {"bogus": {}},
    {"model": {"width": 3}},
    {"finetune": {"bits": 9}},
    {"finetune": {"scheme": "log"}},
    {"finetune": {"alpha": 0}},
    {"eval": {"k": 3}},
    [],
])
def test_rejects_bad_config(raw):
    with pytest.raises(ConfigurationError):
        from_dict(raw)


def test_round_trip_through_file(tmp_path):
    cfg = from_dict({"model": {"channels": 12}, "probe": {"epochs": 3}}, seed=4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert isinstance(again, RunConfig)


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_config(path)
