import json
from pathlib import Path

import pytest

from tabdiff.config import RunConfig, config_hash
from tabdiff.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_are_the_desk_run():
    cfg = RunConfig()
    dit = cfg.dit_config()
    assert (dit.depth, dit.dim, dit.latent_size, dit.in_channels, dit.max_T) == (4, 128, 8, 8, 1000)
    assert (cfg.data.height, cfg.sample.steps, cfg.sample.eta) == (64, 750, 0.0)
    assert RunConfig.load(None) == cfg


def test_missing_keys_take_defaults():
    cfg = RunConfig.from_dict({"train": {"iterations": 10}})
    assert cfg.train.iterations == 10 and cfg.train.lr == 1e-4
    assert cfg.data.rows == (2, 5)


def test_json_round_trip():
    cfg = RunConfig.from_dict({"data": {"rows": [3, 4]}, "sample": {"count": 2, "seeds": [5, 6]},
                               "dit": {"depth": 2}, "vae": {"widths": [8, 8, 8]}})
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.data.rows == (3, 4) and back.vae.widths == (8, 8, 8)
    assert back.dit_config().depth == 2


@pytest.mark.parametrize("doc,match", [
    ({"train": {"itrations": 5}}, "unknown key train.itrations"),
    ({"trainer": {}}, "unknown config section"),
    ({"train": 3}, "must be an object"),
    ({"train": {"iterations": "many"}}, "train"),
    ({"train": {"iterations": 0}}, "iterations"),
    ({"train": {"T": 500}}, "disagrees"),
    ({"schedule": {"beta_start": 0.0}}, "schedule"),
    ({"data": {"height": 128, "width": 128}}, "preset"),
    ({"data": {"rows": [2, 8]}}, "rows capacity"),
    ({"vae": {"epochs": 0}}, "vae"),
    ({"sample": {"steps": 1001}}, "sample.steps"),
    ({"sample": {"count": 3, "seeds": [1]}}, "sample.seeds"),
    ({"eval": {"extractor": "inception"}}, "eval.extractor"),
    ({"dit": {"heads": 5}}, "divisible"),
])
def test_invalid_configs(doc, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(doc)


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{train: }")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(bad)
    bad.write_text("[]")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)


def test_preset_switch_follows_image_size():
    cfg = RunConfig().with_preset("paper-512")
    assert (cfg.data.height, cfg.data.width) == (512, 512)
    assert cfg.dit_config().latent_size == 64 and cfg.dit_config().dim == 768
    assert not RunConfig().with_conditioning(False).dit_config().conditional
    with pytest.raises(ConfigError):
        RunConfig().with_preset("paper-1024")


def test_config_hash():
    h = config_hash({"a": 1, "b": [1, 2]}, "x")
    assert len(h) == 10 and int(h, 16) >= 0
    assert h == config_hash({"b": (1, 2), "a": 1}, "x")
    assert h != config_hash({"a": 2, "b": [1, 2]}, "x")
    assert config_hash(RunConfig().to_dict()) == config_hash(json.loads(RunConfig().to_json()))


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    cfg = RunConfig.load(path)
    name = path.stem
    assert cfg.train.preset == name.removesuffix("-conditional").removesuffix("-unconditional")
    assert cfg.train.conditional == (not name.endswith("-unconditional"))
    dit = cfg.dit_config()
    assert dit.latent_size * 8 == cfg.data.height


def test_full_scale_configs():
    for size, latent in (("256", 32), ("512", 64)):
        for mode in ("conditional", "unconditional"):
            cfg = RunConfig.load(CONFIGS / f"paper-{size}-{mode}.json")
            dit = cfg.dit_config()
            assert (dit.depth, dit.dim, dit.heads, dit.patch, dit.latent_size) == (12, 768, 12, 2, latent)
            assert cfg.sample.steps == 750 and cfg.schedule.T == 1000
            assert dit.in_channels == (8 if mode == "conditional" else 4)
