import json

import pytest

from poidet.config import (ConfigError, DEFAULT_CONFIG, config_hash,
                           decoder_config, load_config, scene_config,
                           source_revision)


class TestLoadConfig:
    def test_defaults_validate(self):
        cfg = load_config()
        assert cfg["model"]["channels"] == 256
        assert cfg["scene"]["grid"]["downsample"] == 8

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"modle": {}}))
        with pytest.raises(ConfigError, match="unknown config key: modle"):
            load_config(path)

    def test_unknown_nested_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"chanels": 64}}))
        with pytest.raises(ConfigError, match="model.chanels"):
            load_config(path)

    def test_partial_override_merges(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"model": {"queries": 12}}))
        cfg = load_config(path)
        assert cfg["model"]["queries"] == 12
        assert cfg["model"]["channels"] == 256

    def test_bad_json_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.json")

    @pytest.mark.parametrize("override,match", [
        ({"model": {"channels": 30}}, "divide evenly"),
        ({"model": {"poi_mode": "bogus"}}, "poi_mode"),
        ({"optim": {"lr": 0.0}}, "optim.lr"),
        ({"optim": {"schedule": "cosine"}}, "schedule"),
        ({"scene": {"n_boxes": -1}}, "n_boxes"),
        ({"eval": {"thresholds": []}}, "thresholds"),
        ({"seed": -3}, "seed"),
        ({"scene": {"class_sizes": []}}, "class_sizes"),
        ({"scene": {"grid": {"x_max": 24.3}}}, "not integral"),
    ])
    def test_invalid_values_rejected(self, override, match):
        with pytest.raises(ConfigError, match=match):
            load_config(overrides=override)

    def test_defaults_not_mutated(self):
        cfg = load_config(overrides={"model": {"queries": 5}})
        cfg["model"]["queries"] = 1
        assert DEFAULT_CONFIG["model"]["queries"] == 32


class TestDerivedConfigs:
    def test_scene_config(self):
        scfg = scene_config(load_config())
        assert scfg.num_classes == 3
        assert scfg.grid.nx == 48 and scfg.grid.ny == 48
        assert scfg.n_cameras == 2

    def test_decoder_config(self):
        dcfg = decoder_config(load_config())
        assert dcfg.channels == 256
        assert dcfg.groups == 4
        assert dcfg.num_classes == 3
        assert dcfg.cg == 64


class TestHashing:
    def test_hash_stable(self):
        assert config_hash(load_config()) == config_hash(load_config())

    def test_hash_sensitive_to_values(self):
        a = config_hash(load_config())
        b = config_hash(load_config(overrides={"seed": 9}))
        assert a != b

    def test_source_revision_format(self):
        rev = source_revision()
        assert len(rev) == 12
        assert all(c in "0123456789abcdef" for c in rev)
        assert source_revision() == rev
