"""RunConfig loading, validation and hashing."""

import pytest
import yaml

from dense_prf.config import ENV_OUT, RESOLVED_NAME, config_from_dict, load_config, write_resolved_config
from dense_prf.errors import ConfigError


class TestLoad:
    def test_default_config_is_valid(self):
        cfg = load_config("default")
        assert cfg.prf.k == 3
        assert cfg.evaluation.metrics == ["mrr@10", "ndcg@10", "recall@1000", "hole@10"]

    def test_empty_mapping_uses_defaults(self):
        assert config_from_dict({}).model.num_heads == config_from_dict(None).model.num_heads

    def test_fast_config(self, fast_config):
        assert fast_config.prf_depths == [0, 1]
        assert fast_config.train_prf.k == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "nope.yaml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("model: [unclosed\n")
        with pytest.raises(ConfigError, match="not valid YAML"):
            load_config(path)


class TestValidation:
    def test_all_violations_reported(self):
        with pytest.raises(ConfigError) as err:
            config_from_dict({"nope": {}, "model": {"bogus": 1}, "train_prf": {"k": "three"}})
        violations = err.value.violations
        assert "unknown section 'nope'" in violations
        assert "unknown key model.bogus" in violations
        assert any(v.startswith("train_prf.k must be of type int") for v in violations)
        assert len(violations) == 3

    def test_derived_keys_not_settable(self):
        with pytest.raises(ConfigError, match="unknown key model.vocab_size"):
            config_from_dict({"model": {"vocab_size": 10}})
        with pytest.raises(ConfigError, match="unknown key prf.trained_k"):
            config_from_dict({"prf": {"trained_k": 2}})

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError, match="prf.k"):
            config_from_dict({"prf": {"k": True}})

    def test_int_accepted_for_float(self):
        assert config_from_dict({"retrieval": {"bm25_k1": 1}}).retrieval.bm25_k1 == 1.0

    def test_max_len_too_small(self):
        with pytest.raises(ConfigError, match="cannot hold"):
            config_from_dict({"model": {"max_len": 20, "query_budget": 24}})

    def test_unknown_metric(self):
        with pytest.raises(ConfigError, match="unknown metric 'map@10'"):
            config_from_dict({"evaluation": {"metrics": ["mrr@10", "map@10"]}})

    def test_bad_split(self):
        with pytest.raises(ConfigError, match="evaluation.split"):
            config_from_dict({"evaluation": {"split": "validation"}})

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError, match="must be a mapping"):
            config_from_dict({"model": [1, 2]})


class TestHash:
    def test_ignores_out_dir_and_runtime(self):
        a = config_from_dict({"paths": {"out_dir": "a"}})
        b = config_from_dict({"paths": {"out_dir": "b"}, "runtime": {"threads": 4, "log_level": "DEBUG"}})
        assert a.config_hash == b.config_hash
        assert len(a.config_hash) == 12

    def test_changes_with_model(self):
        a = config_from_dict({})
        b = config_from_dict({"model": {"seed": 7}})
        assert a.config_hash != b.config_hash

    def test_env_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv(ENV_OUT, str(tmp_path / "env"))
        assert load_config("default").paths.out_dir == str(tmp_path / "env")
        assert load_config("default", out_dir="explicit").paths.out_dir == "explicit"

    def test_resolved_config(self, tmp_path, fast_config):
        path = write_resolved_config(fast_config, tmp_path)
        assert path.name == RESOLVED_NAME
        first, *_ = path.read_text().splitlines()
        assert first == f"# config_hash: {fast_config.config_hash}"
        reloaded = config_from_dict(yaml.safe_load(path.read_text()))
        assert reloaded.config_hash == fast_config.config_hash
