"""Unit tests for experiment configuration loading."""

import pytest

from app.config_loader import (
    corpus_path,
    deep_merge,
    load_experiment_config,
    nest,
    parse_override,
)
from app.errors import ConfigError
from app.settings import CONFIGS_DIR, DEFAULT_CORPUS, get_settings
from core.enums import BaselineKind
from tests.helpers import write_tiny_config

pytestmark = pytest.mark.unit


@pytest.mark.parametrize(
    "item, expected",
    [
        ("dmc.schedule.target_cr=2.5", ("dmc.schedule.target_cr", 2.5)),
        ("run.seed = 7", ("run.seed", 7)),
        ('run.name="toy"', ("run.name", "toy")),
        ("run.name=toy", ("run.name", "toy")),
        ("dmc.window=[1, 2]", ("dmc.window", [1, 2])),
        ("model.dmc_enabled=true", ("model.dmc_enabled", True)),
        ("dmc.window=null", ("dmc.window", None)),
        ("baseline.kind=none", ("baseline.kind", "none")),
    ],
)
def test_parse_override(item, expected):
    assert parse_override(item) == expected


@pytest.mark.parametrize("item", ["no_equals", "=3"])
def test_malformed_override(item):
    with pytest.raises(ConfigError):
        parse_override(item)


def test_nest_and_merge():
    nested = nest({"a.b": 1, "a.c.d": 2, "e": 3})
    assert nested == {"a": {"b": 1, "c": {"d": 2}}, "e": 3}
    assert deep_merge({"a": {"b": 0, "x": 9}}, nested) == {
        "a": {"b": 1, "x": 9, "c": {"d": 2}},
        "e": 3,
    }


def test_nest_refuses_to_descend_into_scalar():
    with pytest.raises(ConfigError):
        nest({"a": 1, "a.b": 2})


def test_toml_file_is_loaded_with_relative_corpus(tmp_path):
    path = write_tiny_config(tmp_path)
    config = load_experiment_config(path)
    assert config.model.d_model == 16
    assert config.dmc.schedule.ramp_steps == 4
    assert config.data.corpus_path == (tmp_path / "corpus.txt").resolve()
    assert config.data.corpus_path.is_absolute()
    assert config.run.dtype == "float64"


def test_overrides_beat_the_file(tmp_path):
    path = write_tiny_config(tmp_path)
    config = load_experiment_config(
        path, ["dmc.schedule.target_cr=3", "baseline.kind=gqa", "run.seed=42"]
    )
    assert config.dmc.schedule.target_cr == 3.0
    assert config.dmc.schedule.ramp_steps == 4
    assert config.baseline.kind is BaselineKind.GQA
    assert config.run.seed == 42
    mapped = load_experiment_config(path, {"run.name": "mapped"})
    assert mapped.run.name == "mapped"


def test_environment_fills_keys_the_file_leaves_out(tmp_path, monkeypatch):
    path = write_tiny_config(tmp_path)
    monkeypatch.setenv("DMC_EXP__DATA__TRAIN_FRACTION", "0.75")
    monkeypatch.setenv("DMC_EXP__RUN__SEED", "11")
    config = load_experiment_config(path)
    assert config.data.train_fraction == 0.75
    assert config.run.seed == 3


def test_unknown_key_is_a_config_error(tmp_path):
    path = write_tiny_config(tmp_path)
    with pytest.raises(ConfigError) as exc_info:
        load_experiment_config(path, ["dmc.windwo=3"])
    assert any(d["loc"] == "dmc.windwo" for d in exc_info.value.details)


def test_out_of_range_value_is_a_config_error(tmp_path):
    path = write_tiny_config(tmp_path)
    with pytest.raises(ConfigError):
        load_experiment_config(path, ["data.train_fraction=1.5"])


def test_inconsistent_model_is_a_config_error(tmp_path):
    path = write_tiny_config(tmp_path)
    with pytest.raises(ConfigError, match="divisible"):
        load_experiment_config(path, ["model.n_heads=3"])


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_experiment_config(tmp_path / "nope.toml")


def test_invalid_toml(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[model\nn_layers = ", encoding="utf-8")
    with pytest.raises(ConfigError, match="TOML"):
        load_experiment_config(path)


def test_missing_corpus(tmp_path):
    path = write_tiny_config(tmp_path)
    (tmp_path / "corpus.txt").unlink()
    with pytest.raises(ConfigError, match="corpus"):
        load_experiment_config(path)
    config = load_experiment_config(path, require_corpus=False)
    assert config.data.corpus_path.name == "corpus.txt"


def test_corpus_falls_back_to_settings(tmp_path, monkeypatch):
    fallback = tmp_path / "default.txt"
    fallback.write_text("abc", encoding="utf-8")
    monkeypatch.setenv("DMC_CORPUS_PATH", str(fallback))
    get_settings.cache_clear()
    config = load_experiment_config(None)
    assert config.data.corpus_path is None
    assert corpus_path(config) == fallback


@pytest.mark.parametrize("name", ["toy.toml", "smoke.toml"])
def test_shipped_configs_validate(name):
    config = load_experiment_config(CONFIGS_DIR / name)
    assert config.data.corpus_path == DEFAULT_CORPUS.resolve()
