import json
import os

import pytest

from config import (
    ENV_OUT_DIR,
    ENV_THREADS,
    ExperimentConfig,
    load_experiment_config,
    m_ranges,
    parse_experiment_config,
)
from dynattn import DROPOUT, FUSION, GENERATION_RULE, STATIC
from errors import ConfigError


def minimal_document(**overrides):
    document = {
        "model": {"task": "classifier"},
        "data": {"source": "synth"},
        "io": {"out_dir": "runs/test"},
    }
    document.update(overrides)
    return document


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("DYNATTN_CONFIG", ENV_OUT_DIR, ENV_THREADS, "DYNATTN_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


def test_minimal_document_gets_defaults():
    config = parse_experiment_config(minimal_document())
    assert isinstance(config, ExperimentConfig)
    assert config.defense.mode == STATIC
    assert config.attack.query_budget == 500
    assert config.eval.suites == ["stability"]
    assert config.io.checkpoint_path.endswith("model.ckpt")
    assert len(m_ranges(config)) == 55


def test_unknown_key_names_its_path():
    document = minimal_document()
    document["model"]["hidden"] = 4
    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(document)
    assert excinfo.value.field == "model.hidden"

    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(minimal_document(extra=1))
    assert excinfo.value.field == "extra"


def test_missing_required_key():
    document = minimal_document(model={})
    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(document)
    assert excinfo.value.field == "model.task"

    document = minimal_document()
    del document["data"]
    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(document)
    assert excinfo.value.field == "data"


@pytest.mark.parametrize("section, key, value", [
    ("model", "layers", "2"),
    ("model", "layers", True),
    ("defense", "rectify_decoder", 1),
    ("eval", "mu_grid", 1.0),
    ("eval", "seeds", [0, "one"]),
])
def test_type_errors(section, key, value):
    document = minimal_document()
    document.setdefault(section, {})[key] = value
    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(document)
    assert excinfo.value.field.startswith(f"{section}.{key}")


def test_integers_are_accepted_as_floats():
    config = parse_experiment_config(minimal_document(defense={"beta": 1}))
    assert config.defense.beta == 1.0
    assert isinstance(config.defense.beta, float)


@pytest.mark.parametrize("override, field", [
    ({"eval": {"suites": ["bogus"]}}, "eval.suites"),
    ({"attack": {"threat": "physical"}}, "attack.threat"),
    ({"data": {"source": "file"}}, "data.path"),
    ({"defense": {"beta": 1.5}}, "defense.beta"),
    ({"eval": {"retrain_seeds": [1]}}, "eval.retrain_seeds"),
    ({"eval": {"mask_rate": 0.0}}, "eval.mask_rate"),
    ({"eval": {"confidence_edges": [0.0, 0.7, 0.7, 1.0]}}, "eval.confidence_edges"),
    ({"threads": 0}, "threads"),
])
def test_range_errors(override, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_experiment_config(minimal_document(**override))
    assert excinfo.value.field == field


def test_poison_section():
    config = parse_experiment_config(minimal_document(
        data={"source": "synth", "poison": {"trigger": "cf", "target": 1, "rate": 0.05}}))
    assert config.data.poison.trigger == "cf"
    assert config.data.poison.rate == 0.05


def test_to_mode_keeps_knobs():
    config = parse_experiment_config(minimal_document(defense={"mode": "fusion", "beta": 0.4, "dropout_rate": 0.2}))
    mode = config.defense.to_mode()
    assert mode.kind == FUSION
    assert mode.rectifier.beta == 0.4
    assert mode.dropout_rate == 0.2
    assert config.defense.to_mode(DROPOUT).kind == DROPOUT
    assert config.defense.to_mode(STATIC).rectifier is None

    generation = parse_experiment_config(minimal_document(
        defense={"mode": "dynattn", "task_rule": "generation", "m_a": 0.2, "m_b_lo": 0.3, "m_b_hi": 0.4}))
    assert generation.defense.to_mode().rectifier.task_rule == GENERATION_RULE


def test_config_hash_is_stable():
    a = parse_experiment_config(minimal_document())
    b = parse_experiment_config(minimal_document())
    assert a.config_hash() == b.config_hash()
    b.seed = 7
    assert a.config_hash() != b.config_hash()


def test_load_with_overrides(tmp_path, monkeypatch):
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(minimal_document()), encoding="utf-8")

    config = load_experiment_config(str(path), seed=3, out_dir=str(tmp_path / "out"), threads=2)
    assert config.seed == 3
    assert config.io.out_dir == str(tmp_path / "out")
    assert config.threads == 2

    monkeypatch.setenv(ENV_THREADS, "4")
    monkeypatch.setenv(ENV_OUT_DIR, str(tmp_path / "env"))
    config = load_experiment_config(str(path))
    assert config.threads == 4
    assert config.io.out_dir == str(tmp_path / "env")

    monkeypatch.setenv(ENV_THREADS, "many")
    with pytest.raises(ConfigError):
        load_experiment_config(str(path))


def test_load_errors(tmp_path, monkeypatch):
    with pytest.raises(ConfigError):
        load_experiment_config(None)
    with pytest.raises(ConfigError):
        load_experiment_config(str(tmp_path / "missing.json"))
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_experiment_config(str(broken))

    monkeypatch.setenv("DYNATTN_CONFIG", str(broken))
    with pytest.raises(ConfigError) as excinfo:
        load_experiment_config(None)
    assert "invalid JSON" in str(excinfo.value)


def test_example_document_is_valid():
    path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "experiment-config.example.json")
    config = load_experiment_config(path)
    assert config.defense.to_mode().is_dynamic
    assert config.eval.seeds == [0, 1, 2, 3, 4]
