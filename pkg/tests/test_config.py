import pytest

from mtdistill import config as cfgmod
from mtdistill.config import ConfigValidationError


def test_every_experiment_has_a_bundled_config():
    assert set(cfgmod.EXPERIMENTS) <= set(cfgmod.builtin_names())
    for name in cfgmod.builtin_names():
        cfg = cfgmod.resolve(name)
        assert cfg["experiment"] == name


def test_table2_config_has_ten_seeds():
    assert len(cfgmod.resolve("toy-table2")["seeds"]) >= 10


def test_validation_lists_every_problem():
    cfg = {"schema": 2, "experiment": "nope", "seeds": [], "distill": {"tau": 1.5, "teacher": {"epochs": 0}},
           "bogus": 1}
    with pytest.raises(ConfigValidationError) as e:
        cfgmod.validate(cfg)
    text = "\n".join(e.value.problems)
    for needle in ("schema version", "unknown experiment", "non-empty", "tau", "epochs", "'bogus'"):
        assert needle in text
    assert len(e.value.problems) == 6


def test_type_errors():
    with pytest.raises(ConfigValidationError, match="must be int"):
        cfgmod.validate({"schema": 1, "experiment": "cond1", "seeds": [0], "dataset": {"n_A": "many"}})
    with pytest.raises(ConfigValidationError, match="list of integers"):
        cfgmod.validate({"schema": 1, "experiment": "cond1", "seeds": [0.5]})


def test_overrides_and_seeds(tmp_path):
    cfg = cfgmod.resolve("cond1", ["distill.student.epochs=7", "scenario.seed=3"], seeds=[4, 5],
                         out=tmp_path)
    assert cfg["distill"]["student"]["epochs"] == 7
    assert cfg["scenario"]["seed"] == 3
    assert cfg["seeds"] == [4, 5]
    assert cfg["output_dir"] == str(tmp_path)
    with pytest.raises(ConfigValidationError):
        cfgmod.resolve("cond1", ["distill.tau"])


def test_fingerprint_ignores_key_order():
    a = {"x": 1, "y": {"b": 2, "a": 3}}
    b = {"y": {"a": 3, "b": 2}, "x": 1}
    assert cfgmod.fingerprint(a) == cfgmod.fingerprint(b)
    assert cfgmod.fingerprint(a) != cfgmod.fingerprint({"x": 2, "y": {"a": 3, "b": 2}})


def test_missing_config():
    with pytest.raises(ConfigValidationError, match="no config file"):
        cfgmod.load("does-not-exist")


def test_load_from_path(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("schema: 1\nexperiment: toy-st\nseeds: [1]\n")
    assert cfgmod.resolve(str(p))["seeds"] == [1]
