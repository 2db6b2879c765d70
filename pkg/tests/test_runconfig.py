"""Run configuration: YAML with !param, overrides, digests and section parsing."""

import io
from types import SimpleNamespace

import pytest
from commandutils import CommandUtils
from errors import ConfigError
from logger import LOG_FILE
from runconfig import RunConfig

CONFIG = """
seed: 5
train:
  steps: !param steps=100
model:
  n_layers: 2
"""


def _options(**kwargs):
    base = dict(config_file=None, out_dir=None, seed=None, log_level=None, params=None, checkpoint=None)
    base.update(kwargs)
    return SimpleNamespace(**base)


def test_param_default_and_override():
    assert CommandUtils.readConfig(io.StringIO(CONFIG))["train"]["steps"] == 100
    assert CommandUtils.readConfig(io.StringIO(CONFIG), params={"steps": 7})["train"]["steps"] == 7
    with pytest.raises(ConfigError):
        CommandUtils.readConfig(io.StringIO("steps: !param steps\n"))
    with pytest.raises(ConfigError):
        CommandUtils.readConfig(io.StringIO("steps: [1, 2\n"))
    assert CommandUtils.readConfig(io.StringIO("")) == {}


def test_parse_params():
    assert CommandUtils.parse_params(["steps=7", "name=run", "rate=0.5"]) == {"steps": 7, "name": "run", "rate": 0.5}
    with pytest.raises(ConfigError):
        CommandUtils.parse_params(["steps"])


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(CONFIG)
    run = RunConfig.from_options(_options(config_file=str(path), seed=9, params=["steps=3"]))
    assert run.seed == 9
    assert run.section("train")["steps"] == 3
    assert run.train_config().steps == 3
    assert run.model_config(21).n_layers == 2


def test_output_location_does_not_change_digest():
    a = RunConfig({"seed": 1, "out_dir": "/tmp/a", "log_level": "debug", "log_path": "/var/tmp/logs"})
    b = RunConfig({"seed": 1, "out_dir": "/tmp/b"})
    assert "out_dir" not in a.effective()
    assert a.digest() == b.digest()
    assert RunConfig({"seed": 2}).digest() != b.digest()


def test_log_location():
    assert RunConfig({"out_dir": "/tmp/runs/r1"}).log_location() == ("/tmp/runs", "r1.log")
    assert RunConfig({"out_dir": "/tmp/runs/r1", "log_path": "/tmp/logs"}).log_location() == ("/tmp/logs", LOG_FILE)
    with pytest.raises(ConfigError):
        RunConfig({"out_dir": "/tmp/runs/r1", "log_path": "/tmp/runs/r1/logs"}).log_location()
    with pytest.raises(ConfigError):
        RunConfig({"out_dir": "/tmp/runs/r1", "log_path": "/tmp/runs/r1"}).log_location()


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig({"colour": "red"})
    with pytest.raises(ConfigError):
        RunConfig({"seed": "one"})
    with pytest.raises(ConfigError):
        RunConfig({"train": [1, 2]})
    with pytest.raises(ConfigError):
        RunConfig({"sweeps": {"layers": 3}}).sweep_section("layers")


def test_sae_section():
    run = RunConfig({"seed": 4, "sae": {"expansion": 2, "k": 3, "top_n": 5, "correlation_traces": 8}})
    config = run.sae_config(16)
    assert (config.n_features, config.k, config.seed) == (32, 3, 4)
    with pytest.raises(ConfigError):
        RunConfig({"sae": {"sparsity": 0.1}}).sae_config(16)


def test_require_file(tmp_path):
    run = RunConfig()
    with pytest.raises(ConfigError):
        run.require_file(str(tmp_path / "missing"), "trace")
    with pytest.raises(ConfigError):
        run.load_checkpoint()


def test_ordered_map_keeps_order():
    assert CommandUtils.ordered_map(lambda x: x * x, range(10), threads=4) == [x * x for x in range(10)]
