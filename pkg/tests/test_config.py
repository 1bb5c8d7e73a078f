import json

import pytest

from cvmstep.config import SCENARIOS, ConfigError, ExperimentConfig, reference_config
from cvmstep.stepper import StepperKnobs


def test_reference_config_covers_module_defaults():
    ref = reference_config()
    assert ref["stepper.timer_value"] == StepperKnobs().timer_value
    assert ref["classifier.hidden"] == [182, 64]
    assert ref["fixture.sectors"] == 70 and ref["fixture.known"] == 34
    assert all("." in k for k in ref)


def test_overrides_and_sections():
    cfg = ExperimentConfig.from_mapping({"stepper.flush_tlb": False, "search.threads": 4, "noise.p_noise": 0})
    assert cfg.section("stepper").flush_tlb is False
    assert cfg.section("search").threads == 4
    assert cfg["noise.p_noise"] == 0.0 and isinstance(cfg["noise.p_noise"], float)
    assert cfg.section("classifier").hidden == (182, 64)


@pytest.mark.parametrize("bad", [
    {"nope.key": 1},
    {"run.scenario": "teleport"},
    {"run.threads": 0},
    {"stepper.timer_value": "six"},
    {"stepper.flush_tlb": 1},
    {"stepper.timer_value": 0},
    {"stepper": {"timer_value": 3}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping(bad)


def test_load_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"run.seed": 5, "run.scenario": "nemesis"}))
    cfg = ExperimentConfig.load(p, {"run.seed": 9})
    assert cfg["run.seed"] == 9 and cfg["run.scenario"] in SCENARIOS
    assert json.loads(cfg.dumps())["run.scenario"] == "nemesis"
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")
