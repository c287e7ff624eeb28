from pathlib import Path

import pytest

from tfms.config import (
    RunConfig,
    load_workload_spec,
    workload_spec_from_text,
    workload_spec_to_text,
)
from tfms.errors import ConfigError, WorkloadSpecError
from tfms.workload import WorkloadSpec

RUN_INI = """
[paths]
workload = data
out = data/report

[run]
matchers = oracle, truncated
seed = 4

[truncation]
m = unbounded
k = 40
n = 20

[tfms]
topn = 30
window_mins = 0
lookback_days = 2
fallback = no
parallelism = 3
"""


def test_parse_run_config():
    config = RunConfig.from_text(RUN_INI)
    assert config.matchers == ("oracle", "truncated")
    assert config.seed == 4
    assert config.truncation().m is None
    assert config.truncation().k == 40
    tfms = config.tfms()
    assert tfms.window == 0
    assert tfms.lookback == 2 * 86_400
    assert tfms.fallback is False
    assert tfms.parallelism == 3


def test_round_trip():
    config = RunConfig.from_text(RUN_INI)
    assert RunConfig.from_text(config.to_text()) == config
    assert RunConfig.from_text(RunConfig().to_text()) == RunConfig()


def test_partial_config_keeps_defaults():
    config = RunConfig.from_text("[run]\nseed = 8\n")
    assert config.seed == 8
    assert config.m == RunConfig().m


@pytest.mark.parametrize(
    "text, code",
    [
        ("[paths]\nworkload = x\ncolour = blue\n", "unknown_key"),
        ("[extras]\na = 1\n", "unknown_section"),
        ("[DEFAULT]\na = 1\n", "unknown_section"),
        ("[truncation]\nm = lots\n", "bad_value"),
        ("[truncation]\nn = 0\n", "bad_value"),
        ("[tfms]\nfallback = maybe\n", "bad_value"),
        ("[run]\nmatchers = oracle,fancy\n", "bad_value"),
        ("no section header\n", "bad_config"),
    ],
)
def test_rejects_bad_config(text, code):
    with pytest.raises(ConfigError, match=code):
        RunConfig.from_text(text)


def test_load_resolves_paths_relative_to_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(RUN_INI)
    config = RunConfig.load(path)
    assert config.workload == tmp_path / "data"
    assert config.out == tmp_path / "data" / "report"


def test_overrides_skip_none():
    config = RunConfig().with_overrides(seed=3, topn=None, out=Path("elsewhere"))
    assert config.seed == 3
    assert config.topn == RunConfig().topn
    assert config.out == Path("elsewhere")


def test_workload_spec_file(tmp_path):
    spec = WorkloadSpec(users=50, crowds=10, campaigns=20, bid_sigma=0.25)
    path = tmp_path / "spec.ini"
    path.write_text(workload_spec_to_text(spec))
    assert load_workload_spec(path) == spec
    assert workload_spec_from_text("[workload]\nusers = 9\n").users == 9


def test_workload_spec_errors():
    with pytest.raises(ConfigError, match="unknown_key"):
        workload_spec_from_text("[workload]\nusrs = 9\n")
    with pytest.raises(ConfigError, match="missing_section"):
        workload_spec_from_text("")
    with pytest.raises(ConfigError, match="bad_value"):
        workload_spec_from_text("[workload]\nusers = many\n")
    with pytest.raises(WorkloadSpecError, match="infeasible_spec"):
        workload_spec_from_text("[workload]\ncrowds = 0\n")
    with pytest.raises(FileNotFoundError):
        load_workload_spec(Path("/nonexistent/spec.ini"))
