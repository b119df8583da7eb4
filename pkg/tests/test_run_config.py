import textwrap

import pytest
from pydantic import ValidationError

from sparsereg.core.exceptions import ConfigError
from sparsereg.models.models import AlgoHyper, DatasetSpec, RunConfig, SparseRegularizer
from sparsereg.services.run_config import (
    dump_snapshot,
    format_validation_error,
    load_run_config,
    merge_overrides,
    read_config_file,
)

CONFIG = """
[run]
env = pendulum
algorithm = iql
hidden_dims = 32, 32
total_steps = 200
eval_interval = 50
seeds = 0,1,2

[dataset]
quality = medium_replay
size = 1000
gen_seed = 7

[regularizer]
kind = sparse
sparsity = 0.9
mode = SFI

[hyper]
batch = 64
iql_beta = 10
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(textwrap.dedent(CONFIG))
    return path


def test_ini_sections_map_onto_the_run_config(config_file):
    config = load_run_config(config_file)
    assert (config.env, config.algorithm) == ("pendulum", "iql")
    assert config.hidden_dims == [32, 32]
    assert config.seeds == [0, 1, 2]
    assert config.dataset == DatasetSpec(quality="medium_replay", size=1000, gen_seed=7)
    assert config.regularizer == SparseRegularizer(sparsity=0.9, mode="SFI")
    assert config.hyper == AlgoHyper(batch=64, iql_beta=10.0)
    assert config.sparsity_config().refresh_cutoff == 0


def test_flags_win_over_the_file(config_file):
    config = load_run_config(
        config_file,
        {"total_steps": 400, "dataset": {"size": 50, "quality": None}, "regularizer": {"sparsity": 0.5}},
    )
    assert config.total_steps == 400
    assert config.dataset.size == 50 and config.dataset.quality == "medium_replay"
    assert config.regularizer.sparsity == 0.5 and config.regularizer.mode == "SFI"


def test_switching_regularizer_kind_drops_file_fields(config_file):
    config = load_run_config(config_file, {"regularizer": {"kind": "dropout", "rate": 0.2}})
    assert config.regularizer.kind == "dropout"
    assert config.regularizer.rate == 0.2


def test_merge_skips_unset_flags():
    assert merge_overrides({"env": "pendulum"}, {"env": None, "seeds": [4]}) == {"env": "pendulum", "seeds": [4]}


def test_snapshot_reloads_to_the_same_config(config_file, tmp_path):
    config = load_run_config(config_file, {"output_dir": str(tmp_path / "out")})
    snapshot = dump_snapshot(config, tmp_path / "config.snapshot")
    assert load_run_config(snapshot) == config


def test_snapshot_of_defaults(tmp_path):
    config = RunConfig(output_dir=tmp_path)
    assert load_run_config(dump_snapshot(config, tmp_path / "snap.ini")) == config


def test_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[runner]\nenv = pendulum\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


def test_unparseable_file(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("env = pendulum\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


@pytest.mark.parametrize(
    "overrides, location",
    [
        ({"env": "cartpole"}, "env"),
        ({"total_steps": 10, "eval_interval": 100}, "config"),
        ({"seeds": [1, 1]}, "config"),
        ({"hyper": {"gamma": 1.5}}, "hyper.gamma"),
        ({"regularizer": {"kind": "l1", "sparsity": 0.5}}, "regularizer.l1.sparsity"),
        ({"regularizer": {"kind": "sparse", "mode": "SPU", "refresh_interval": 500, "refresh_cutoff": 10}}, "config"),
    ],
)
def test_invalid_configs_are_reported(overrides, location):
    with pytest.raises(ValidationError) as exc:
        load_run_config(None, overrides)
    assert format_validation_error(exc.value).split(":")[0] == location
