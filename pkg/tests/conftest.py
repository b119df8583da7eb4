import logging

import numpy as np
import pytest

from sparsereg.core.envs import Pendulum, PointMass
from sparsereg.core.evaluation import pin_baselines
from sparsereg.db.dataset import generate
from sparsereg.models.models import AlgoHyper, DatasetSpec, RunConfig, ScoreBaselines


@pytest.fixture(autouse=True, scope="session")
def quiet_logging():
    # a pre-installed handler stops the CLI binding a StreamHandler to a CliRunner stream
    logging.getLogger("sparsereg").addHandler(logging.NullHandler())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def pointmass():
    return PointMass()


@pytest.fixture
def pendulum():
    return Pendulum()


@pytest.fixture(scope="session")
def expert_data():
    return generate(PointMass(), "expert", 400, seed=1)


@pytest.fixture
def baselines_path(tmp_path, monkeypatch):
    """Pinned placeholder baselines so runs never spend time on Monte-Carlo rollouts."""
    path = tmp_path / "baselines.json"
    pin_baselines(
        [
            ScoreBaselines(env_name="pointmass", random_score=-150.0, expert_score=-20.0),
            ScoreBaselines(env_name="pendulum", random_score=-900.0, expert_score=-100.0),
        ],
        path,
    )
    monkeypatch.setattr("sparsereg.services.runner.BASELINES_PATH", str(path))
    monkeypatch.setattr("sparsereg.main.BASELINES_PATH", str(path))
    return path


@pytest.fixture
def small_config(tmp_path, baselines_path):
    return RunConfig(
        env="pointmass",
        algorithm="bc",
        dataset=DatasetSpec(quality="expert", size=400, gen_seed=1),
        hidden_dims=[16, 16],
        total_steps=40,
        eval_interval=20,
        eval_episodes=2,
        seeds=[0],
        output_dir=tmp_path / "run",
        hyper=AlgoHyper(batch=32),
    )


@pytest.fixture(scope="session")
def return_margins():
    """Minimum mean-return gaps between behaviour tiers over 100 shared-seed episodes."""
    return {
        "pointmass": {"expert_over_medium": 0.0, "medium_over_random": 100.0},
        "pendulum": {"expert_over_medium": 1.0, "medium_over_random": 300.0},
    }
