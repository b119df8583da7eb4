import numpy as np
import pytest

from sparsereg.core.envs import Pendulum, PointMass, ScriptedPolicy
from sparsereg.core.evaluation import (
    LearningCurve,
    action_mse,
    aggregate,
    compute_baselines,
    evaluate_policy,
    load_baselines,
    normalized_score,
    pin_baselines,
    rollout_returns,
    score_quantiles,
)
from sparsereg.core.exceptions import ConfigError, UsageError
from sparsereg.core.nn import build_mlp
from sparsereg.models.models import ScoreBaselines

BASE = ScoreBaselines(env_name="pointmass", random_score=-100.0, expert_score=-20.0)


class TestNormalizedScore:
    def test_anchors(self):
        assert normalized_score(-20.0, BASE) == 1.0
        assert normalized_score(-100.0, BASE) == 0.0
        assert normalized_score(-60.0, BASE) == 0.5
        assert normalized_score(0.0, BASE) == 1.25

    def test_invariant_under_affine_reward_change(self):
        shifted = ScoreBaselines(env_name="pointmass", random_score=3 * -100.0 + 7, expert_score=3 * -20.0 + 7)
        for score in (-90.0, -35.0, 10.0):
            assert normalized_score(3 * score + 7, shifted) == pytest.approx(normalized_score(score, BASE))

    def test_degenerate_baselines(self):
        with pytest.raises(ValueError):
            ScoreBaselines(env_name="pointmass", random_score=1.0, expert_score=1.0)
        degenerate = ScoreBaselines.model_construct(env_name="pointmass", random_score=1.0, expert_score=1.0)
        with pytest.raises(ConfigError):
            normalized_score(1.0, degenerate)


class TestEvaluatePolicy:
    def test_single_episode_has_zero_spread(self, pointmass):
        _, std = evaluate_policy(ScriptedPolicy(pointmass, "expert"), pointmass, 1, seed=0)
        assert std == 0.0

    def test_deterministic_for_a_seed(self, pendulum, rng):
        actor = build_mlp([3, 8, 1], rng)
        assert evaluate_policy(actor, pendulum, 3, seed=4) == evaluate_policy(actor, pendulum, 3, seed=4)

    def test_needs_an_episode(self, pointmass):
        with pytest.raises(UsageError):
            evaluate_policy(ScriptedPolicy(pointmass, "expert"), pointmass, 0, seed=0)

    def test_std_is_population_std(self, pointmass):
        returns = rollout_returns(ScriptedPolicy(pointmass, "random", seed=3), pointmass, 4, seed=1)
        mean, std = evaluate_policy(ScriptedPolicy(pointmass, "random", seed=3), pointmass, 4, seed=1)
        assert mean == returns.mean()
        assert std == returns.std(ddof=0) > 0.0

    @pytest.mark.parametrize("env_cls", [PointMass, Pendulum])
    def test_expert_normalises_to_one_on_fresh_episodes(self, env_cls):
        env = env_cls()
        baselines = compute_baselines(env, n_episodes=200, seed=3)
        expert, _ = evaluate_policy(ScriptedPolicy(env, "expert", 11), env, 200, seed=11)
        assert normalized_score(expert, baselines) == pytest.approx(1.0, abs=0.05)

    def test_random_normalises_to_zero_on_fresh_episodes(self, pendulum):
        baselines = compute_baselines(pendulum, n_episodes=200, seed=3)
        random, _ = evaluate_policy(ScriptedPolicy(pendulum, "random", 11), pendulum, 200, seed=11)
        assert normalized_score(random, baselines) == pytest.approx(0.0, abs=0.05)


def test_action_mse_of_a_zero_actor(rng):
    actor = build_mlp([3, 4, 1], rng)
    for p in actor.parameters():
        p.data[...] = 0.0
    observations = rng.normal(size=(10, 3))
    assert action_mse(actor, observations, np.ones((10, 1))) == 1.0
    with pytest.raises(UsageError):
        action_mse(actor, observations[:0], np.ones((0, 1)))


def _curve(returns, cadence=10):
    curve = LearningCurve(columns=["step", "return_mean"])
    for i, r in enumerate(returns):
        curve.append({"step": i * cadence, "return_mean": r})
    return curve


class TestAggregate:
    baselines = {
        "pointmass": ScoreBaselines(env_name="pointmass", random_score=0.0, expert_score=10.0),
        "pendulum": ScoreBaselines(env_name="pendulum", random_score=-100.0, expert_score=0.0),
    }

    def test_average_over_environments_then_seeds(self):
        curves = {
            "pointmass": {0: _curve([0.0, 10.0]), 1: _curve([0.0, 5.0])},
            "pendulum": {0: _curve([-100.0, -100.0]), 1: _curve([-100.0, -50.0])},
        }
        agg = aggregate(curves, self.baselines)
        assert agg.steps == [0, 10]
        np.testing.assert_allclose(agg.mean, [0.0, 0.5])
        np.testing.assert_allclose(agg.std, [0.0, 0.0])
        assert agg.final_quantiles["median"] == pytest.approx(0.5)

    def test_step_mismatch(self):
        curves = {"pointmass": {0: _curve([0.0, 1.0])}, "pendulum": {0: _curve([0.0, 1.0], cadence=5)}}
        with pytest.raises(UsageError):
            aggregate(curves, self.baselines)

    def test_missing_seed(self):
        curves = {"pointmass": {0: _curve([0.0]), 1: _curve([0.0])}, "pendulum": {0: _curve([-1.0])}}
        with pytest.raises(UsageError):
            aggregate(curves, self.baselines)

    @pytest.mark.parametrize("extra_env", ["pendulum", "pointmass"])
    def test_extra_seed_in_any_environment(self, extra_env):
        curves = {"pointmass": {0: _curve([0.0])}, "pendulum": {0: _curve([-1.0])}}
        curves[extra_env][1] = _curve([0.0] if extra_env == "pointmass" else [-1.0])
        with pytest.raises(UsageError, match="seed sets differ"):
            aggregate(curves, self.baselines)

    def test_csv_has_one_row_per_step(self, tmp_path):
        curves = {"pointmass": {0: _curve([0.0, 10.0])}, "pendulum": {0: _curve([-100.0, 0.0])}}
        path = aggregate(curves, self.baselines).to_csv(tmp_path / "aggregate.csv")
        assert path.read_text().splitlines() == ["step,normalized_mean,normalized_std", "0,0.0,0.0", "10,1.0,0.0"]


def test_score_quantiles():
    q = score_quantiles([0.1, 0.2, 0.3, 0.4, 0.5])
    assert q["median"] == pytest.approx(0.3)
    assert (q["min"], q["max"]) == (0.1, 0.5)
    with pytest.raises(UsageError):
        score_quantiles([])


class TestLearningCurve:
    def test_csv_round_trip(self, tmp_path):
        curve = LearningCurve(columns=["step", "return_mean", "train_mse"])
        curve.append({"step": 0, "return_mean": -1.5, "train_mse": float("nan")})
        curve.append({"step": 5, "return_mean": 0.1 + 0.2, "train_mse": 1e-300})
        path = curve.to_csv(tmp_path / "curve.csv")
        assert path.read_text().splitlines()[1] == "0,-1.5,nan"
        loaded = LearningCurve.from_csv(path)
        assert loaded.steps == [0, 5]
        assert loaded.final("return_mean") == 0.1 + 0.2
        assert loaded.final("train_mse") == 1e-300

    def test_cadence_is_constant(self):
        curve = _curve([0.0, 0.0])
        with pytest.raises(UsageError):
            curve.append({"step": 15, "return_mean": 0.0})
        with pytest.raises(UsageError):
            curve.append({"step": 10, "return_mean": 0.0})

    def test_rows_must_carry_every_column(self):
        curve = _curve([0.0])
        with pytest.raises(UsageError):
            curve.append({"step": 10})

    def test_step_column_comes_first(self):
        with pytest.raises(UsageError):
            LearningCurve(columns=["return_mean", "step"])

    def test_unknown_column(self):
        with pytest.raises(UsageError):
            _curve([0.0]).column("val_mse")


class TestBaselineCache:
    def test_pinned_values_are_returned(self, tmp_path):
        path = pin_baselines([BASE], tmp_path / "b.json")
        assert load_baselines("pointmass", path) == BASE

    def test_missing_without_create(self, tmp_path):
        with pytest.raises(ConfigError):
            load_baselines("pendulum", tmp_path / "none.json", create=False)

    def test_pin_merges(self, tmp_path):
        path = tmp_path / "b.json"
        pin_baselines([BASE], path)
        other = ScoreBaselines(env_name="pendulum", random_score=-5.0, expert_score=-1.0)
        pin_baselines([other], path)
        assert load_baselines("pointmass", path, create=False) == BASE
        assert load_baselines("pendulum", path, create=False) == other
