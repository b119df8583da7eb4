"""Policy evaluation, normalized scores and learning curves."""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from sparsereg.core.envs import Environment, ScriptedPolicy, make_env
from sparsereg.core.exceptions import ConfigError, DimensionError, UsageError
from sparsereg.core.nn import Mlp
from sparsereg.models.models import ScoreBaselines

logger = logging.getLogger(__name__)

BASELINE_EPISODES = 100
BASE_COLUMNS = (
    "step",
    "return_mean",
    "return_std",
    "normalized_score",
    "train_mse",
    "val_mse",
    "global_sparsity",
    "mask_change",
)

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class LearningCurve:
    """Evaluation rows at a constant step cadence; `columns[0]` is always `step`."""

    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.columns or self.columns[0] != "step":
            raise UsageError("the first learning-curve column must be 'step'")
        for row in list(self.rows):
            self._check(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def steps(self) -> list[int]:
        return [int(r[0]) for r in self.rows]

    @property
    def cadence(self) -> Optional[int]:
        steps = self.steps
        return steps[1] - steps[0] if len(steps) > 1 else None

    def _check(self, row: Sequence[float]) -> None:
        if len(row) != len(self.columns):
            raise DimensionError(f"row has {len(row)} values for {len(self.columns)} columns")

    def append(self, row: Mapping[str, float]) -> None:
        if list(row) != self.columns:
            raise UsageError(f"row columns {list(row)} do not match curve columns {self.columns}")
        values = [row[c] for c in self.columns]
        step = int(values[0])
        if self.rows:
            last = int(self.rows[-1][0])
            if step <= last:
                raise UsageError(f"curve steps must increase, got {step} after {last}")
            if self.cadence is not None and step - last != self.cadence:
                raise UsageError(f"evaluation cadence changed from {self.cadence} to {step - last}")
        self.rows.append(values)

    def column(self, name: str) -> np.ndarray:
        try:
            i = self.columns.index(name)
        except ValueError:
            raise UsageError(f"curve has no column {name!r}") from None
        return np.array([r[i] for r in self.rows], dtype=np.float64)

    def final(self, name: str) -> float:
        if not self.rows:
            raise UsageError("empty learning curve")
        return float(self.column(name)[-1])

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([str(int(row[0]))] + [repr(float(v)) for v in row[1:]])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "LearningCurve":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            columns = next(reader)
            rows = [[float(v) for v in line] for line in reader]
        curve = cls(columns=columns)
        for row in rows:
            curve.append(dict(zip(columns, row)))
        return curve


def greedy_policy(actor: Mlp) -> Policy:
    """Deterministic batched policy from an actor network (eval mode, no noise)."""

    def act(observations: np.ndarray) -> np.ndarray:
        return actor(np.atleast_2d(observations), mode="eval").data

    return act


def rollout_returns(policy: Policy, env: Environment, n_episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of `n_episodes` lock-stepped episodes with derived reset seeds."""
    if n_episodes < 1:
        raise UsageError(f"n_episodes must be >= 1, got {n_episodes}")
    reset_seeds = np.random.SeedSequence(seed).generate_state(n_episodes)
    states = [env.reset(int(s)) for s in reset_seeds]
    returns = np.zeros(n_episodes)
    # all episodes share the horizon, so they finish together
    for _ in range(env.spec.horizon):
        actions = np.asarray(policy(np.stack([s.observation for s in states])), dtype=np.float64)
        next_states = []
        for i, (state, action) in enumerate(zip(states, actions)):
            state, reward, _ = env.step(state, action)
            returns[i] += reward
            next_states.append(state)
        states = next_states
    return returns


def evaluate_policy(actor: Union[Mlp, Policy], env: Environment, n_episodes: int, seed: int) -> tuple[float, float]:
    policy = greedy_policy(actor) if isinstance(actor, Mlp) else actor
    returns = rollout_returns(policy, env, n_episodes, seed)
    return float(returns.mean()), float(returns.std())


def normalized_score(score: float, baselines: ScoreBaselines) -> float:
    span = baselines.expert_score - baselines.random_score
    if span == 0:
        raise ConfigError(f"degenerate baselines for {baselines.env_name}: expert == random")
    return (score - baselines.random_score) / span


def action_mse(actor: Mlp, observations: np.ndarray, actions: np.ndarray) -> float:
    """Exact mean of (pi(s) - a)^2 over a whole split."""
    if len(observations) == 0:
        raise UsageError("action_mse needs a non-empty split")
    predicted = actor(observations, mode="eval").data
    if predicted.shape != np.shape(actions):
        raise DimensionError(f"policy outputs {list(predicted.shape)} for actions {list(np.shape(actions))}")
    diff = predicted - actions
    return float(np.mean(diff * diff))


def score_quantiles(scores: Sequence[float]) -> dict[str, float]:
    values = np.asarray(scores, dtype=np.float64)
    if values.size == 0:
        raise UsageError("no scores to summarise")
    q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q25", "median", "q75", "max"), (float(v) for v in q)))


@dataclass
class AggregateCurve:
    steps: list[int]
    mean: np.ndarray
    std: np.ndarray
    final_quantiles: dict[str, float]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["step", "normalized_mean", "normalized_std"])
            for step, mean, std in zip(self.steps, self.mean, self.std):
                writer.writerow([str(step), repr(float(mean)), repr(float(std))])
        return path


def aggregate(
    curves: Mapping[str, Mapping[int, LearningCurve]],
    baselines: Mapping[str, ScoreBaselines],
) -> AggregateCurve:
    """Normalized return averaged over environments, then over seeds.

    `curves` maps env name -> seed -> curve. Every seed must appear for every
    environment and every curve must share the same evaluation steps.
    """
    if not curves:
        raise UsageError("nothing to aggregate")
    env_names = sorted(curves)
    seeds = sorted(curves[env_names[0]])
    for env_name in env_names[1:]:
        other = sorted(curves[env_name])
        if other != seeds:
            raise UsageError(f"seed sets differ across environments: {env_names[0]} has {seeds}, {env_name} has {other}")
    if not seeds:
        raise UsageError("nothing to aggregate")
    reference = curves[env_names[0]][seeds[0]].steps
    per_seed = []
    for seed in seeds:
        per_env = []
        for env_name in env_names:
            curve = curves[env_name][seed]
            if curve.steps != reference:
                raise UsageError(f"{env_name}/seed {seed} was evaluated at different steps")
            base = baselines[env_name]
            per_env.append([normalized_score(r, base) for r in curve.column("return_mean")])
        per_seed.append(np.mean(per_env, axis=0))
    per_seed = np.array(per_seed)
    return AggregateCurve(
        steps=list(reference),
        mean=per_seed.mean(axis=0),
        std=per_seed.std(axis=0),
        final_quantiles=score_quantiles(per_seed[:, -1]),
    )


def compute_baselines(env: Environment, n_episodes: int = BASELINE_EPISODES, seed: int = 0) -> ScoreBaselines:
    """Monte-Carlo returns of the scripted expert and uniform-random policies."""
    expert, _ = evaluate_policy(ScriptedPolicy(env, "expert", seed), env, n_episodes, seed)
    random, _ = evaluate_policy(ScriptedPolicy(env, "random", seed), env, n_episodes, seed)
    logger.info("baselines for %s: expert %.3f random %.3f", env.spec.name, expert, random)
    return ScoreBaselines(env_name=env.spec.name, random_score=random, expert_score=expert)


def load_baselines(env_name: str, path: Union[str, Path], create: bool = True) -> ScoreBaselines:
    """Pinned baselines from the JSON fixture, computed and stored on first use."""
    path = Path(path)
    pinned = json.loads(path.read_text()) if path.exists() else {}
    if env_name in pinned:
        return ScoreBaselines.model_validate(pinned[env_name])
    if not create:
        raise ConfigError(f"no pinned baselines for {env_name} in {path}")
    baselines = compute_baselines(make_env(env_name))
    pin_baselines([baselines], path)
    return baselines


def pin_baselines(baselines: Sequence[ScoreBaselines], path: Union[str, Path]) -> Path:
    path = Path(path)
    pinned = json.loads(path.read_text()) if path.exists() else {}
    for b in baselines:
        pinned[b.env_name] = b.model_dump()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(pinned, indent=2, sort_keys=True) + "\n")
    return path

