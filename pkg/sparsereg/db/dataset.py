import logging
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from sparsereg.core.envs import Environment, scripted_policy
from sparsereg.core.exceptions import ConfigError, DimensionError, NumericError, SplitError, UsageError

logger = logging.getLogger(__name__)

DatasetQuality = Literal["expert", "medium", "random", "medium_replay", "expert_replay"]
Split = Literal["full", "train", "validation"]

REPLAY_TIERS = {"medium_replay": "medium", "expert_replay": "expert"}
QUALITIES = ("expert", "medium", "random", "medium_replay", "expert_replay")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class Batch:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return self.observations.shape[0]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


class OfflineDataset:
    """Immutable column store of transitions with trajectory bookkeeping."""

    def __init__(
        self,
        observations: np.ndarray,
        actions: np.ndarray,
        rewards: np.ndarray,
        next_observations: np.ndarray,
        dones: np.ndarray,
        env_name: str,
        quality: str,
        generator_seed: int,
        split: Split = "full",
        trajectory_ids: Optional[np.ndarray] = None,
    ):
        n = observations.shape[0]
        if n == 0:
            raise UsageError("an offline dataset needs at least one transition")
        if not (actions.shape[0] == rewards.shape[0] == next_observations.shape[0] == dones.shape[0] == n):
            raise DimensionError("transition columns have different lengths")
        if observations.shape != next_observations.shape:
            raise DimensionError("observation and next-observation widths differ")
        for column in (observations, actions, rewards, next_observations):
            if not np.isfinite(column).all():
                raise NumericError("dataset contains non-finite values")
        self.observations = _frozen(np.asarray(observations, dtype=np.float64))
        self.actions = _frozen(np.asarray(actions, dtype=np.float64))
        self.rewards = _frozen(np.asarray(rewards, dtype=np.float64))
        self.next_observations = _frozen(np.asarray(next_observations, dtype=np.float64))
        self.dones = _frozen(np.asarray(dones, dtype=bool))
        if trajectory_ids is None:
            trajectory_ids = trajectory_ids_from_dones(self.dones)
        self.trajectory_ids = _frozen(np.asarray(trajectory_ids, dtype=np.int64))
        self.env_name = env_name
        self.quality = quality
        self.generator_seed = generator_seed
        self.split = split

    def __len__(self) -> int:
        return self.observations.shape[0]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            s=self.observations[i],
            a=self.actions[i],
            r=float(self.rewards[i]),
            s_next=self.next_observations[i],
            done=bool(self.dones[i]),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (
            (self.env_name, self.quality, self.generator_seed, self.split)
            == (other.env_name, other.quality, other.generator_seed, other.split)
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_observations, other.next_observations)
            and np.array_equal(self.dones, other.dones)
        )

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    @property
    def act_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def num_trajectories(self) -> int:
        return len(np.unique(self.trajectory_ids))

    def as_batch(self) -> Batch:
        return Batch(self.observations, self.actions, self.rewards, self.next_observations, self.dones)

    def subset(self, index: np.ndarray, split: Split) -> "OfflineDataset":
        return OfflineDataset(
            self.observations[index],
            self.actions[index],
            self.rewards[index],
            self.next_observations[index],
            self.dones[index],
            env_name=self.env_name,
            quality=self.quality,
            generator_seed=self.generator_seed,
            split=split,
            trajectory_ids=self.trajectory_ids[index],
        )

    def trajectory_returns(self) -> np.ndarray:
        ids = np.unique(self.trajectory_ids)
        return np.array([self.rewards[self.trajectory_ids == i].sum() for i in ids])

    def manifest(self) -> dict:
        return {
            "env_name": self.env_name,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "quality": self.quality,
            "seed": self.generator_seed,
            "count": len(self),
            "split": self.split,
            "endianness": "little",
        }


def trajectory_ids_from_dones(dones: np.ndarray) -> np.ndarray:
    """Trajectories are contiguous and end on a done flag (the last may be truncated)."""
    dones = np.asarray(dones, dtype=bool)
    ends_before = np.concatenate([[0], np.cumsum(dones)[:-1]])
    return ends_before.astype(np.int64)


def _episode_quality(quality: str, episode: int) -> str:
    if quality in REPLAY_TIERS:
        # trajectory-level 50/50 mixture, tier policy on even episodes
        return REPLAY_TIERS[quality] if episode % 2 == 0 else "random"
    return quality


def generate(env: Environment, quality: str, n_transitions: int, seed: int) -> OfflineDataset:
    if quality not in QUALITIES:
        raise ConfigError(f"unknown dataset quality {quality!r}; choose from {QUALITIES}")
    if n_transitions < 1:
        raise UsageError(f"n_transitions must be >= 1, got {n_transitions}")
    rng = np.random.default_rng(seed)
    columns = {k: [] for k in ("s", "a", "r", "s_next", "done", "traj")}
    episode = 0
    collected = 0
    while collected < n_transitions:
        episode_quality = _episode_quality(quality, episode)
        state = env.reset(int(rng.integers(2**31 - 1)))
        done = False
        while not done and collected < n_transitions:
            action = scripted_policy(env, episode_quality, state, rng)
            next_state, reward, done = env.step(state, action)
            columns["s"].append(state.observation)
            columns["a"].append(np.clip(action, -env.spec.act_bound, env.spec.act_bound))
            columns["r"].append(reward)
            columns["s_next"].append(next_state.observation)
            columns["done"].append(done)
            columns["traj"].append(episode)
            state = next_state
            collected += 1
        episode += 1
    logger.info("generated %d transitions (%d episodes) of %s/%s", collected, episode, env.spec.name, quality)
    return OfflineDataset(
        np.array(columns["s"]),
        np.array(columns["a"]),
        np.array(columns["r"]),
        np.array(columns["s_next"]),
        np.array(columns["done"]),
        env_name=env.spec.name,
        quality=quality,
        generator_seed=seed,
        trajectory_ids=np.array(columns["traj"]),
    )


def split(ds: OfflineDataset, validation_fraction: float = 0.2) -> tuple[OfflineDataset, OfflineDataset]:
    """Move whole trajectories, last first, to validation until its share reaches the fraction."""
    if not 0.0 < validation_fraction < 1.0:
        raise SplitError(f"validation fraction must be in (0, 1), got {validation_fraction}")
    ids = list(dict.fromkeys(ds.trajectory_ids.tolist()))
    if len(ids) < 2:
        raise SplitError("splitting needs at least two trajectories")
    counts = {i: int(np.count_nonzero(ds.trajectory_ids == i)) for i in ids}
    held_out: list[int] = []
    held = 0
    for traj in reversed(ids):
        if held / len(ds) >= validation_fraction:
            break
        held_out.append(traj)
        held += counts[traj]
    if len(held_out) == len(ids):
        raise SplitError("validation would consume every trajectory; lower the fraction")
    is_validation = np.isin(ds.trajectory_ids, held_out)
    return ds.subset(~is_validation, "train"), ds.subset(is_validation, "validation")


def sample_batch(ds: OfflineDataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform sampling with replacement."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    index = rng.integers(0, len(ds), size=batch_size)
    return Batch(
        ds.observations[index],
        ds.actions[index],
        ds.rewards[index],
        ds.next_observations[index],
        ds.dones[index],
    )
