"""Deterministic toy continuous-control tasks and their scripted controllers.

Both environments recover their physical state from the observation, so a
stored (s, a) pair replays to exactly the same (r, s') through `step`.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Literal

import numpy as np

from sparsereg.core.exceptions import ConfigError, NumericError, UsageError
from sparsereg.models.models import EnvSpec

logger = logging.getLogger(__name__)

PolicyQuality = Literal["expert", "medium", "random"]

MEDIUM_NOISE = 0.3


@dataclass(frozen=True)
class EnvState:
    observation: np.ndarray
    t: int = 0


class Environment(ABC):
    spec: EnvSpec

    def reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng([self.spec.dynamics_seed, seed])
        return EnvState(observation=self._initial_observation(rng), t=0)

    def step(self, state: EnvState, action) -> tuple[EnvState, float, bool]:
        if state.t >= self.spec.horizon:
            raise UsageError(f"episode already finished at t={state.t}")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.act_dim)
        if not np.isfinite(action).all():
            raise NumericError(f"non-finite action {action!r}")
        action = np.clip(action, -self.spec.act_bound, self.spec.act_bound)
        observation, reward = self._transition(state.observation, action)
        t = state.t + 1
        return EnvState(observation=observation, t=t), float(reward), t == self.spec.horizon

    @abstractmethod
    def _initial_observation(self, rng: np.random.Generator) -> np.ndarray:
        pass

    @abstractmethod
    def _transition(self, observation: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, float]:
        pass

    @abstractmethod
    def expert_action(self, observation: np.ndarray) -> np.ndarray:
        pass


class PointMass(Environment):
    """1-D point mass chasing a goal. Observation: [x, v, goal - x]."""

    DT = 0.05
    KP = 4.0
    KD = 4.0

    def __init__(self, horizon: int = 200, dynamics_seed: int = 0):
        self.spec = EnvSpec(
            name="pointmass", obs_dim=3, act_dim=1, act_bound=1.0, horizon=horizon, dynamics_seed=dynamics_seed
        )

    def _initial_observation(self, rng):
        x, goal = rng.uniform(-1.0, 1.0, size=2)
        return np.array([x, 0.0, goal - x])

    def _transition(self, observation, action):
        x, v, offset = observation
        goal = x + offset
        a = action[0]
        reward = -((x - goal) ** 2) - 0.01 * a * a
        x_next = x + self.DT * v
        v_next = v + self.DT * a
        return np.array([x_next, v_next, goal - x_next]), reward

    def expert_action(self, observation):
        _, v, offset = observation
        a = self.KP * offset - self.KD * v
        return np.clip(np.array([a]), -self.spec.act_bound, self.spec.act_bound)


class Pendulum(Environment):
    """Inverted pendulum, theta = 0 upright. Observation: [cos theta, sin theta, theta_dot]."""

    DT = 0.05
    GRAVITY = 10.0
    LENGTH = 1.0
    MASS = 1.0
    MAX_SPEED = 8.0
    KP = 30.0
    KD = 8.0

    def __init__(self, horizon: int = 200, dynamics_seed: int = 0):
        self.spec = EnvSpec(
            name="pendulum", obs_dim=3, act_dim=1, act_bound=15.0, horizon=horizon, dynamics_seed=dynamics_seed
        )

    def _initial_observation(self, rng):
        theta = rng.uniform(-np.pi, np.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), theta_dot])

    def _transition(self, observation, action):
        cos_t, sin_t, theta_dot = observation
        theta = np.arctan2(sin_t, cos_t)
        a = action[0]
        reward = -(theta**2 + 0.1 * theta_dot**2 + 0.001 * a * a)
        accel = (self.GRAVITY / self.LENGTH) * np.sin(theta) + a / (self.MASS * self.LENGTH**2)
        theta_dot_next = np.clip(theta_dot + self.DT * accel, -self.MAX_SPEED, self.MAX_SPEED)
        theta_next = theta + self.DT * theta_dot_next
        return np.array([np.cos(theta_next), np.sin(theta_next), theta_dot_next]), reward

    def expert_action(self, observation):
        cos_t, sin_t, theta_dot = observation
        theta = np.arctan2(sin_t, cos_t)
        a = -self.KP * theta - self.KD * theta_dot
        return np.clip(np.array([a]), -self.spec.act_bound, self.spec.act_bound)


ENVIRONMENTS = {"pointmass": PointMass, "pendulum": Pendulum}


def make_env(name: str, **kwargs) -> Environment:
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


def scripted_policy(
    env: Environment,
    quality: str,
    state: EnvState,
    rng: np.random.Generator,
    noise_scale: float = MEDIUM_NOISE,
) -> np.ndarray:
    bound = env.spec.act_bound
    if quality == "expert":
        return env.expert_action(state.observation)
    if quality == "medium":
        action = env.expert_action(state.observation)
        if noise_scale > 0:
            action = action + rng.normal(0.0, noise_scale * bound, size=action.shape)
        return np.clip(action, -bound, bound)
    if quality == "random":
        return rng.uniform(-bound, bound, size=env.spec.act_dim)
    raise ConfigError(f"unknown policy quality {quality!r}")


class ScriptedPolicy:
    """Batched wrapper so scripted controllers plug into policy evaluation."""

    def __init__(self, env: Environment, quality: str, seed: int = 0, noise_scale: float = MEDIUM_NOISE):
        if quality not in ("expert", "medium", "random"):
            raise ConfigError(f"unknown policy quality {quality!r}")
        self.env = env
        self.quality = quality
        self.noise_scale = noise_scale
        self.rng = np.random.default_rng(seed)

    def __call__(self, observations: np.ndarray) -> np.ndarray:
        return np.stack(
            [
                scripted_policy(self.env, self.quality, EnvState(obs), self.rng, self.noise_scale)
                for obs in np.atleast_2d(observations)
            ]
        )
