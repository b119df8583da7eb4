"""Offline RL learners (BC, TD3+BC, IQL) and the shared training loop.

Each learner owns an AgentState and exposes `update(batch)` for one gradient
step plus `managed_networks()`, the networks Sparse-Reg masks together with
the objective their saliency is scored on.
"""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from tqdm import tqdm

from sparsereg.core import tensor as T
from sparsereg.core.evaluation import BASE_COLUMNS, LearningCurve
from sparsereg.core.exceptions import ConfigError, DivergenceError, UsageError
from sparsereg.core.nn import Mlp, OutputTransform, build_mlp, hooks_for, polyak_update, regularized_loss
from sparsereg.core.optim import Optimizer
from sparsereg.core.sparse_reg import ManagedNetwork, Mask, SparseRegulator, layer_sparsity_report
from sparsereg.core.tensor import Tensor
from sparsereg.db.dataset import Batch, OfflineDataset, sample_batch
from sparsereg.models.models import AlgoHyper, NoRegularizer, SparsityConfig

logger = logging.getLogger(__name__)

# lambda normaliser floor for TD3+BC when every Q estimate is exactly zero
Q_SCALE_FLOOR = 1e-12


@dataclass
class SeedStreams:
    """Independent random streams derived from one run seed."""

    init: np.random.Generator
    noise: np.random.Generator
    data: np.random.Generator
    saliency: np.random.Generator
    eval_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "SeedStreams":
        init, noise, data, saliency, evaluation = np.random.SeedSequence(seed).spawn(5)
        return cls(
            init=np.random.default_rng(init),
            noise=np.random.default_rng(noise),
            data=np.random.default_rng(data),
            saliency=np.random.default_rng(saliency),
            eval_seed=int(evaluation.generate_state(1)[0]),
        )


@dataclass
class AgentState:
    actor: Mlp
    hyper: AlgoHyper
    critics: Optional[tuple[Mlp, Mlp]] = None
    value_net: Optional[Mlp] = None
    target_actor: Optional[Mlp] = None
    target_critics: Optional[tuple[Mlp, Mlp]] = None
    masks: dict[str, list[Mask]] = field(default_factory=dict)
    optimizers: dict[str, Optimizer] = field(default_factory=dict)
    step: int = 0
    actor_updates: int = 0


def expectile_loss(diff: Tensor, expectile: float) -> Tensor:
    """mean(|tau - 1{u < 0}| * u^2) for u = target - prediction."""
    weight = np.where(diff.data < 0, 1.0 - expectile, expectile)
    return T.mean(T.mul(T.square(diff), weight))


def mse(prediction: Tensor, target) -> Tensor:
    return T.mean(T.square(T.sub(prediction, target)))


def _column(values: np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1, 1)


class OfflineAlgorithm(ABC):
    name: str
    loss_names: tuple[str, ...]

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        act_bound: float,
        hidden_dims: list[int],
        hyper: AlgoHyper,
        regularizer=None,
        streams: Optional[SeedStreams] = None,
    ):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.act_bound = act_bound
        self.hidden_dims = list(hidden_dims)
        self.hyper = hyper
        self.regularizer = regularizer or NoRegularizer()
        self.streams = streams or SeedStreams.from_seed(0)
        self.agent = self._build()

    # construction

    def _mlp(self, in_dim: int, out_dim: int, bounded: bool = False) -> Mlp:
        transform = OutputTransform("tanh_bounded", self.act_bound) if bounded else OutputTransform()
        return build_mlp(
            [in_dim, *self.hidden_dims, out_dim],
            self.streams.init,
            output_transform=transform,
            hooks=hooks_for(self.regularizer),
        )

    def _actor(self) -> Mlp:
        return self._mlp(self.obs_dim, self.act_dim, bounded=True)

    def _critic(self) -> Mlp:
        return self._mlp(self.obs_dim + self.act_dim, 1)

    def _optimizer(self, params) -> Optimizer:
        if self.regularizer.kind == "weight_decay":
            return Optimizer(params, kind="adamw", lr=self.hyper.lr, weight_decay=self.regularizer.coef)
        return Optimizer(params, kind="adam", lr=self.hyper.lr)

    @abstractmethod
    def _build(self) -> AgentState:
        pass

    # training

    @abstractmethod
    def update(self, batch: Batch) -> dict[str, float]:
        """One gradient step; returns the pre-step losses by name."""

    @abstractmethod
    def managed_networks(self) -> list[ManagedNetwork]:
        pass

    def networks(self) -> dict[str, Mlp]:
        return {m.name: m.net for m in self.managed_networks()}

    def _masks_for(self, *names: str) -> Optional[list]:
        if not self.agent.masks:
            return None
        masks = []
        for name in names:
            masks.extend(self.agent.masks[name])
        return masks

    def _check_loss(self, name: str, loss: Tensor) -> float:
        value = loss.item()
        if not math.isfinite(value) or abs(value) > self.hyper.divergence_threshold:
            raise DivergenceError(self.agent.step, name, value)
        return value

    def _step(self, optimizer_name: str, loss_name: str, loss: Tensor, *mask_names: str) -> float:
        value = self._check_loss(loss_name, loss)
        optimizer = self.agent.optimizers[optimizer_name]
        optimizer.zero_grad()
        loss.backward()
        optimizer.step(self._masks_for(*(mask_names or (optimizer_name,))))
        return value

    def _q(self, critic: Mlp, observations, actions, mode: str = "train") -> Tensor:
        return critic(T.concat([T.as_tensor(observations), T.as_tensor(actions)], axis=1), mode=mode)

    def _min_target_q(self, observations, actions) -> np.ndarray:
        tq1, tq2 = self.agent.target_critics
        return np.minimum(
            self._q(tq1, observations, actions, "eval").data,
            self._q(tq2, observations, actions, "eval").data,
        )

    def behavior_loss(self, batch: Batch) -> Tensor:
        return mse(self.agent.actor(batch.observations), batch.actions)


class BehaviorCloning(OfflineAlgorithm):
    name = "bc"
    loss_names = ("bc_loss",)

    def _build(self) -> AgentState:
        actor = self._actor()
        return AgentState(actor=actor, hyper=self.hyper, optimizers={"actor": self._optimizer(actor.parameters())})

    def actor_loss(self, batch: Batch) -> Tensor:
        return regularized_loss(self.behavior_loss(batch), self.agent.actor.parameters(), self.regularizer)

    def update(self, batch: Batch) -> dict[str, float]:
        self.agent.step += 1
        loss = self._step("actor", "bc_loss", self.actor_loss(batch))
        self.agent.actor_updates += 1
        return {"bc_loss": loss}

    def managed_networks(self) -> list[ManagedNetwork]:
        return [ManagedNetwork("actor", self.agent.actor, self.behavior_loss)]


class TD3BC(OfflineAlgorithm):
    name = "td3bc"
    loss_names = ("critic_loss", "actor_loss")

    def _build(self) -> AgentState:
        actor = self._actor()
        critics = (self._critic(), self._critic())
        return AgentState(
            actor=actor,
            hyper=self.hyper,
            critics=critics,
            target_actor=actor.copy(),
            target_critics=(critics[0].copy(), critics[1].copy()),
            optimizers={
                "actor": self._optimizer(actor.parameters()),
                "critic": self._optimizer(critics[0].parameters() + critics[1].parameters()),
            },
        )

    def td_target(self, batch: Batch, smoothing: bool = True) -> np.ndarray:
        h, bound = self.hyper, self.act_bound
        next_actions = self.agent.target_actor(batch.next_observations, mode="eval").data
        if smoothing:
            noise = self.streams.noise.normal(0.0, h.policy_noise * bound, size=next_actions.shape)
            noise = np.clip(noise, -h.noise_clip * bound, h.noise_clip * bound)
            next_actions = np.clip(next_actions + noise, -bound, bound)
        next_q = self._min_target_q(batch.next_observations, next_actions)
        return _column(batch.rewards) + h.gamma * (1.0 - _column(batch.dones)) * next_q

    def critic_loss(self, batch: Batch, target: Optional[np.ndarray] = None, which: tuple[int, ...] = (0, 1)) -> Tensor:
        target = self.td_target(batch) if target is None else target
        losses = [mse(self._q(self.agent.critics[i], batch.observations, batch.actions), target) for i in which]
        return losses[0] if len(losses) == 1 else T.add(losses[0], losses[1])

    def actor_loss(self, batch: Batch) -> Tensor:
        policy_actions = self.agent.actor(batch.observations)
        q = self._q(self.agent.critics[0], batch.observations, policy_actions)
        lam = self.hyper.td3bc_alpha / max(float(np.mean(np.abs(q.data))), Q_SCALE_FLOOR)
        loss = T.add(T.mul(T.mean(q), -lam), mse(policy_actions, batch.actions))
        return regularized_loss(loss, self.agent.actor.parameters(), self.regularizer)

    def update(self, batch: Batch) -> dict[str, float]:
        agent = self.agent
        agent.step += 1
        losses = {"critic_loss": self._step("critic", "critic_loss", self.critic_loss(batch), "critic1", "critic2")}
        if agent.step % self.hyper.policy_freq == 0:
            losses["actor_loss"] = self._step("actor", "actor_loss", self.actor_loss(batch))
            agent.actor_updates += 1
            polyak_update(agent.target_actor, agent.actor, self.hyper.tau)
            for target, source in zip(agent.target_critics, agent.critics):
                polyak_update(target, source, self.hyper.tau)
        return losses

    def managed_networks(self) -> list[ManagedNetwork]:
        agent = self.agent

        def critic_saliency(i):
            # noiseless target so scoring never draws from the smoothing-noise stream
            return lambda batch: self.critic_loss(batch, self.td_target(batch, smoothing=False), which=(i,))

        return [
            ManagedNetwork("actor", agent.actor, self.actor_loss, [agent.target_actor]),
            ManagedNetwork("critic1", agent.critics[0], critic_saliency(0), [agent.target_critics[0]]),
            ManagedNetwork("critic2", agent.critics[1], critic_saliency(1), [agent.target_critics[1]]),
        ]


class IQL(OfflineAlgorithm):
    name = "iql"
    loss_names = ("value_loss", "critic_loss", "actor_loss")

    def _build(self) -> AgentState:
        actor = self._actor()
        critics = (self._critic(), self._critic())
        value_net = self._mlp(self.obs_dim, 1)
        return AgentState(
            actor=actor,
            hyper=self.hyper,
            critics=critics,
            value_net=value_net,
            target_critics=(critics[0].copy(), critics[1].copy()),
            optimizers={
                "actor": self._optimizer(actor.parameters()),
                "critic": self._optimizer(critics[0].parameters() + critics[1].parameters()),
                "value": self._optimizer(value_net.parameters()),
            },
        )

    def value_loss(self, batch: Batch) -> Tensor:
        target_q = self._min_target_q(batch.observations, batch.actions)
        v = self.agent.value_net(batch.observations)
        return expectile_loss(T.sub(target_q, v), self.hyper.iql_expectile)

    def critic_loss(self, batch: Batch, which: tuple[int, ...] = (0, 1)) -> Tensor:
        h = self.hyper
        next_v = self.agent.value_net(batch.next_observations, mode="eval").data
        target = _column(batch.rewards) + h.gamma * (1.0 - _column(batch.dones)) * next_v
        losses = [mse(self._q(self.agent.critics[i], batch.observations, batch.actions), target) for i in which]
        return losses[0] if len(losses) == 1 else T.add(losses[0], losses[1])

    def awr_weights(self, batch: Batch) -> np.ndarray:
        advantage = self._min_target_q(batch.observations, batch.actions) - self.agent.value_net(
            batch.observations, mode="eval"
        ).data
        with np.errstate(over="ignore"):
            weights = np.exp(self.hyper.iql_beta * advantage)
        return np.clip(weights, 0.0, self.hyper.awr_clip).reshape(-1)

    def actor_loss(self, batch: Batch) -> Tensor:
        per_sample = T.mean(T.square(T.sub(self.agent.actor(batch.observations), batch.actions)), axis=1)
        loss = T.mean(T.mul(per_sample, self.awr_weights(batch)))
        return regularized_loss(loss, self.agent.actor.parameters(), self.regularizer)

    def update(self, batch: Batch) -> dict[str, float]:
        agent = self.agent
        agent.step += 1
        losses = {"value_loss": self._step("value", "value_loss", self.value_loss(batch))}
        losses["critic_loss"] = self._step("critic", "critic_loss", self.critic_loss(batch), "critic1", "critic2")
        losses["actor_loss"] = self._step("actor", "actor_loss", self.actor_loss(batch))
        agent.actor_updates += 1
        for target, source in zip(agent.target_critics, agent.critics):
            polyak_update(target, source, self.hyper.tau)
        return losses

    def managed_networks(self) -> list[ManagedNetwork]:
        agent = self.agent
        return [
            ManagedNetwork("actor", agent.actor, self.actor_loss),
            ManagedNetwork(
                "critic1", agent.critics[0], lambda b: self.critic_loss(b, which=(0,)), [agent.target_critics[0]]
            ),
            ManagedNetwork(
                "critic2", agent.critics[1], lambda b: self.critic_loss(b, which=(1,)), [agent.target_critics[1]]
            ),
            ManagedNetwork("value", agent.value_net, self.value_loss),
        ]


ALGORITHMS: dict[str, type[OfflineAlgorithm]] = {"bc": BehaviorCloning, "td3bc": TD3BC, "iql": IQL}


def make_algorithm(name: str, *args, **kwargs) -> OfflineAlgorithm:
    try:
        cls = ALGORITHMS[name]
    except KeyError:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}") from None
    return cls(*args, **kwargs)


EvalHook = Callable[[OfflineAlgorithm, int], dict[str, float]]


def _sparsity_columns(algo: OfflineAlgorithm, regulator: Optional[SparseRegulator]) -> dict[str, float]:
    """Per-tensor sparsity, pooled global sparsity and the last refresh's mask change."""
    columns, kept, total, flips = {}, 0, 0, 0
    for managed in algo.managed_networks():
        if regulator is not None:
            masks = regulator.masks[managed.name]
            previous = regulator.previous_masks.get(managed.name)
            report = regulator.report(managed.name)
        else:
            masks = [Mask.ones_like(p) for p in managed.net.parameters()]
            previous = None
            report = layer_sparsity_report(masks, None, [n for n, _ in managed.net.named_parameters()])
        for name, value in report.per_tensor.items():
            columns[f"sparsity:{managed.name}.{name}"] = value
        kept += sum(m.k for m in masks)
        total += sum(m.size for m in masks)
        if previous is not None:
            flips += sum(int(np.count_nonzero(a.bits != b.bits)) for a, b in zip(masks, previous))
    head = {
        "global_sparsity": 1.0 - kept / total if total else 0.0,
        "mask_change": flips / total if total else 0.0,
    }
    return {**head, **columns}


def _no_metrics(algo: OfflineAlgorithm, step: int) -> dict[str, float]:
    nan = float("nan")
    return {c: nan for c in BASE_COLUMNS[1:6]}


def train(
    algo: OfflineAlgorithm,
    dataset: OfflineDataset,
    total_steps: int,
    sparsity_cfg: Optional[SparsityConfig] = None,
    eval_hook: Optional[EvalHook] = None,
    eval_interval: int = 100,
    progress: bool = False,
) -> LearningCurve:
    """Run `total_steps` updates, evaluating at step 0 and every `eval_interval` steps.

    Each step: refresh masks when due, draw a batch, update. A DivergenceError
    leaves with the curve recorded so far attached as `curve`.
    """
    if len(dataset) == 0:
        raise UsageError("training needs a non-empty dataset")
    if total_steps < 0 or eval_interval < 1:
        raise UsageError(f"invalid schedule total_steps={total_steps} eval_interval={eval_interval}")
    streams = algo.streams
    eval_hook = eval_hook or _no_metrics
    regulator = None
    if sparsity_cfg is not None:
        regulator = SparseRegulator(
            sparsity_cfg,
            algo.managed_networks(),
            lambda rng, size: sample_batch(dataset, size, rng),
            streams.saliency,
        )
        regulator.maybe_refresh(0)
        algo.agent.masks = regulator.masks

    last_losses = {name: float("nan") for name in algo.loss_names}
    curve = None

    def record(step: int) -> None:
        nonlocal curve
        metrics = eval_hook(algo, step)
        row = {"step": step, **{c: metrics[c] for c in BASE_COLUMNS[1:6]}}
        sparsity = _sparsity_columns(algo, regulator)
        row["global_sparsity"] = sparsity.pop("global_sparsity")
        row["mask_change"] = sparsity.pop("mask_change")
        row.update(last_losses)
        row.update(sparsity)
        if curve is None:
            curve = LearningCurve(columns=list(row))
        curve.append(row)

    record(0)
    try:
        for step in tqdm(range(total_steps), desc=algo.name, disable=not progress, leave=False):
            if regulator is not None and regulator.maybe_refresh(step):
                logger.debug("%s masks refreshed at step %d", algo.name, step)
            batch = sample_batch(dataset, algo.hyper.batch, streams.data)
            last_losses.update(algo.update(batch))
            if (step + 1) % eval_interval == 0:
                record(step + 1)
    except DivergenceError as e:
        e.curve = curve
        logger.warning("%s diverged: %s", algo.name, e)
        raise
    return curve
