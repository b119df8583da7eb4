"""Connection-sensitivity masks for sparse training.

Each managed network gets a binary mask per parameter tensor, built from
saliency |theta_q * dL/dtheta_q| on a batch of training data and a global
top-k over the whole network. Target networks share the mask object of their
source. In SPU mode masks are recomputed every `refresh_interval` steps until
`refresh_cutoff`; in SFI mode they are fixed after step 0.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from sparsereg.core.exceptions import ConfigError, DimensionError, NumericError, UsageError
from sparsereg.core.nn import Mlp
from sparsereg.core.tensor import Tensor
from sparsereg.models.models import SparsityConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Mask:
    bits: np.ndarray
    k: int

    def __post_init__(self):
        if self.bits.dtype != np.bool_:
            raise ValueError("mask bits must be boolean")
        if int(self.bits.sum()) != self.k:
            raise ValueError(f"mask popcount {int(self.bits.sum())} != k={self.k}")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Mask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits=bits, k=int(bits.sum()))

    @classmethod
    def ones_like(cls, param: Tensor) -> "Mask":
        return cls(bits=np.ones(param.data.shape, dtype=bool), k=param.size)

    @property
    def size(self) -> int:
        return int(self.bits.size)


@dataclass(frozen=True)
class SaliencyScore:
    scores: np.ndarray


@dataclass
class SparsityReport:
    per_tensor: dict[str, float]
    global_sparsity: float
    mask_change_fraction: Optional[float] = None


def keep_count(total: int, sparsity: float) -> int:
    """Number of parameters kept, round((1 - sparsity) * total) with halves rounded up."""
    return int(math.floor((1.0 - sparsity) * total + 0.5))


def compute_saliency(net: Mlp, loss_fn: Callable[[object], Tensor], batch) -> list[SaliencyScore]:
    if len(batch) == 0:
        raise UsageError("saliency needs a non-empty batch")
    net.zero_grad()
    loss = loss_fn(batch)
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss while scoring saliency: {loss.data!r}")
    if loss.requires_grad:
        loss.backward()
    scores = [SaliencyScore(np.abs(p.data * p.grad)) for p in net.parameters()]
    net.zero_grad()
    return scores


def top_k_mask(scores: Sequence[SaliencyScore], sparsity: float) -> list[Mask]:
    """Global top-k over every tensor; equal scores are broken by ascending flat index."""
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError(f"sparsity must be in [0, 1), got {sparsity}")
    flat = np.concatenate([s.scores.ravel() for s in scores]) if scores else np.zeros(0)
    k = keep_count(flat.size, sparsity)
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:k]] = True
    masks = []
    start = 0
    for s in scores:
        stop = start + s.scores.size
        masks.append(Mask.from_bits(keep[start:stop].reshape(s.scores.shape)))
        start = stop
    return masks


def apply_mask(net: Mlp, masks: Sequence[Optional[Mask]]) -> None:
    params = net.parameters()
    if len(masks) != len(params):
        raise DimensionError(f"got {len(masks)} masks for {len(params)} parameter tensors")
    for p, m in zip(params, masks):
        if m is None:
            continue
        if m.bits.shape != p.data.shape:
            raise DimensionError(f"mask shape {list(m.bits.shape)} does not match parameter {p.shape}")
        p.data[...] = np.where(m.bits, p.data, 0.0)


def propagate_to_target(source_masks: Sequence[Mask], target_net: Mlp) -> list[Mask]:
    """Mask the target with the very same mask objects as its source."""
    params = target_net.parameters()
    if len(params) != len(source_masks) or any(
        m.bits.shape != p.data.shape for m, p in zip(source_masks, params)
    ):
        raise DimensionError("target architecture does not match the source masks")
    apply_mask(target_net, source_masks)
    return list(source_masks)


def refresh_due(step: int, cfg: SparsityConfig) -> bool:
    if cfg.mode == "SFI":
        return False
    return step > 0 and step % cfg.refresh_interval == 0 and step <= cfg.refresh_cutoff


def layer_sparsity_report(
    masks: Sequence[Mask],
    previous: Optional[Sequence[Mask]] = None,
    names: Optional[Sequence[str]] = None,
) -> SparsityReport:
    names = list(names) if names is not None else [f"t{i}" for i in range(len(masks))]
    total = sum(m.size for m in masks)
    per_tensor = {name: 1.0 - m.k / m.size for name, m in zip(names, masks)}
    global_sparsity = 1.0 - sum(m.k for m in masks) / total if total else 0.0
    change = None
    if previous is not None:
        if len(previous) != len(masks):
            raise DimensionError("previous masks do not match current masks")
        flips = sum(int(np.count_nonzero(a.bits != b.bits)) for a, b in zip(masks, previous))
        change = flips / total if total else 0.0
    return SparsityReport(per_tensor=per_tensor, global_sparsity=global_sparsity, mask_change_fraction=change)


@dataclass
class ManagedNetwork:
    """A network whose mask is driven by its own training objective."""

    name: str
    net: Mlp
    loss_fn: Callable[[object], Tensor]
    targets: list[Mlp] = field(default_factory=list)


class SparseRegulator:
    """Owns masks and the refresh schedule for a set of managed networks.

    `sample_batch(rng, size)` draws saliency batches from the training data;
    the regulator keeps its own generator so training batches are untouched.
    """

    def __init__(
        self,
        cfg: SparsityConfig,
        networks: Sequence[ManagedNetwork],
        sample_batch: Callable[[np.random.Generator, int], object],
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        self.networks = list(networks)
        self.sample_batch = sample_batch
        self.rng = rng
        self.masks: dict[str, list[Mask]] = {}
        self.previous_masks: dict[str, list[Mask]] = {}
        self.refresh_steps: list[int] = []
        self._fixed_batch = None

    @property
    def initialized(self) -> bool:
        return bool(self.masks)

    def maybe_refresh(self, step: int) -> bool:
        if not self.initialized:
            self.refresh(step)
            return True
        if refresh_due(step, self.cfg):
            self.refresh(step)
            return True
        return False

    def _score_batch(self):
        if self.cfg.fixed_score_batch:
            if self._fixed_batch is None:
                self._fixed_batch = self.sample_batch(self.rng, self.cfg.score_batch_size)
            return self._fixed_batch
        return self.sample_batch(self.rng, self.cfg.score_batch_size)

    def refresh(self, step: int) -> None:
        shared = self._score_batch() if self.cfg.shared_score_batch else None
        for managed in self.networks:
            batch = shared if shared is not None else self._score_batch()
            masks = self._build_masks(managed, batch)
            if managed.name in self.masks:
                self.previous_masks[managed.name] = self.masks[managed.name]
            self.masks[managed.name] = masks
            apply_mask(managed.net, masks)
            for target in managed.targets:
                propagate_to_target(masks, target)
        self.refresh_steps.append(step)
        logger.debug("refreshed masks at step %d (sparsity %.3f)", step, self.cfg.sparsity)

    def _build_masks(self, managed: ManagedNetwork, batch) -> list[Mask]:
        scores = compute_saliency(managed.net, managed.loss_fn, batch)
        if self.cfg.mask_biases:
            return top_k_mask(scores, self.cfg.sparsity)
        params = managed.net.parameters()
        ranked = [i for i, (name, _) in enumerate(managed.net.named_parameters()) if name.endswith("weight")]
        weight_masks = iter(top_k_mask([scores[i] for i in ranked], self.cfg.sparsity))
        return [next(weight_masks) if i in ranked else Mask.ones_like(p) for i, p in enumerate(params)]

    def enforce(self) -> None:
        for managed in self.networks:
            masks = self.masks.get(managed.name)
            if masks is None:
                continue
            apply_mask(managed.net, masks)
            for target in managed.targets:
                apply_mask(target, masks)

    def report(self, name: str) -> SparsityReport:
        managed = next(m for m in self.networks if m.name == name)
        names = [n for n, _ in managed.net.named_parameters()]
        return layer_sparsity_report(self.masks[name], self.previous_masks.get(name), names)
