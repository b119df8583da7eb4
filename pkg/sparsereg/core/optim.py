import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from sparsereg.core import tensor as T
from sparsereg.core.exceptions import DimensionError
from sparsereg.core.tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_WEIGHT_DECAY = 0.01


@dataclass
class OptimizerState:
    kind: Literal["adam", "adamw"] = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "OptimizerState":
        state = cls(**kwargs)
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: OptimizerState, params: Sequence[Tensor], masks: Optional[Sequence] = None) -> None:
    """One Adam (or AdamW) update.

    Masked-out entries receive neither the update nor the decay and are written
    back as +0.0. Their moments are zeroed too, so an entry revived by a later
    refresh starts from fresh Adam state. `masks` entries may be None for
    unmasked tensors.
    """
    if len(state.first_moment) != len(params):
        raise DimensionError(f"optimizer tracks {len(state.first_moment)} tensors, got {len(params)}")
    if masks is not None and len(masks) != len(params):
        raise DimensionError(f"got {len(masks)} masks for {len(params)} tensors")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        m, v = state.first_moment[i], state.second_moment[i]
        if m.shape != p.data.shape:
            raise DimensionError(f"moment shape {list(m.shape)} does not match parameter {p.shape}")
        bits = None
        if masks is not None and masks[i] is not None:
            bits = masks[i].bits
            if bits.shape != p.data.shape:
                raise DimensionError(f"mask shape {list(bits.shape)} does not match parameter {p.shape}")
        g = p.grad if bits is None else np.where(bits, p.grad, 0.0)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if bits is not None:
            m[~bits] = 0.0
            v[~bits] = 0.0
        value = p.data
        if state.kind == "adamw":
            value = value * (1.0 - state.lr * state.weight_decay)
        value = value - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data[...] = value if bits is None else np.where(bits, value, 0.0)


class Optimizer:
    """Binds an OptimizerState to the parameters it updates."""

    def __init__(self, params: Sequence[Tensor], kind: str = "adam", lr: float = 1e-3, weight_decay: float = DEFAULT_WEIGHT_DECAY):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, kind=kind, lr=lr, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        T.zero_grad(self.params)

    def step(self, masks: Optional[Sequence] = None) -> None:
        adam_step(self.state, self.params, masks)
