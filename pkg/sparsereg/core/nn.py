"""Multilayer perceptrons on top of the autodiff core.

Alternate regularizers (dropout, layer norm, spectral norm) are attached as
hooks so the same Mlp serves every algorithm:
  - dropout and layer norm go on every layer except the last
  - spectral norm goes on the penultimate layer only
"""
import copy
import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np

from sparsereg.core import tensor as T
from sparsereg.core.exceptions import ConfigError, DimensionError, NumericError
from sparsereg.core.tensor import Tensor

logger = logging.getLogger(__name__)

Activation = Literal["relu", "tanh"]
Mode = Literal["train", "eval"]

SPECTRAL_FLOOR = 1e-12
SPECTRAL_INIT_ITERS = 200
LAYER_NORM_EPS = 1e-12


@dataclass(frozen=True)
class OutputTransform:
    kind: Literal["identity", "tanh_bounded"] = "identity"
    scale: float = 1.0


@dataclass(frozen=True)
class RegularizerHooks:
    dropout: Optional[float] = None
    layer_norm: bool = False
    spectral_norm_penultimate: bool = False


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor
    # power-iteration vectors, only used when this layer is spectrally normalised
    u: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    @property
    def in_dim(self) -> int:
        return self.weight.data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.data.shape[0]


@dataclass
class Mlp:
    layers: list[Linear]
    activation: Activation = "relu"
    output_transform: OutputTransform = field(default_factory=OutputTransform)
    hooks: RegularizerHooks = field(default_factory=RegularizerHooks)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    def __post_init__(self):
        for i, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer {i} outputs {a.out_dim} but layer {i + 1} expects {b.in_dim}")
        if self.hooks.spectral_norm_penultimate:
            if len(self.layers) < 2:
                raise ConfigError("spectral norm needs a penultimate layer (at least two layers)")
            layer = self.layers[self.spectral_index]
            if layer.u is None:
                layer.u = _unit(self.rng.standard_normal(layer.out_dim))
                layer.v = _unit(self.rng.standard_normal(layer.in_dim))
                power_iteration(layer, SPECTRAL_INIT_ITERS)
        if self.hooks.dropout is not None and not 0.0 <= self.hooks.dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.hooks.dropout}")

    @property
    def spectral_index(self) -> int:
        return len(self.layers) - 2

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers):
            named.append((f"l{i}.weight", layer.weight))
            named.append((f"l{i}.bias", layer.bias))
        return named

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def describe(self) -> dict:
        return {
            "sizes": [self.in_dim] + [layer.out_dim for layer in self.layers],
            "activation": self.activation,
            "output_transform": {"kind": self.output_transform.kind, "scale": self.output_transform.scale},
            "hooks": {
                "dropout": self.hooks.dropout,
                "layer_norm": self.hooks.layer_norm,
                "spectral_norm_penultimate": self.hooks.spectral_norm_penultimate,
            },
        }

    def __call__(self, batch, mode: Mode = "train") -> Tensor:
        return forward(self, batch, mode)


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > SPECTRAL_FLOOR else vec


def build_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    activation: Activation = "relu",
    output_transform: Optional[OutputTransform] = None,
    hooks: Optional[RegularizerHooks] = None,
) -> Mlp:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigError(f"invalid layer sizes {list(sizes)}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weight = Tensor.parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)), name=f"l{i}.weight")
        bias = Tensor.parameter(np.zeros(fan_out), name=f"l{i}.bias")
        layers.append(Linear(weight, bias))
    return Mlp(
        layers=layers,
        activation=activation,
        output_transform=output_transform or OutputTransform(),
        hooks=hooks or RegularizerHooks(),
        rng=rng,
    )


def power_iteration(layer: Linear, n_iters: int = 1) -> float:
    """Refine the layer's singular-vector pair in place; returns sigma_hat = u^T W v."""
    w = layer.weight.data
    for _ in range(n_iters):
        v = w.T @ layer.u
        if np.linalg.norm(v) > SPECTRAL_FLOOR:
            layer.v = v / np.linalg.norm(v)
        u = w @ layer.v
        if np.linalg.norm(u) > SPECTRAL_FLOOR:
            layer.u = u / np.linalg.norm(u)
    return float(layer.u @ w @ layer.v)


def spectral_normalize(net: Mlp, layer: Linear, mode: Mode = "train") -> Tensor:
    """Effective weight W / sigma_hat for the penultimate layer.

    One power iteration per training forward. Eval mode reuses the stored
    vectors, which are converged when the network is built.
    """
    if layer is not net.layers[net.spectral_index]:
        raise ConfigError("spectral normalisation is only attached to the penultimate layer")
    if mode == "train":
        power_iteration(layer)
    return T.spectral_scaled(layer.weight, layer.u, layer.v, floor=SPECTRAL_FLOOR)


def _activate(net: Mlp, x: Tensor) -> Tensor:
    return T.relu(x) if net.activation == "relu" else T.tanh(x)


def _dropout(net: Mlp, x: Tensor, rate: float) -> Tensor:
    keep = net.rng.random(x.data.shape) >= rate
    return T.mul(x, keep / (1.0 - rate))


def forward(net: Mlp, batch, mode: Mode = "train") -> Tensor:
    x = T.as_tensor(batch)
    if x.data.ndim != 2 or x.data.shape[1] != net.in_dim:
        raise DimensionError(f"expected a batch of shape [B, {net.in_dim}], got {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("non-finite values in network input")
    if mode == "eval":
        with T.no_grad():
            return _forward(net, x, mode)
    return _forward(net, x, mode)


def _forward(net: Mlp, x: Tensor, mode: Mode) -> Tensor:
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        if net.hooks.spectral_norm_penultimate and i == net.spectral_index:
            weight = spectral_normalize(net, layer, mode)
        else:
            weight = layer.weight
        x = T.add(T.matmul(x, T.transpose(weight)), layer.bias)
        if i == last:
            break
        if net.hooks.layer_norm:
            x = T.layer_norm(x, LAYER_NORM_EPS)
        x = _activate(net, x)
        if net.hooks.dropout and mode == "train":
            x = _dropout(net, x, net.hooks.dropout)
    if net.output_transform.kind == "tanh_bounded":
        x = T.mul(T.tanh(x), net.output_transform.scale)
    return x


def l1_penalty(params: Sequence[Tensor]) -> Tensor:
    total = None
    for p in params:
        term = T.tensor_sum(T.absolute(p))
        total = term if total is None else T.add(total, term)
    return total


def regularized_loss(base: Tensor, params: Sequence[Tensor], reg=None) -> Tensor:
    """base + lam * sum|theta| for an L1 regularizer, base unchanged otherwise."""
    if reg is None or getattr(reg, "kind", "none") != "l1":
        return base
    if reg.lam < 0:
        raise ConfigError(f"L1 coefficient must be non-negative, got {reg.lam}")
    if reg.lam == 0 or not params:
        return base
    return T.add(base, T.mul(l1_penalty(params), reg.lam))


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    """target <- (1 - tau) * target + tau * source, in place.

    Targets only run in eval mode, so their power-iteration vectors are taken
    from the source.
    """
    for t, s in zip(target.parameters(), source.parameters()):
        if t.data.shape != s.data.shape:
            raise DimensionError(f"target/source shape mismatch {t.shape} vs {s.shape}")
        t.data[...] = (1.0 - tau) * t.data + tau * s.data
    for t_layer, s_layer in zip(target.layers, source.layers):
        if s_layer.u is not None:
            t_layer.u = s_layer.u.copy()
            t_layer.v = s_layer.v.copy()


def hooks_for(regularizer) -> RegularizerHooks:
    kind = getattr(regularizer, "kind", "none")
    if kind == "dropout":
        return RegularizerHooks(dropout=regularizer.rate)
    if kind == "layer_norm":
        return RegularizerHooks(layer_norm=True)
    if kind == "spectral_norm":
        return RegularizerHooks(spectral_norm_penultimate=True)
    return RegularizerHooks()
