"""
Batch normalization and domain-specific batch normalization.

A :class:`DsbnLayer` keeps one independent :class:`BnState` per domain. Every
forward pass carries a whole single-domain mini-batch and touches only that
domain's branch, so each branch's statistics and affine parameters evolve
exactly as a standalone BN layer fed only that domain's stream would.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchSizeError, ConfigurationError, DimensionError, DomainLookupError
from .layers import Network
from .tensor import Parameter, Tensor, _node, as_tensor


@dataclass(frozen=True, order=True)
class DomainId:
    role: str
    index: int = 0

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ConfigurationError(f"domain role must be 'source' or 'target', got {self.role!r}")
        if self.index < 0:
            raise ConfigurationError(f"domain index must be >= 0, got {self.index}")

    @classmethod
    def source(cls, index: int = 0) -> DomainId:
        return cls("source", index)

    @classmethod
    def target(cls) -> DomainId:
        return cls("target", 0)

    @classmethod
    def parse(cls, text: str) -> DomainId:
        if text == "T":
            return cls.target()
        m = re.fullmatch(r"S(\d+)", text)
        if not m:
            raise ConfigurationError(f"cannot parse domain id {text!r}")
        return cls.source(int(m.group(1)))

    @property
    def is_target(self) -> bool:
        return self.role == "target"

    def __str__(self) -> str:
        return "T" if self.is_target else f"S{self.index}"


SOURCE = DomainId.source(0)
TARGET = DomainId.target()


@dataclass
class BnState:
    """Affine parameters and running statistics of one normalization branch."""

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    num_updates: int = field(default=0, compare=False)

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c and self.running_mean.shape == c and self.running_var.shape == c):
            raise DimensionError(
                f"BN state length mismatch: gamma {c}, beta {self.beta.shape}, "
                f"mean {self.running_mean.shape}, var {self.running_var.shape}"
            )
        if self.eps <= 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if not 0 < self.momentum <= 1:
            raise ConfigurationError(f"momentum must lie in (0, 1], got {self.momentum}")
        if np.any(self.running_var < 0):
            raise ConfigurationError("running variance must be non-negative")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> BnState:
        return cls(
            gamma=Parameter(np.ones(channels)),
            beta=Parameter(np.zeros(channels)),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def copy(self) -> BnState:
        """Independent deep copy (fresh Parameter objects, no grads)."""
        return BnState(
            gamma=Parameter(self.gamma.data.copy(), self.gamma.trainable),
            beta=Parameter(self.beta.data.copy(), self.beta.trainable),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            eps=self.eps,
            momentum=self.momentum,
            num_updates=self.num_updates,
        )

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]


def _channel_layout(x: Tensor, state: BnState) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim < 2:
        raise DimensionError(f"normalization input must be at least 2-D, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise DimensionError(f"input shape {x.shape} has {x.shape[1]} channels, state has {state.channels}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, state.channels) + (1,) * (x.ndim - 2)
    return axes, bshape


def bn_update_running(state: BnState, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
    """One exponential-moving-average step of the running statistics."""
    if batch_mean.shape != state.running_mean.shape or batch_var.shape != state.running_var.shape:
        raise DimensionError(
            f"batch statistics {batch_mean.shape}/{batch_var.shape} do not match state {state.running_mean.shape}"
        )
    a = state.momentum
    state.running_mean = (1.0 - a) * state.running_mean + a * batch_mean
    state.running_var = (1.0 - a) * state.running_var + a * batch_var
    state.num_updates += 1


def bn_forward_train(x, state: BnState, update_running: bool = True) -> Tensor:
    """Normalize with mini-batch statistics (biased variance) and, by default,
    fold those statistics into the running estimates.

    Works for ``N x C`` and ``N x C x H x W`` inputs; statistics are taken over
    every axis but the channel axis.
    """
    x = as_tensor(x)
    axes, bshape = _channel_layout(x, state)
    if x.shape[0] < 2:
        raise BatchSizeError(f"train-mode batch normalization needs N >= 2, got N={x.shape[0]}")
    m = x.data.size // state.channels
    mu = x.data.mean(axis=axes)
    centered = x.data - mu.reshape(bshape)
    var = (centered * centered).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv.reshape(bshape)
    gamma, beta = state.gamma, state.beta
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        dxhat = g * gamma.data.reshape(bshape)
        s1 = dxhat.sum(axis=axes).reshape(bshape)
        s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = (inv.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    y = _node(out, (x, gamma, beta), bw)
    if update_running:
        bn_update_running(state, mu, var)
    return y


def bn_forward_eval(x, state: BnState) -> Tensor:
    """Normalize with the running statistics; pure in ``(x, state)``."""
    x = as_tensor(x)
    axes, bshape = _channel_layout(x, state)
    scale = (1.0 / np.sqrt(state.running_var + state.eps)).reshape(bshape)
    xhat = (x.data - state.running_mean.reshape(bshape)) * scale
    gamma, beta = state.gamma, state.beta
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        return g * gamma.data.reshape(bshape) * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(out, (x, gamma, beta), bw)


class BatchNorm:
    """Plain BN layer; ignores the batch's domain."""

    kind = "bn"

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, state: BnState | None = None):
        self.state = state if state is not None else BnState.identity(channels, eps, momentum)

    @property
    def channels(self) -> int:
        return self.state.channels

    def forward(self, x, domain=None, training: bool = True) -> Tensor:
        if training:
            return bn_forward_train(x, self.state)
        return bn_forward_eval(x, self.state)

    def parameters(self) -> list[Parameter]:
        return self.state.parameters()

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return _state_arrays(prefix, self.state)

    def load_state(self, prefix: str, arrays) -> None:
        _load_state_arrays(prefix, self.state, arrays)

    def spec(self) -> dict:
        return {"kind": self.kind, "channels": self.channels, "eps": self.state.eps, "momentum": self.state.momentum}


def _state_arrays(prefix: str, s: BnState) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.gamma": s.gamma.data,
        f"{prefix}.beta": s.beta.data,
        f"{prefix}.running_mean": s.running_mean,
        f"{prefix}.running_var": s.running_var,
        f"{prefix}.num_updates": np.array(s.num_updates, dtype=np.int64),
    }


def _load_state_arrays(prefix: str, s: BnState, arrays) -> None:
    s.gamma.data = np.array(arrays[f"{prefix}.gamma"], dtype=np.float64)
    s.beta.data = np.array(arrays[f"{prefix}.beta"], dtype=np.float64)
    s.running_mean = np.array(arrays[f"{prefix}.running_mean"], dtype=np.float64)
    s.running_var = np.array(arrays[f"{prefix}.running_var"], dtype=np.float64)
    s.num_updates = int(arrays[f"{prefix}.num_updates"])


class DsbnLayer:
    """One BN branch per domain, all with the same channel count."""

    kind = "dsbn"

    def __init__(self, channels: int, domains=(), eps: float = 1e-5, momentum: float = 0.1):
        self.channel_count = channels
        self.eps = eps
        self.momentum = momentum
        self.branches: dict[DomainId, BnState] = {}
        self._sealed = False
        for d in domains:
            self.add_domain_branch(d)

    def add_domain_branch(self, domain: DomainId, init: BnState | None = None) -> None:
        if self._sealed:
            raise ConfigurationError("domain branches can only be added before the first forward pass")
        if domain in self.branches:
            raise ConfigurationError(f"domain {domain} already has a branch")
        state = init.copy() if init is not None else BnState.identity(self.channel_count, self.eps, self.momentum)
        if state.channels != self.channel_count:
            raise DimensionError(f"branch has {state.channels} channels, layer has {self.channel_count}")
        self.branches[domain] = state

    def branch(self, domain: DomainId) -> BnState:
        try:
            return self.branches[domain]
        except KeyError:
            known = ", ".join(str(d) for d in self.branches)
            raise DomainLookupError(f"no branch for domain {domain}; known: {known}") from None

    @property
    def domains(self) -> list[DomainId]:
        return list(self.branches)

    def forward(self, x, domain: DomainId, training: bool = True) -> Tensor:
        return dsbn_forward(x, domain, self, "train" if training else "eval")

    def parameters(self) -> list[Parameter]:
        return [p for s in self.branches.values() for p in s.parameters()]

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for d, s in self.branches.items():
            out.update(_state_arrays(f"{prefix}.{d}", s))
        return out

    def load_state(self, prefix: str, arrays) -> None:
        for d, s in self.branches.items():
            _load_state_arrays(f"{prefix}.{d}", s, arrays)

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "channels": self.channel_count,
            "domains": [str(d) for d in self.branches],
            "eps": self.eps,
            "momentum": self.momentum,
        }


def dsbn_forward(x, domain: DomainId, layer: DsbnLayer, mode: str = "train") -> Tensor:
    """Route a single-domain batch through that domain's branch."""
    state = layer.branch(domain)
    layer._sealed = True
    if mode == "train":
        return bn_forward_train(x, state)
    if mode == "eval":
        return bn_forward_eval(x, state)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def add_domain_branch(layer: DsbnLayer, domain: DomainId, init: BnState | None = None) -> None:
    layer.add_domain_branch(domain, init)


def convert_bn_to_dsbn(network: Network, domains) -> Network:
    """Return a network whose BN layers are replaced by DSBN layers.

    Each new layer gets one branch per domain, every branch a copy of the
    original BN state. All other layers are the same objects as in
    ``network``, so their parameters stay shared.
    """
    domains = list(domains)
    layers = []
    for layer in network.layers:
        if isinstance(layer, BatchNorm):
            s = layer.state
            new = DsbnLayer(s.channels, eps=s.eps, momentum=s.momentum)
            for d in domains:
                new.add_domain_branch(d, s)
            layers.append(new)
        else:
            layers.append(layer)
    return Network(layers, feature_depth=network.feature_depth)


def normalization_layers(network: Network) -> list:
    return [layer for layer in network.layers if isinstance(layer, (BatchNorm, DsbnLayer))]


def clone_network(network: Network) -> Network:
    return copy.deepcopy(network)
