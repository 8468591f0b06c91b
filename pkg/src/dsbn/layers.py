"""Dense layers and the sequential network container."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, affine_transform, as_tensor, parameters_of, relu


class Linear:
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        # He initialisation for ReLU stacks
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / in_features), (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def forward(self, x: Tensor, domain=None, training: bool = True) -> Tensor:
        return affine_transform(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight.data, f"{prefix}.bias": self.bias.data}

    def load_state(self, prefix: str, arrays) -> None:
        self.weight.data = np.array(arrays[f"{prefix}.weight"], dtype=np.float64)
        self.bias.data = np.array(arrays[f"{prefix}.bias"], dtype=np.float64)

    def spec(self) -> dict:
        return {"kind": self.kind, "in": self.in_features, "out": self.out_features}


class ReLU:
    kind = "relu"

    def forward(self, x: Tensor, domain=None, training: bool = True) -> Tensor:
        return relu(x)

    def parameters(self) -> list[Parameter]:
        return []

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, prefix: str, arrays) -> None:
        pass

    def spec(self) -> dict:
        return {"kind": self.kind}


class Network:
    """Sequential stack of layers.

    The first ``feature_depth`` layers form the feature extractor; their output
    is what embedding export and the semantic matching loss see. Every layer
    gets the batch's domain, which only normalization layers use.
    """

    def __init__(self, layers: list, feature_depth: int | None = None):
        self.layers = list(layers)
        self.feature_depth = len(self.layers) if feature_depth is None else feature_depth

    def __iter__(self) -> Iterator:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def forward_with_features(self, x, domain=None, training: bool = True) -> tuple[Tensor, Tensor]:
        h = as_tensor(x)
        features = h
        for i, layer in enumerate(self.layers):
            if i == self.feature_depth:
                features = h
            h = layer.forward(h, domain=domain, training=training)
        if self.feature_depth == len(self.layers):
            features = h
        return features, h

    def forward(self, x, domain=None, training: bool = True) -> Tensor:
        return self.forward_with_features(x, domain, training)[1]

    __call__ = forward

    def parameters(self) -> list[Parameter]:
        return parameters_of(p for layer in self.layers for p in layer.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.state_arrays(f"layers.{i}"))
        return out

    def load_state_dict(self, arrays) -> None:
        for i, layer in enumerate(self.layers):
            layer.load_state(f"layers.{i}", arrays)

    def spec(self) -> dict:
        return {"feature_depth": self.feature_depth, "layers": [layer.spec() for layer in self.layers]}


def build_mlp(
    in_features: int,
    hidden: list[int],
    out_features: int,
    rng: np.random.Generator,
    batchnorm: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Network:
    """``[Linear -> BN -> ReLU] * len(hidden) -> Linear``; features are the last hidden activations."""
    from .normalization import BatchNorm

    layers: list = []
    width = in_features
    for h in hidden:
        layers.append(Linear(width, h, rng))
        if batchnorm:
            layers.append(BatchNorm(h, eps=eps, momentum=momentum))
        layers.append(ReLU())
        width = h
    layers.append(Linear(width, out_features, rng))
    return Network(layers, feature_depth=len(layers) - 1)
