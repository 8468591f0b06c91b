"""Versioned checkpoints: one ``.npz`` archive holding architecture, weights,
every DSBN branch, optimizer moments and the generator state."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .layers import Linear, Network, ReLU
from .normalization import BatchNorm, DomainId, DsbnLayer
from .optim import Adam

FORMAT_VERSION = 1


def network_from_spec(spec: dict) -> Network:
    """Rebuild an (uninitialised) network from ``Network.spec()``."""
    layers = []
    for ls in spec["layers"]:
        kind = ls["kind"]
        if kind == "linear":
            layers.append(Linear(ls["in"], ls["out"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "bn":
            layers.append(BatchNorm(ls["channels"], ls["eps"], ls["momentum"]))
        elif kind == "dsbn":
            domains = [DomainId.parse(d) for d in ls["domains"]]
            layers.append(DsbnLayer(ls["channels"], domains, ls["eps"], ls["momentum"]))
        else:
            raise ConfigurationError(f"unknown layer kind {kind!r} in checkpoint")
    return Network(layers, spec["feature_depth"])


@dataclass
class Checkpoint:
    network: Network
    discriminator: Network | None = None
    optimizer: Adam | None = None
    rng: np.random.Generator | None = None
    meta: dict = field(default_factory=dict)


def _text(value: str) -> np.ndarray:
    return np.array(value)


def save_checkpoint(
    path,
    network: Network,
    optimizer: Adam | None = None,
    rng: np.random.Generator | None = None,
    discriminator: Network | None = None,
    meta: dict | None = None,
) -> Path:
    """Write a checkpoint. ``optimizer`` must cover the network's parameters,
    followed by the discriminator's when one is given."""
    arrays = {"format_version": np.array(FORMAT_VERSION, dtype=np.int64)}
    arrays["network.spec"] = _text(json.dumps(network.spec(), sort_keys=True))
    arrays.update({f"network.{k}": v for k, v in network.state_dict().items()})
    if discriminator is not None:
        arrays["discriminator.spec"] = _text(json.dumps(discriminator.spec(), sort_keys=True))
        arrays.update({f"discriminator.{k}": v for k, v in discriminator.state_dict().items()})
    if optimizer is not None:
        expected = len(network.parameters()) + (len(discriminator.parameters()) if discriminator else 0)
        if len(optimizer.params) != expected:
            raise ConfigurationError(f"optimizer tracks {len(optimizer.params)} parameters, expected {expected}")
        arrays["optimizer.hyper"] = np.array([optimizer.beta1, optimizer.beta2, optimizer.eps])
        arrays.update({f"optimizer.{k}": v for k, v in optimizer.state_arrays().items()})
    if rng is not None:
        arrays["rng.state"] = _text(json.dumps(rng.bit_generator.state))
        arrays["rng.kind"] = _text(type(rng.bit_generator).__name__)
    arrays["meta"] = _text(json.dumps(meta or {}, sort_keys=True))

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path = Path(path)
    path.write_bytes(buf.getvalue())
    return path


def _sub(archive, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: archive[k] for k in archive.files if k.startswith(prefix)}


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        version = int(archive["format_version"])
        if version != FORMAT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        net = network_from_spec(json.loads(str(archive["network.spec"])))
        net.load_state_dict(_sub(archive, "network."))
        disc = None
        if "discriminator.spec" in archive.files:
            disc = network_from_spec(json.loads(str(archive["discriminator.spec"])))
            disc.load_state_dict(_sub(archive, "discriminator."))
        opt = None
        if "optimizer.hyper" in archive.files:
            b1, b2, eps = (float(v) for v in archive["optimizer.hyper"])
            params = net.parameters() + (disc.parameters() if disc else [])
            opt = Adam(params, b1, b2, eps)
            opt.load_state_arrays(_sub(archive, "optimizer."))
        rng = None
        if "rng.state" in archive.files:
            bit_gen = getattr(np.random, str(archive["rng.kind"]))()
            bit_gen.state = json.loads(str(archive["rng.state"]))
            rng = np.random.Generator(bit_gen)
        meta = json.loads(str(archive["meta"]))
    return Checkpoint(net, disc, opt, rng, meta)
