"""
Adaptation objectives for the stage-1 pseudo-labelers.

MSTN-style: source cross-entropy + domain-adversarial loss + semantic
matching of per-class feature centroids. CPUA-style: class-prior-weighted
cross-entropy + class-prior-weighted adversarial loss on class probabilities.
Either plugs into the multi-source average.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DegeneratePriorError
from .tensor import Tensor, grad_reverse, matmul, sigmoid_bce, softmax, softmax_cross_entropy, tsum


@dataclass
class DomainView:
    """Network outputs for one single-domain batch.

    ``labels`` holds ground truth for a source batch. For a target batch it
    may hold externally supplied pseudo-labels; when it is ``None`` the
    argmax of ``logits`` is used.
    """

    features: Tensor
    logits: Tensor
    labels: np.ndarray | None = None

    def predictions(self) -> np.ndarray:
        return self.logits.data.argmax(axis=1)

    def labels_or_predictions(self) -> np.ndarray:
        return self.predictions() if self.labels is None else np.asarray(self.labels)


def _weights_like(weights, like: Tensor):
    if weights is None:
        return None
    return np.asarray(weights, dtype=np.float64).reshape(like.shape)


def domain_adversarial_loss(
    feat_s: Tensor,
    feat_t: Tensor,
    discriminator,
    scale: float = 1.0,
    weights_s=None,
    weights_t=None,
) -> Tensor:
    """Discriminator BCE with source labelled 1 and target 0.

    Inputs pass through a gradient reversal, so the discriminator descends
    this loss while whatever produced the inputs ascends it. Each domain's
    term is a (weighted) batch mean; the two terms are summed.
    """
    logit_s = discriminator(grad_reverse(feat_s, scale))
    logit_t = discriminator(grad_reverse(feat_t, scale))
    loss_s = sigmoid_bce(logit_s, np.ones(logit_s.shape), _weights_like(weights_s, logit_s))
    loss_t = sigmoid_bce(logit_t, np.zeros(logit_t.shape), _weights_like(weights_t, logit_t))
    return loss_s + loss_t


# ---------------------------------------------------------------------------
# semantic matching


@dataclass
class CentroidBank:
    source_centroids: np.ndarray
    target_centroids: np.ndarray
    theta: float = 0.7

    def __post_init__(self):
        if self.source_centroids.shape != self.target_centroids.shape:
            raise ConfigurationError("source and target centroid banks must share a shape")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigurationError(f"centroid EMA factor must lie in [0, 1], got {self.theta}")

    @classmethod
    def zeros(cls, classes: int, dims: int, theta: float = 0.7) -> CentroidBank:
        return cls(np.zeros((classes, dims)), np.zeros((classes, dims)), theta)

    @property
    def classes(self) -> int:
        return self.source_centroids.shape[0]

    def copy(self) -> CentroidBank:
        return CentroidBank(self.source_centroids.copy(), self.target_centroids.copy(), self.theta)


def _moving_centroids(features: Tensor, labels: np.ndarray, stored: np.ndarray, theta: float) -> Tensor:
    classes = stored.shape[0]
    onehot = (np.asarray(labels)[:, None] == np.arange(classes)).astype(np.float64)
    counts = onehot.sum(axis=0)
    present = counts > 0
    # row c of `averaging` maps the batch to (1 - theta) * (class-c centroid)
    averaging = (onehot / np.maximum(counts, 1.0)).T * np.where(present, 1.0 - theta, 0.0)[:, None]
    kept = np.where(present[:, None], theta * stored, stored)
    return matmul(averaging, features) + kept


def semantic_matching_loss(
    features_s: Tensor,
    labels_s,
    features_t: Tensor,
    pseudo_labels_t,
    bank: CentroidBank,
    commit: bool = True,
) -> Tensor:
    """Squared distance between moving source and target class centroids.

    For each class present in a batch the stored centroid becomes
    ``theta * old + (1 - theta) * batch_mean``; absent classes keep their
    stored value. The loss sums ``||c_S - c_T||^2`` over all classes and is
    differentiable through the batch means. ``commit=False`` leaves the bank
    untouched.
    """
    new_s = _moving_centroids(features_s, labels_s, bank.source_centroids, bank.theta)
    new_t = _moving_centroids(features_t, pseudo_labels_t, bank.target_centroids, bank.theta)
    diff = new_s - new_t
    loss = tsum(diff * diff)
    if commit:
        bank.source_centroids = new_s.data.copy()
        bank.target_centroids = new_t.data.copy()
    return loss


def mstn_terms(
    src: DomainView,
    tgt: DomainView,
    discriminator,
    bank: CentroidBank,
    adv_scale: float = 1.0,
    commit: bool = True,
) -> dict[str, Tensor]:
    return {
        "cls": softmax_cross_entropy(src.logits, src.labels),
        "da": domain_adversarial_loss(src.features, tgt.features, discriminator, adv_scale),
        "sm": semantic_matching_loss(
            src.features, src.labels, tgt.features, tgt.labels_or_predictions(), bank, commit
        ),
    }


def mstn_total_loss(
    src: DomainView,
    tgt: DomainView,
    discriminator,
    bank: CentroidBank,
    lam: float,
    adv_scale: float = 1.0,
    commit: bool = True,
) -> Tensor:
    """Source cross-entropy + ``lam`` * (adversarial + semantic matching)."""
    if lam < 0:
        raise ValueError(f"adaptation weight must be >= 0, got {lam}")
    t = mstn_terms(src, tgt, discriminator, bank, adv_scale, commit)
    return t["cls"] + lam * t["da"] + lam * t["sm"]


# ---------------------------------------------------------------------------
# class-prior weighting


@dataclass
class ClassPrior:
    counts: np.ndarray
    total: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.total <= 0 or np.any(self.counts < 0) or self.counts.sum() > self.total:
            raise ConfigurationError(f"invalid class prior: counts={self.counts.tolist()}, total={self.total}")

    @classmethod
    def from_labels(cls, labels, classes: int) -> ClassPrior:
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.bincount(labels, minlength=classes), int(labels.size))

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total


def _prior_weights(prior: ClassPrior, y):
    y_arr = np.asarray(y, dtype=np.int64)
    if np.any(prior.counts[y_arr] == 0):
        missing = sorted(set(np.atleast_1d(y_arr)[prior.counts[np.atleast_1d(y_arr)] == 0].tolist()))
        raise DegeneratePriorError(f"class(es) {missing} have zero prior mass")
    # ratio of integer counts: one correctly rounded division
    w = np.atleast_1d(prior.counts.max() / prior.counts[y_arr].astype(np.float64))
    return float(w[0]) if y_arr.ndim == 0 else w.reshape(y_arr.shape)


def cpua_source_weights(prior: ClassPrior, y):
    """``max_c p_S(c) / p_S(y)`` for a label or an array of labels."""
    return _prior_weights(prior, y)


def cpua_target_weights(prior: ClassPrior, pseudo_y):
    """Same as the source weights, on the pseudo-label prior."""
    return _prior_weights(prior, pseudo_y)


def cpua_terms(
    src: DomainView,
    tgt: DomainView,
    prior_s: ClassPrior,
    prior_t: ClassPrior,
    discriminator,
    adv_scale: float = 1.0,
) -> dict[str, Tensor]:
    w_s = cpua_source_weights(prior_s, src.labels)
    w_t = cpua_target_weights(prior_t, tgt.labels_or_predictions())
    return {
        "cls": softmax_cross_entropy(src.logits, src.labels, w_s),
        "da": domain_adversarial_loss(softmax(src.logits), softmax(tgt.logits), discriminator, adv_scale, w_s, w_t),
    }


def cpua_total_loss(
    src: DomainView,
    tgt: DomainView,
    prior_s: ClassPrior,
    prior_t: ClassPrior,
    discriminator,
    lam: float,
    adv_scale: float = 1.0,
) -> Tensor:
    """Weighted cross-entropy + ``lam`` * weighted adversarial loss.

    The discriminator sees softmax class probabilities. Dataset-level
    ``1/n`` normalizations become batch means of the weighted terms.
    """
    if lam < 0:
        raise ValueError(f"adaptation weight must be >= 0, got {lam}")
    t = cpua_terms(src, tgt, prior_s, prior_t, discriminator, adv_scale)
    return t["cls"] + lam * t["da"]


# ---------------------------------------------------------------------------
# multi-source


def multi_source_total_loss(
    sources: Sequence[DomainView],
    target: DomainView,
    pair_loss: Callable[[int, DomainView, DomainView], Tensor],
) -> Tensor:
    """Average over source domains of ``pair_loss(i, source_i, target)``.

    ``pair_loss`` returns the classification plus alignment loss of one
    source/target pair, e.g. a bound :func:`mstn_total_loss`.
    """
    if not sources:
        raise ConfigurationError("multi-source loss needs at least one source domain")
    total = pair_loss(0, sources[0], target)
    for i in range(1, len(sources)):
        total = total + pair_loss(i, sources[i], target)
    if len(sources) == 1:
        return total
    return total * (1.0 / len(sources))
