"""
Two-stage training.

Stage 1 trains a pseudo-labeler with an adaptation loss (MSTN or CPUA style)
and records its target-domain class scores. Stage 2 trains a new classifier
with plain cross-entropy on source ground truth and on target pseudo-labels
that blend the recorded scores with the classifier's own, moving from the
former to the latter as training progresses. Stage 2 can be repeated, each
round seeded with the previous round's scores.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig
from .data import DomainBatch, LabeledDataset, Metrics, evaluate_transductive, per_domain_batches, predict_scores
from .errors import ConfigurationError, DimensionError, TrainingFailure
from .layers import Network, build_mlp
from .losses import (
    CentroidBank,
    ClassPrior,
    DomainView,
    cpua_total_loss,
    multi_source_total_loss,
    mstn_total_loss,
)
from .normalization import DomainId, convert_bn_to_dsbn
from .optim import Adam, ScheduleParams, lambda_schedule, lr_schedule
from .tensor import Tensor, backward, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass
class PseudoLabelBank:
    """Frozen per-example class scores for the target pool (one row per example)."""

    scores: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 2:
            raise DimensionError(f"bank scores must be 2-D, got shape {scores.shape}")
        if np.any(scores < 0) or np.any(np.abs(scores.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("bank rows must be probability distributions")
        ids = np.arange(scores.shape[0]) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if ids.shape != (scores.shape[0],):
            raise DimensionError("one example id per bank row required")
        scores.flags.writeable = False
        ids.flags.writeable = False
        self.scores, self.ids = scores, ids
        self._row = {int(i): r for r, i in enumerate(ids)}

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def classes(self) -> int:
        return self.scores.shape[1]

    def rows(self, example_ids) -> np.ndarray:
        return self.scores[[self._row[int(i)] for i in np.atleast_1d(example_ids)]]


def blend_pseudo_labels(stage1_scores: np.ndarray, current_scores: np.ndarray, lam: float) -> np.ndarray:
    """Row-wise argmax of ``(1 - lam) * stage1 + lam * current`` (ties -> lowest class)."""
    if stage1_scores.shape != current_scores.shape:
        raise DimensionError(f"score shapes differ: {stage1_scores.shape} vs {current_scores.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"blend weight must lie in [0, 1], got {lam}")
    return np.argmax((1.0 - lam) * stage1_scores + lam * current_scores, axis=-1)


def refine_pseudo_label(bank: PseudoLabelBank, f2_scores, example_id: int, lam: float) -> int:
    f2_scores = np.asarray(f2_scores, dtype=np.float64)
    if f2_scores.shape != (bank.classes,):
        raise DimensionError(f"expected {bank.classes} scores, got shape {f2_scores.shape}")
    return int(blend_pseudo_labels(bank.rows(example_id)[0], f2_scores, lam))


# ---------------------------------------------------------------------------
# model construction


def build_classifier(config: ExperimentConfig, norm: str, domains: Sequence[DomainId], rng) -> Network:
    m = config.model
    net = build_mlp(config.data.dims, m.hidden, config.data.classes, rng, True, m.bn_eps, m.bn_momentum)
    if norm == "dsbn":
        return convert_bn_to_dsbn(net, domains)
    if norm == "bn":
        return net
    raise ConfigurationError(f"unknown normalization mode {norm!r}")


def build_discriminator(in_features: int, width: int, rng) -> Network:
    """Two-layer MLP with one logit per example."""
    return build_mlp(in_features, [width], 1, rng, batchnorm=False)


@dataclass
class StageResult:
    network: Network
    metrics: Metrics
    history: list[dict] = field(default_factory=list)
    optimizer: Adam | None = None
    discriminator: Network | None = None


@dataclass
class Stage1Result(StageResult):
    bank: PseudoLabelBank | None = None


def _view(net: Network, batch: DomainBatch, labels=None) -> DomainView:
    feats, logits = net.forward_with_features(batch.features, domain=batch.domain, training=True)
    return DomainView(feats, logits, batch.labels if labels is None else labels)


def _check_finite(loss: Tensor, it: int, streak: int, patience: int) -> int:
    if math.isfinite(loss.item()):
        return 0
    streak += 1
    log.warning("non-finite loss at iteration %d", it)
    if streak >= patience:
        raise TrainingFailure("loss stayed non-finite", it)
    return streak


def _maybe_eval(net, target, it, every, history, stage, extra=None) -> None:
    if every and it % every == 0:
        rec = {"stage": stage, "iter": it, **evaluate_transductive(net, target).as_dict()}
        if extra:
            rec.update(extra)
        history.append(rec)


# ---------------------------------------------------------------------------
# stage 1


def train_stage1(
    config: ExperimentConfig,
    sources: Sequence[LabeledDataset],
    target: LabeledDataset,
    rng: np.random.Generator,
    baseline: str | None = None,
    norm: str | None = None,
) -> Stage1Result:
    """Train the pseudo-labeler with its adaptation loss.

    One mini-batch per domain per step; several sources are averaged. The
    returned bank holds eval-mode target-branch softmax scores for every
    target example.
    """
    baseline = baseline or config.baseline
    norm = norm or config.norm_stage1
    if not sources or len(target) == 0:
        raise ConfigurationError("stage 1 needs at least one source and a non-empty target")
    sched, adapt = config.stage1, config.adaptation
    classes = config.data.classes
    domains = [s.domain for s in sources] + [target.domain]

    net = build_classifier(config, norm, domains, rng)
    feat_dim = config.model.hidden[-1]
    disc = build_discriminator(feat_dim if baseline == "mstn" else classes, config.model.disc_hidden, rng)
    opt = Adam(net.parameters() + disc.parameters())
    banks = [CentroidBank.zeros(classes, feat_dim, adapt.sm_theta) for _ in sources]
    source_priors = [ClassPrior.from_labels(s.labels, classes) for s in sources]
    target_pseudo = None
    target_prior = None
    epoch_len = max(1, len(target) // config.batch_size)

    stream = per_domain_batches(list(sources) + [target], config.batch_size, rng)
    history: list[dict] = []
    streak = 0
    for it in range(sched.max_iters):
        p = sched.progress(it)
        lam = adapt.adapt_weight * lambda_schedule(p, sched.gamma_adapt)
        lr = lr_schedule(p, sched)
        step = [next(stream) for _ in domains]
        src_batches, tgt_batch = step[:-1], step[-1]

        if baseline == "cpua" and it % epoch_len == 0:
            # class priors of the pseudo-labels are refreshed once per target epoch
            target_pseudo = predict_scores(net, target.features, target.domain).argmax(axis=1)
            target_prior = ClassPrior.from_labels(target_pseudo, classes)

        views = [_view(net, b) for b in src_batches]
        if baseline == "mstn":
            tview = _view(net, tgt_batch)

            def pair(i, s, t):
                return mstn_total_loss(s, t, disc, banks[i], lam, adapt.adv_scale)

        else:
            tview = _view(net, tgt_batch, labels=target_pseudo[tgt_batch.ids])

            def pair(i, s, t):
                return cpua_total_loss(s, t, source_priors[i], target_prior, disc, lam, adapt.adv_scale)

        loss = multi_source_total_loss(views, tview, pair)
        streak = _check_finite(loss, it, streak, adapt.divergence_patience)
        if streak == 0:
            backward(loss)
            opt.step(lr)
        opt.zero_grad()
        _maybe_eval(net, target, it, adapt.eval_every, history, "stage1", {"loss": loss.item(), "lambda": lam})

    metrics = evaluate_transductive(net, target)
    bank = PseudoLabelBank(predict_scores(net, target.features, target.domain))
    return Stage1Result(net, metrics, history, opt, disc, bank)


# ---------------------------------------------------------------------------
# stage 2


def train_stage2(
    config: ExperimentConfig,
    bank: PseudoLabelBank,
    sources: Sequence[LabeledDataset],
    target: LabeledDataset,
    rng: np.random.Generator,
    norm: str | None = None,
    init_from: Network | None = None,
    fixed_lambda: float | None = None,
    stage_name: str = "stage2",
) -> StageResult:
    """Self-training on source labels plus scheduled pseudo-labels.

    Each target batch is labelled by blending its bank rows with the current
    network's eval-mode scores under weight ``lambda_schedule(p)`` (or
    ``fixed_lambda``). ``init_from`` warm-starts from a copy of that network.
    """
    norm = norm or config.norm_stage2
    if len(bank) != len(target):
        raise ConfigurationError(f"bank covers {len(bank)} examples, target has {len(target)}")
    sched, adapt = config.stage2, config.adaptation
    if fixed_lambda is None and adapt.stage2_fixed_lambda >= 0:
        fixed_lambda = adapt.stage2_fixed_lambda
    domains = [s.domain for s in sources] + [target.domain]
    if init_from is not None:
        net = copy.deepcopy(init_from)
    else:
        net = build_classifier(config, norm, domains, rng)
    opt = Adam(net.parameters())

    stream = per_domain_batches(list(sources) + [target], config.batch_size, rng)
    history: list[dict] = []
    streak = 0
    for it in range(sched.max_iters):
        p = sched.progress(it)
        lam = lambda_schedule(p, sched.gamma_adapt) if fixed_lambda is None else fixed_lambda
        lr = lr_schedule(p, sched)
        step = [next(stream) for _ in domains]
        src_batches, tgt_batch = step[:-1], step[-1]

        current = predict_scores(net, tgt_batch.features, tgt_batch.domain)
        pseudo = blend_pseudo_labels(bank.rows(tgt_batch.ids), current, lam)

        src_loss = None
        for b in src_batches:
            term = softmax_cross_entropy(net.forward(b.features, b.domain, True), b.labels)
            src_loss = term if src_loss is None else src_loss + term
        if len(src_batches) > 1:
            src_loss = src_loss * (1.0 / len(src_batches))
        tgt_loss = softmax_cross_entropy(net.forward(tgt_batch.features, tgt_batch.domain, True), pseudo)
        loss = src_loss + tgt_loss

        streak = _check_finite(loss, it, streak, adapt.divergence_patience)
        if streak == 0:
            backward(loss)
            opt.step(lr)
        opt.zero_grad()
        _maybe_eval(net, target, it, adapt.eval_every, history, stage_name, {"loss": loss.item(), "lambda": lam})

    return StageResult(net, evaluate_transductive(net, target), history, opt)


def iterate_stage2(
    k: int,
    config: ExperimentConfig,
    bank: PseudoLabelBank,
    sources: Sequence[LabeledDataset],
    target: LabeledDataset,
    rng: np.random.Generator,
    norm: str | None = None,
    stage1_network: Network | None = None,
) -> list[StageResult]:
    """Run stage 2 ``k`` times; round j > 1 replaces the bank with round j-1's
    eval-mode target scores."""
    if k < 1:
        raise ConfigurationError(f"need k >= 1 stage-2 iterations, got {k}")
    results = []
    warm = stage1_network if config.adaptation.stage2_warm_start else None
    for j in range(k):
        res = train_stage2(
            config, bank, sources, target, rng, norm=norm, init_from=warm, stage_name=f"stage2.{j + 1}"
        )
        results.append(res)
        bank = PseudoLabelBank(predict_scores(res.network, target.features, target.domain))
        if config.adaptation.stage2_warm_start:
            warm = res.network
    return results
