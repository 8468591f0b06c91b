"""
Synthetic domain-shift benchmarks, per-domain batching and transductive
evaluation.

Source classes are isotropic Gaussian clusters centred on the vertices of a
regular simplex; a shifted domain applies a rotation in the first coordinate
plane followed by a translation. Class semantics are preserved, only the
covariates move.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError
from .normalization import DomainId
from .tensor import no_grad


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: DomainId
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ConfigurationError(
                f"features {self.features.shape} and labels {self.labels.shape} do not line up"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigurationError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass
class DomainBatch:
    features: np.ndarray
    labels: np.ndarray | None
    domain: DomainId
    ids: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def simplex_vertices(classes: int, dims: int, radius: float = 1.0) -> np.ndarray:
    """Vertices of a regular simplex, centred at the origin, ``radius`` from it.

    Uses the Helmert basis of the sum-zero subspace so the orientation is fixed.
    """
    if classes < 2 or dims < 2:
        raise ConfigurationError(f"need classes >= 2 and dims >= 2, got {classes}, {dims}")
    if classes - 1 > dims:
        raise ConfigurationError(f"{classes} simplex vertices need at least {classes - 1} dims, got {dims}")
    helmert = np.zeros((classes - 1, classes))
    for k in range(1, classes):
        helmert[k - 1, :k] = 1.0
        helmert[k - 1, k] = -k
        helmert[k - 1] /= np.sqrt(k * (k + 1))
    coords = helmert.T
    coords *= radius / np.linalg.norm(coords[0])
    out = np.zeros((classes, dims))
    out[:, : classes - 1] = coords
    return out


def _rotation_matrix(dims: int, angle: float) -> np.ndarray:
    rot = np.eye(dims)
    c, s = np.cos(angle), np.sin(angle)
    rot[:2, :2] = [[c, -s], [s, c]]
    return rot


def _sample_domain(
    centers: np.ndarray,
    n_per_class: int,
    noise: float,
    rotation: float,
    shift: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    classes, dims = centers.shape
    labels = np.repeat(np.arange(classes), n_per_class)
    x = centers[labels] + noise * rng.standard_normal((labels.size, dims))
    x = x @ _rotation_matrix(dims, rotation).T + shift
    return x, labels


def _as_shift(shift, dims: int) -> np.ndarray:
    if shift is None:
        return np.zeros(dims)
    shift = np.asarray(shift, dtype=np.float64)
    if shift.shape != (dims,):
        raise ConfigurationError(f"shift must have length {dims}, got shape {shift.shape}")
    return shift


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def make_shifted_blobs(
    classes: int = 3,
    dims: int = 2,
    n_per_class: int = 500,
    shift=None,
    rotation: float = 0.0,
    noise: float = 0.35,
    seed=0,
    radius: float = 1.0,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Source clusters on a simplex and a target copy rotated by ``rotation``
    radians then translated by ``shift``."""
    if n_per_class < 1 or noise < 0 or radius <= 0:
        raise ConfigurationError(
            f"invalid blob parameters: n_per_class={n_per_class}, noise={noise}, radius={radius}"
        )
    rng = _rng(seed)
    centers = simplex_vertices(classes, dims, radius)
    xs, ys = _sample_domain(centers, n_per_class, noise, 0.0, np.zeros(dims), rng)
    xt, yt = _sample_domain(centers, n_per_class, noise, rotation, _as_shift(shift, dims), rng)
    return (
        LabeledDataset(xs, ys, DomainId.source(0), classes),
        LabeledDataset(xt, yt, DomainId.target(), classes),
    )


def make_multi_source_blobs(
    num_sources: int = 2,
    source_shifts: Sequence | None = None,
    source_rotations: Sequence[float] | None = None,
    target_shift=None,
    target_rotation: float = 0.0,
    classes: int = 3,
    dims: int = 2,
    n_per_class: int = 500,
    noise: float = 0.35,
    seed=0,
    radius: float = 1.0,
) -> tuple[list[LabeledDataset], LabeledDataset]:
    """Several labelled source domains, each its own transform of the same
    clusters, plus one target domain."""
    if num_sources < 1:
        raise ConfigurationError("need at least one source domain")
    source_shifts = list(source_shifts) if source_shifts is not None else [None] * num_sources
    source_rotations = list(source_rotations) if source_rotations is not None else [0.0] * num_sources
    if len(source_shifts) != num_sources or len(source_rotations) != num_sources:
        raise ConfigurationError(f"expected {num_sources} source shifts and rotations")
    rng = _rng(seed)
    centers = simplex_vertices(classes, dims, radius)
    sources = []
    for i in range(num_sources):
        x, y = _sample_domain(centers, n_per_class, noise, source_rotations[i], _as_shift(source_shifts[i], dims), rng)
        sources.append(LabeledDataset(x, y, DomainId.source(i), classes))
    xt, yt = _sample_domain(centers, n_per_class, noise, target_rotation, _as_shift(target_shift, dims), rng)
    return sources, LabeledDataset(xt, yt, DomainId.target(), classes)


def merge_sources(sources: Sequence[LabeledDataset]) -> LabeledDataset:
    """Concatenate source domains into one dataset under a single domain id."""
    if not sources:
        raise ConfigurationError("nothing to merge")
    return LabeledDataset(
        np.concatenate([s.features for s in sources]),
        np.concatenate([s.labels for s in sources]),
        DomainId.source(0),
        sources[0].class_count,
    )


def per_domain_batches(
    datasets: Sequence[LabeledDataset], batch_size: int, rng
) -> Iterator[DomainBatch]:
    """Endless round-robin stream of single-domain mini-batches.

    Each domain is reshuffled at the start of its own epoch and the trailing
    partial batch is dropped. Target batches carry no labels.
    """
    if batch_size < 2:
        raise ConfigurationError(f"batch_size must be >= 2 for train-mode normalization, got {batch_size}")
    for ds in datasets:
        if len(ds) < batch_size:
            raise ConfigurationError(f"domain {ds.domain} has {len(ds)} examples, fewer than batch_size={batch_size}")
    rng = _rng(rng)
    orders = [None] * len(datasets)
    cursors = [0] * len(datasets)
    while True:
        for k, ds in enumerate(datasets):
            if orders[k] is None or cursors[k] + batch_size > len(ds):
                orders[k] = rng.permutation(len(ds))
                cursors[k] = 0
            ids = orders[k][cursors[k] : cursors[k] + batch_size]
            cursors[k] += batch_size
            labels = None if ds.domain.is_target else ds.labels[ids]
            batch = DomainBatch(ds.features[ids], labels, ds.domain, ids)
            assert batch.domain == ds.domain
            yield batch


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Metrics:
    per_class: np.ndarray  # percent
    mean_per_class: float
    overall: float

    def as_dict(self) -> dict:
        return {
            "per_class": [float(v) for v in self.per_class],
            "avg": float(self.mean_per_class),
            "overall": float(self.overall),
        }


def accuracy_metrics(predictions: np.ndarray, labels: np.ndarray, class_count: int) -> Metrics:
    per_class = np.full(class_count, np.nan)
    for c in range(class_count):
        mask = labels == c
        if mask.any():
            per_class[c] = 100.0 * np.mean(predictions[mask] == c)
    return Metrics(per_class, float(np.nanmean(per_class)), 100.0 * float(np.mean(predictions == labels)))


def predict_scores(network, features: np.ndarray, domain: DomainId) -> np.ndarray:
    """Eval-mode softmax scores for every row."""
    from .tensor import softmax_array

    with no_grad():
        logits = network.forward(features, domain=domain, training=False)
    return softmax_array(logits.data)


def evaluate_transductive(network, target: LabeledDataset, domain: DomainId | None = None) -> Metrics:
    """Eval-mode accuracy on the whole target pool through the target branch."""
    domain = target.domain if domain is None else domain
    scores = predict_scores(network, target.features, domain)
    return accuracy_metrics(scores.argmax(axis=1), target.labels, target.class_count)


# ---------------------------------------------------------------------------
# CSV exchange


def write_csv(datasets: Sequence[LabeledDataset], path) -> None:
    dims = datasets[0].dims
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dims)] + ["label", "domain"])
        for ds in datasets:
            for row, y in zip(ds.features, ds.labels):
                w.writerow([repr(float(v)) for v in row] + [int(y), str(ds.domain)])


def read_csv(path, class_count: int | None = None) -> list[LabeledDataset]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "domain"]:
        raise ConfigurationError(f"{path}: last two columns must be label, domain")
    dims = len(header) - 2
    grouped: dict[str, tuple[list, list]] = {}
    for r in body:
        xs, ys = grouped.setdefault(r[-1], ([], []))
        xs.append([float(v) for v in r[:dims]])
        ys.append(int(r[dims]))
    if class_count is None:
        class_count = 1 + max(max(ys) for _, ys in grouped.values())
    return [
        LabeledDataset(np.array(xs), np.array(ys), DomainId.parse(name), class_count)
        for name, (xs, ys) in grouped.items()
    ]
