"""Relevance scoring for web records.

Semantic relevance: a linear softmax classifier is self-trained on the
top-ranked results of every query (the seed pool), then iteratively expanded
with web records whose top-class logit clears a confidence threshold. Each
record's final score is the pre-softmax logit of its originating query's
class, so the score scale is unbounded and a fixed threshold can separate
on-topic images from noise.

Distribution relevance: the union, over all single-label target images, of
the k nearest web images of the same class in L2-normalized, PCA-reduced
feature space. Membership is exposed to the curriculum gate as a +-sentinel
relevance value.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ImageRecord
from .errors import ConfigError, DataError
from .rng import STREAM_RELEVANCE, check_seed, spawn_rng

logger = logging.getLogger(__name__)

# Sentinel relevance written for kNN membership so one threshold gate serves
# both relevance modes.
KNN_MEMBER_SCORE = 1e9
KNN_OUTSIDER_SCORE = -1e9


@dataclass(frozen=True)
class SelfTrainConfig:
    seeds_per_label: int = 80
    seeds_per_attribute_query: int = 20
    confidence_add_threshold: float = 8.0
    max_iterations: int = 5
    learning_rate: float = 0.1
    epochs_per_iteration: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.seeds_per_label < 1 or self.seeds_per_attribute_query < 1:
            raise ConfigError("seed counts must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs_per_iteration < 1:
            raise ConfigError("epochs_per_iteration must be >= 1")
        check_seed(self.seed)


@dataclass(frozen=True)
class RelevanceClassifier:
    """Linear softmax head scoring features against the seeded classes."""

    weights: np.ndarray  # (dim, C)
    biases: np.ndarray   # (C,)
    classes: tuple[str, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],) or len(self.classes) != w.shape[1]:
            raise ConfigError("classifier weight/bias/class shapes are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise DataError("classifier parameters contain non-finite values")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "classes", tuple(self.classes))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.biases

    def class_index(self, cls: str) -> int:
        try:
            return self.classes.index(cls)
        except ValueError:
            raise ConfigError(f"class {cls!r} was not part of the seed pool") from None


def _single_positive_class(record: ImageRecord) -> str | None:
    positives = record.positive_classes()
    return positives[0] if len(positives) == 1 else None


def _query_kind_is_base(record: ImageRecord, cls: str) -> bool:
    return record.query == cls


def select_seeds(
    web_records: Sequence[ImageRecord], cfg: SelfTrainConfig
) -> list[tuple[str, str]]:
    """Pick the top-ranked results of every originating query as labeled seeds.

    Base-label queries contribute up to `seeds_per_label` records, attribute
    queries up to `seeds_per_attribute_query`; duplicates keep their first
    occurrence. Queries yielding no usable records are skipped with a warning.
    """
    by_query: dict[str, list[ImageRecord]] = {}
    query_order: list[str] = []
    for record in web_records:
        if record.query is None or record.query_rank is None:
            continue
        cls = _single_positive_class(record)
        if cls is None:
            logger.warning("seed selection: record %r is not single-label; skipped", record.id)
            continue
        if record.query not in by_query:
            by_query[record.query] = []
            query_order.append(record.query)
        by_query[record.query].append(record)

    seeds: list[tuple[str, str]] = []
    seen: set[str] = set()
    for query in query_order:
        group = sorted(by_query[query], key=lambda r: r.query_rank)
        if not group:
            logger.warning("seed selection: query %r has no records", query)
            continue
        cls = _single_positive_class(group[0])
        limit = cfg.seeds_per_label if _query_kind_is_base(group[0], cls) else cfg.seeds_per_attribute_query
        for record in group[:limit]:
            if record.id in seen:
                continue
            seen.add(record.id)
            seeds.append((record.id, _single_positive_class(record)))
    return seeds


def _fit_softmax_sgd(
    features: np.ndarray,
    class_indices: np.ndarray,
    num_classes: int,
    learning_rate: float,
    epochs: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample SGD on softmax cross-entropy from zero init."""
    n, dim = features.shape
    w = np.zeros((dim, num_classes))
    b = np.zeros(num_classes)
    for _ in range(epochs):
        for i in rng.permutation(n):
            x = features[i]
            z = x @ w + b
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            p[class_indices[i]] -= 1.0
            w -= learning_rate * np.outer(x, p)
            b -= learning_rate * p
    return w, b


def self_train(
    features: Mapping[str, np.ndarray],
    seeds: Sequence[tuple[str, str]],
    web_records: Sequence[ImageRecord],
    cfg: SelfTrainConfig,
    pool_sizes: list[int] | None = None,
) -> tuple[RelevanceClassifier, dict[str, float]]:
    """Iteratively fit the web-to-web classifier and score every web record.

    Each round fits the classifier on the current labeled pool, then adds the
    unlabeled records whose top-class logit reaches the confidence threshold,
    labeled with their originating query's class. Stops when nothing is added
    or after `max_iterations` rounds. Scores are the final model's logit of
    each record's own class. Deterministic for a fixed seed.

    When `pool_sizes` is given, the labeled-pool size at the start of each
    round is appended to it (diagnostic only).
    """
    classes = tuple(sorted({cls for _, cls in seeds}))
    if len(classes) < 2:
        raise ConfigError("self-training needs seeds from at least 2 classes")
    class_index = {cls: i for i, cls in enumerate(classes)}

    record_class: dict[str, str] = {}
    for record in web_records:
        cls = _single_positive_class(record)
        if cls is None:
            logger.warning("self-train: record %r is not single-label; skipped", record.id)
            continue
        if record.id not in features:
            raise DataError(f"no feature vector for web record {record.id!r}")
        record_class[record.id] = cls

    pool: dict[str, str] = {}
    for image_id, cls in seeds:
        if image_id not in features:
            raise DataError(f"no feature vector for seed {image_id!r}")
        if image_id not in pool:
            pool[image_id] = cls

    if not pool:
        raise ConfigError("self-training needs a non-empty seed pool")
    scored_ids = list(record_class)
    sample_dim = np.asarray(features[next(iter(pool))], dtype=np.float64).shape[0]
    all_feats = (
        np.stack([np.asarray(features[rid], dtype=np.float64) for rid in scored_ids])
        if scored_ids
        else np.zeros((0, sample_dim))
    )

    weights = biases = None
    for iteration in range(cfg.max_iterations):
        if pool_sizes is not None:
            pool_sizes.append(len(pool))
        pool_ids = list(pool)
        pool_feats = np.stack([np.asarray(features[rid], dtype=np.float64) for rid in pool_ids])
        pool_targets = np.array([class_index[pool[rid]] for rid in pool_ids])
        rng = spawn_rng(cfg.seed, STREAM_RELEVANCE, iteration)
        weights, biases = _fit_softmax_sgd(
            pool_feats, pool_targets, len(classes),
            cfg.learning_rate, cfg.epochs_per_iteration, rng,
        )

        logits = all_feats @ weights + biases
        added: list[tuple[str, str]] = []
        for i, rid in enumerate(scored_ids):
            if rid in pool:
                continue
            cls = record_class[rid]
            if cls not in class_index:
                continue
            if logits[i].max() >= cfg.confidence_add_threshold:
                added.append((rid, cls))
        if not added:
            break
        for rid, cls in added:
            pool[rid] = cls

    classifier = RelevanceClassifier(weights=weights, biases=biases, classes=classes)
    scores: dict[str, float] = {}
    logits = all_feats @ classifier.weights + classifier.biases
    for i, rid in enumerate(scored_ids):
        cls = record_class[rid]
        if cls not in class_index:
            logger.warning("self-train: class %r of record %r was never seeded", cls, rid)
            continue
        scores[rid] = float(logits[i, class_index[cls]])
    return classifier, scores


# -- PCA + kNN distribution relevance -------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    """Mean vector and orthonormal principal directions (columns)."""

    mean: np.ndarray
    components: np.ndarray  # (dim, d)
    explained_variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        comp = np.asarray(self.components, dtype=np.float64)
        var = np.asarray(self.explained_variance, dtype=np.float64)
        if comp.ndim != 2 or mean.shape != (comp.shape[0],) or var.shape != (comp.shape[1],):
            raise ConfigError("PCA model shapes are inconsistent")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comp)
        object.__setattr__(self, "explained_variance", var)

    @property
    def d(self) -> int:
        return int(self.components.shape[1])

    def project(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        return (x - self.mean) @ self.components


def fit_pca(blob, d: int) -> PcaModel:
    """Top-d principal directions of the blob rows, via SVD of the centered data.

    Components come in descending eigenvalue order; each one's sign is fixed
    so its largest-magnitude entry is positive.
    """
    data = np.asarray(getattr(blob, "data", blob), dtype=np.float64)
    if data.ndim != 2:
        raise ConfigError("PCA input must be a 2-D matrix or FeatureBlob")
    count, dim = data.shape
    if not 1 <= d <= dim:
        raise ConfigError(f"PCA dimension must be in [1, {dim}], got {d}")
    if count < d:
        raise ConfigError(f"PCA needs at least d={d} rows, got {count}")

    mean = data.mean(axis=0)
    centered = data - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:d].T.copy()
    for j in range(d):
        col = components[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            components[:, j] = -col
    explained = singular[:d] ** 2 / max(count - 1, 1)
    return PcaModel(mean=mean, components=components, explained_variance=explained)


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return matrix / safe


def knn_relevance(
    target_records: Sequence[ImageRecord],
    web_records: Sequence[ImageRecord],
    features: Mapping[str, np.ndarray],
    pca: PcaModel,
    k: int,
) -> frozenset[str]:
    """Union over single-label target images of their k nearest same-class web images.

    Features are L2-normalized then PCA-projected before the Euclidean search;
    distance ties break by ascending web image id, so the result is invariant
    to input ordering.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")

    web_by_class: dict[str, list[str]] = {}
    for record in web_records:
        cls = _single_positive_class(record)
        if cls is None:
            continue
        if record.id not in features:
            raise DataError(f"no feature vector for web record {record.id!r}")
        web_by_class.setdefault(cls, []).append(record.id)

    projected: dict[str, tuple[list[str], np.ndarray]] = {}
    for cls, ids in web_by_class.items():
        matrix = np.stack([np.asarray(features[rid], dtype=np.float64) for rid in ids])
        projected[cls] = (ids, pca.project(_unit_rows(matrix)))

    members: set[str] = set()
    for record in target_records:
        cls = _single_positive_class(record)
        if cls is None or cls not in projected:
            continue
        if record.id not in features:
            raise DataError(f"no feature vector for target record {record.id!r}")
        vec = np.asarray(features[record.id], dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        query = pca.project(vec)
        ids, matrix = projected[cls]
        d2 = ((matrix - query) ** 2).sum(axis=1)
        nearest = sorted(zip(d2.tolist(), ids))[:k]
        members.update(rid for _, rid in nearest)
    return frozenset(members)
