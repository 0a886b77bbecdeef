"""Two-stream detection head over precomputed region features.

One linear layer per stream. The classification stream is softmax-normalized
across classes within each region; the localization stream is softmax-
normalized across regions within each class. Their elementwise product gives
per-region detection scores, whose per-class sums form the image-level score
vector used by the image-level log loss

    L = sum_c -log(y_c * (phi_c - 1/2) + 1/2),    y_c in {-1, +1},

with the log argument clipped below at a small epsilon for numerical safety.
Training is plain per-image SGD over curriculum stages; records whose stage
gate evaluates to 0 never enter the update sequence, so adding or removing
them cannot change the result.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .curriculum import CurriculumSchedule, DifficultyRanking, gate
from .data import SPLIT_TRAIN, FeatureBlob, ImageRecord, RegionSet
from .errors import ConfigError, DataError, FormatError, ScheduleError, ShapeError
from .rng import STREAM_TRAIN, check_seed, spawn_rng

_WGT_MAGIC = b"WGT1"
_WGT_HEADER = struct.Struct("<4sII")

INIT_WEIGHT_RANGE = 0.01


@dataclass(frozen=True)
class ModelWeights:
    """Parameters of both streams; arrays are read-only once constructed."""

    cls_weight: np.ndarray
    cls_bias: np.ndarray
    det_weight: np.ndarray
    det_bias: np.ndarray

    def __post_init__(self):
        cw = np.asarray(self.cls_weight, dtype=np.float64)
        dw = np.asarray(self.det_weight, dtype=np.float64)
        cb = np.asarray(self.cls_bias, dtype=np.float64)
        db = np.asarray(self.det_bias, dtype=np.float64)
        if cw.ndim != 2 or dw.shape != cw.shape:
            raise ShapeError(
                f"weight matrices must share a (dim, classes) shape, got "
                f"{cw.shape} and {dw.shape}"
            )
        dim, num_classes = cw.shape
        if dim < 1 or num_classes < 1:
            raise ShapeError(f"weights need dim >= 1 and classes >= 1, got {cw.shape}")
        if cb.shape != (num_classes,) or db.shape != (num_classes,):
            raise ShapeError(f"bias vectors must have shape ({num_classes},)")
        for arr in (cw, cb, dw, db):
            if not np.all(np.isfinite(arr)):
                raise DataError("model weights contain non-finite values")
        for name, arr in (("cls_weight", cw), ("cls_bias", cb),
                          ("det_weight", dw), ("det_bias", db)):
            arr = np.ascontiguousarray(arr)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def dim(self) -> int:
        return int(self.cls_weight.shape[0])

    @property
    def num_classes(self) -> int:
        return int(self.cls_weight.shape[1])

    @classmethod
    def initialize(cls, dim: int, num_classes: int, rng: np.random.Generator) -> "ModelWeights":
        """Zero biases; weights uniform in +-INIT_WEIGHT_RANGE (cls drawn first)."""
        cw = rng.uniform(-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE, size=(dim, num_classes))
        dw = rng.uniform(-INIT_WEIGHT_RANGE, INIT_WEIGHT_RANGE, size=(dim, num_classes))
        return cls(cw, np.zeros(num_classes), dw, np.zeros(num_classes))


@dataclass(frozen=True)
class DetectionOutput:
    """Forward-pass outputs: per-region scores and their image-level sums."""

    per_region: np.ndarray
    image_score: np.ndarray
    cls_softmax: np.ndarray
    det_softmax: np.ndarray


@dataclass(frozen=True)
class Gradients:
    """Loss gradients with the same block structure as ModelWeights."""

    cls_weight: np.ndarray
    cls_bias: np.ndarray
    det_weight: np.ndarray
    det_bias: np.ndarray


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs_per_stage: int = 20
    weight_decay: float = 5e-4
    seed: int = 0
    epsilon_clip: float = 1e-12

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs_per_stage < 1:
            raise ConfigError("epochs_per_stage must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        check_seed(self.seed)
        if not 0 < self.epsilon_clip <= 1e-3:
            raise ConfigError("epsilon_clip must be in (0, 1e-3]")


@dataclass(frozen=True)
class TrainResult:
    weights: ModelWeights
    admitted_counts: tuple[int, ...]
    loss_trace: tuple[tuple[float, ...], ...]


# -- forward / loss / backward ------------------------------------------------


def _check_features(features: np.ndarray, dim: int) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ShapeError(f"region features must be 2-D, got shape {feats.shape}")
    if feats.shape[0] < 1:
        raise ShapeError("forward pass needs at least one region")
    if feats.shape[1] != dim:
        raise ShapeError(
            f"feature dim {feats.shape[1]} does not match weight dim {dim}"
        )
    if not np.all(np.isfinite(feats)):
        raise DataError("region features contain non-finite values")
    return feats


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _forward_arrays(
    feats: np.ndarray,
    cls_w: np.ndarray,
    cls_b: np.ndarray,
    det_w: np.ndarray,
    det_b: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    cls_sm = _softmax(feats @ cls_w + cls_b, axis=1)   # rows sum to 1
    det_sm = _softmax(feats @ det_w + det_b, axis=0)   # columns sum to 1
    per_region = cls_sm * det_sm
    # Column sums are <= 1 exactly in reals; clip shields against float dust.
    image_score = np.clip(per_region.sum(axis=0), 0.0, 1.0)
    return cls_sm, det_sm, per_region, image_score


def forward(features: np.ndarray, weights: ModelWeights) -> DetectionOutput:
    """Score R regions against C classes; image_score entries lie in [0, 1]."""
    feats = _check_features(features, weights.dim)
    cls_sm, det_sm, per_region, image_score = _forward_arrays(
        feats, weights.cls_weight, weights.cls_bias, weights.det_weight, weights.det_bias
    )
    return DetectionOutput(
        per_region=per_region,
        image_score=image_score,
        cls_softmax=cls_sm,
        det_softmax=det_sm,
    )


def label_vector(labels: Mapping[str, int], classes: Sequence[str]) -> np.ndarray:
    """Dense +-1 vector in `classes` order; classes absent from the map are -1."""
    return np.array([1.0 if labels.get(c, -1) > 0 else -1.0 for c in classes])


def _as_label_vector(labels, num_classes: int) -> np.ndarray:
    if isinstance(labels, Mapping):
        y = np.full(num_classes, -1.0)
        for idx, value in labels.items():
            if not 0 <= int(idx) < num_classes:
                raise DataError(f"label index {idx} out of range for {num_classes} classes")
            y[int(idx)] = 1.0 if value > 0 else -1.0
        return y
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (num_classes,):
        raise ShapeError(f"labels must have shape ({num_classes},), got {y.shape}")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DataError("label values must be -1 or +1")
    return y


def loss(image_score: np.ndarray, labels, epsilon_clip: float = 1e-12) -> float:
    """Image-level log loss summed over classes; nonnegative."""
    phi = np.asarray(image_score, dtype=np.float64)
    if phi.ndim != 1:
        raise ShapeError(f"image_score must be a vector, got shape {phi.shape}")
    if np.any(phi < 0.0) or np.any(phi > 1.0):
        raise DataError("image_score entries must lie in [0, 1]")
    y = _as_label_vector(labels, phi.shape[0])
    arg = np.clip(y * (phi - 0.5) + 0.5, epsilon_clip, 1.0)
    return float(-np.log(arg).sum())


def _loss_and_grads(
    feats: np.ndarray,
    cls_w: np.ndarray,
    cls_b: np.ndarray,
    det_w: np.ndarray,
    det_b: np.ndarray,
    y: np.ndarray,
    epsilon_clip: float,
) -> tuple[float, Gradients]:
    cls_sm, det_sm, per_region, phi = _forward_arrays(feats, cls_w, cls_b, det_w, det_b)
    arg = y * (phi - 0.5) + 0.5
    clipped = np.clip(arg, epsilon_clip, 1.0)
    total = float(-np.log(clipped).sum())
    # d loss / d phi_c; zero where the clip is active (arg below epsilon).
    dphi = np.where(arg > epsilon_clip, -y / clipped, 0.0)

    d_per_region = np.broadcast_to(dphi, per_region.shape)
    d_cls_sm = d_per_region * det_sm
    d_det_sm = d_per_region * cls_sm
    # Softmax Jacobian, rows for the class stream, columns for the region stream.
    d_cls_scores = cls_sm * (d_cls_sm - (d_cls_sm * cls_sm).sum(axis=1, keepdims=True))
    d_det_scores = det_sm * (d_det_sm - (d_det_sm * det_sm).sum(axis=0, keepdims=True))

    grads = Gradients(
        cls_weight=feats.T @ d_cls_scores,
        cls_bias=d_cls_scores.sum(axis=0),
        det_weight=feats.T @ d_det_scores,
        det_bias=d_det_scores.sum(axis=0),
    )
    return total, grads


def backward(
    features: np.ndarray,
    weights: ModelWeights,
    labels,
    epsilon_clip: float = 1e-12,
) -> Gradients:
    """Analytic loss gradient for all four parameter blocks."""
    feats = _check_features(features, weights.dim)
    y = _as_label_vector(labels, weights.num_classes)
    _, grads = _loss_and_grads(
        feats, weights.cls_weight, weights.cls_bias,
        weights.det_weight, weights.det_bias, y, epsilon_clip,
    )
    return grads


# -- training ------------------------------------------------------------------


def _class_universe(records: Sequence[ImageRecord]) -> tuple[str, ...]:
    classes: set[str] = set()
    for record in records:
        classes.update(record.labels)
    if not classes:
        raise DataError("no classes found in training records")
    return tuple(sorted(classes))


def train_detector(
    records: Sequence[ImageRecord],
    region_sets: Mapping[str, RegionSet],
    region_features: FeatureBlob,
    schedule: CurriculumSchedule,
    config: TrainConfig,
    *,
    classes: Sequence[str] | None = None,
    ranking: DifficultyRanking | None = None,
) -> TrainResult:
    """Run the staged trainer and keep the per-stage loss trace.

    Only train-split records are considered. For each stage, the admitted set
    is fixed up front from the stage gate; epochs shuffle that set with the
    seeded generator and apply one SGD step per image (weight decay applied to
    all four blocks). Bit-reproducible for a fixed seed.
    """
    class_order = tuple(classes) if classes is not None else _class_universe(
        [r for r in records if r.split == SPLIT_TRAIN]
    )
    train_records = [r for r in records if r.split == SPLIT_TRAIN]

    rng = spawn_rng(config.seed, STREAM_TRAIN)
    weights = ModelWeights.initialize(region_features.dim, len(class_order), rng)
    cls_w = weights.cls_weight.copy()
    cls_b = weights.cls_bias.copy()
    det_w = weights.det_weight.copy()
    det_b = weights.det_bias.copy()

    admitted_counts: list[int] = []
    loss_trace: list[tuple[float, ...]] = []
    lr = config.learning_rate
    wd = config.weight_decay

    for stage_no, stage in enumerate(schedule.stages, start=1):
        admitted = [r for r in train_records if gate(r, stage, ranking) == 1]
        if not admitted:
            raise ScheduleError(f"stage {stage_no} empty")
        admitted_counts.append(len(admitted))

        prepared = []
        for record in admitted:
            region_set = region_sets.get(record.id)
            if region_set is None or len(region_set) == 0:
                raise DataError(f"record {record.id!r} admitted without regions")
            feats = region_features.rows(region_set.feature_rows)
            prepared.append((feats, label_vector(record.labels, class_order)))

        stage_losses: list[float] = []
        for _ in range(config.epochs_per_stage):
            order = rng.permutation(len(prepared))
            epoch_loss = 0.0
            for idx in order:
                feats, y = prepared[idx]
                sample_loss, grads = _loss_and_grads(
                    feats, cls_w, cls_b, det_w, det_b, y, config.epsilon_clip
                )
                epoch_loss += sample_loss
                cls_w = cls_w - lr * (grads.cls_weight + wd * cls_w)
                cls_b = cls_b - lr * (grads.cls_bias + wd * cls_b)
                det_w = det_w - lr * (grads.det_weight + wd * det_w)
                det_b = det_b - lr * (grads.det_bias + wd * det_b)
            stage_losses.append(epoch_loss / len(prepared))
        loss_trace.append(tuple(stage_losses))

    return TrainResult(
        weights=ModelWeights(cls_w, cls_b, det_w, det_b),
        admitted_counts=tuple(admitted_counts),
        loss_trace=tuple(loss_trace),
    )


def train(
    records: Sequence[ImageRecord],
    region_sets: Mapping[str, RegionSet],
    region_features: FeatureBlob,
    schedule: CurriculumSchedule,
    config: TrainConfig,
    *,
    classes: Sequence[str] | None = None,
    ranking: DifficultyRanking | None = None,
) -> ModelWeights:
    """Staged training; returns only the final weights."""
    return train_detector(
        records, region_sets, region_features, schedule, config,
        classes=classes, ranking=ranking,
    ).weights


# -- weights container ---------------------------------------------------------


def save_weights(weights: ModelWeights, stream: BinaryIO) -> None:
    """WGT1 container: magic, u32 dim, u32 classes, then the four blocks as f32 LE."""
    stream.write(_WGT_HEADER.pack(_WGT_MAGIC, weights.dim, weights.num_classes))
    for block in (weights.cls_weight, weights.cls_bias, weights.det_weight, weights.det_bias):
        stream.write(np.ascontiguousarray(block, dtype="<f4").tobytes())


def load_weights(stream: BinaryIO) -> ModelWeights:
    header = stream.read(_WGT_HEADER.size)
    if len(header) != _WGT_HEADER.size:
        raise FormatError("weights: truncated header")
    magic, dim, num_classes = _WGT_HEADER.unpack(header)
    if magic != _WGT_MAGIC:
        raise FormatError(f"weights: bad magic {magic!r}")
    if dim < 1 or num_classes < 1:
        raise FormatError("weights: dim and classes must be >= 1")
    blocks = []
    for shape in ((dim, num_classes), (num_classes,), (dim, num_classes), (num_classes,)):
        n = int(np.prod(shape))
        payload = stream.read(n * 4)
        if len(payload) != n * 4:
            raise FormatError("weights: truncated payload")
        blocks.append(np.frombuffer(payload, dtype="<f4").reshape(shape))
    if stream.read(1):
        raise FormatError("weights: trailing data after payload")
    return ModelWeights(*blocks)
