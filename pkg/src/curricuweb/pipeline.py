"""End-to-end pipeline: relevance scoring, difficulty scoring, schedule
construction, curriculum-gated training, detection, and evaluation.

Everything downstream of the input files is a pure function of the config,
so two runs with the same config and seed produce byte-identical weights,
detections, and reports.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import curriculum as curr
from .data import (
    SOURCE_TARGET,
    SOURCE_WEB,
    SPLIT_TEST,
    SPLIT_TRAIN,
    FeatureBlob,
    ImageRecord,
    RegionSet,
    image_feature_map,
    load_manifest,
    load_regions,
    read_feature_blob,
)
from .errors import ConfigError, DataError
from .evaluation import (
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_NMS_THRESHOLD,
    Detection,
    evaluate_detections,
    load_groundtruth,
    mean_ap,
    nms,
    save_detections,
)
from .head import ModelWeights, TrainConfig, forward, save_weights, train_detector
from .relevance import (
    KNN_MEMBER_SCORE,
    KNN_OUTSIDER_SCORE,
    SelfTrainConfig,
    fit_pca,
    knn_relevance,
    select_seeds,
    self_train,
)

RELEVANCE_VARIANTS = frozenset({"WebRel", "WebRelETH", "WebRelETC"})
DIFFICULTY_VARIANTS = frozenset({"CurrWSDDN", "WebRelETC"})

MODE_SEMANTIC = "semantic"
MODE_KNN = "knn"
MODE_MANIFEST = "manifest"
RELEVANCE_MODES = (MODE_SEMANTIC, MODE_KNN, MODE_MANIFEST)


@dataclass(frozen=True)
class RelevanceSettings:
    mode: str = MODE_SEMANTIC
    threshold: float = 8.0
    k: int = 10
    pca_dim: int = 64
    self_train: SelfTrainConfig = field(default_factory=SelfTrainConfig)

    def __post_init__(self):
        if self.mode not in RELEVANCE_MODES:
            raise ConfigError(f"unknown relevance mode {self.mode!r}")
        if self.k < 1 or self.pca_dim < 1:
            raise ConfigError("k and pca_dim must be >= 1")


@dataclass(frozen=True)
class CurriculumSettings:
    sigma: float = curr.DEFAULT_SIGMA
    kernel_radius: int = curr.DEFAULT_KERNEL_RADIUS
    zc_threshold: float = curr.DEFAULT_ZC_THRESHOLD
    num_regions: int = curr.DEFAULT_NUM_REGIONS
    longer_side: int = 600

    def __post_init__(self):
        if self.num_regions < 1:
            raise ConfigError("num_regions must be >= 1")
        if self.longer_side < 1:
            raise ConfigError("longer_side must be >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    variant: str
    manifest_path: str
    regions_path: str
    region_features_path: str
    out_dir: str
    groundtruth_path: str
    image_features_path: str | None = None
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    relevance: RelevanceSettings = field(default_factory=RelevanceSettings)
    curriculum: CurriculumSettings = field(default_factory=CurriculumSettings)
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    eval_iou: float = DEFAULT_IOU_THRESHOLD


@dataclass(frozen=True)
class RunReport:
    variant: str
    seed: int
    admitted_counts: tuple[int, ...]
    loss_trace: tuple[tuple[float, ...], ...]
    per_class_ap: tuple[tuple[str, float | None], ...]
    map_score: float
    config_echo: tuple[tuple[str, str], ...]

    def to_lines(self) -> list[str]:
        lines = [f"variant {self.variant}", f"seed {self.seed}"]
        lines.extend(f"config {key} {value}" for key, value in self.config_echo)
        for i, count in enumerate(self.admitted_counts, start=1):
            lines.append(f"stage {i} admitted {count}")
        for stage_no, losses in enumerate(self.loss_trace, start=1):
            for epoch_no, value in enumerate(losses, start=1):
                lines.append(f"loss {stage_no} {epoch_no} {value!r}")
        for cls, ap in self.per_class_ap:
            lines.append(f"AP {cls} {'undefined' if ap is None else repr(ap)}")
        lines.append(f"mAP {self.map_score!r}")
        return lines

    def summary(self) -> str:
        rows = [f"variant: {self.variant}   seed: {self.seed}"]
        rows.append(
            "stages: " + ", ".join(
                f"{i}:{n} admitted" for i, n in enumerate(self.admitted_counts, start=1)
            )
        )
        for cls, ap in self.per_class_ap:
            rows.append(f"  AP {cls:<16} {'undefined' if ap is None else f'{ap:.4f}'}")
        rows.append(f"  mAP {'':<15} {self.map_score:.4f}")
        return "\n".join(rows)


def _flatten_config(config: PipelineConfig) -> tuple[tuple[str, str], ...]:
    pairs: list[tuple[str, str]] = []

    def walk(prefix: str, obj) -> None:
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            for f in dataclasses.fields(obj):
                walk(f"{prefix}{f.name}.", getattr(obj, f.name))
        else:
            pairs.append((prefix[:-1], repr(obj) if isinstance(obj, float) else str(obj)))

    walk("", config)
    return tuple(pairs)


# -- scoring stages -------------------------------------------------------------


def score_semantic_relevance(
    records: Sequence[ImageRecord],
    features: Mapping[str, np.ndarray],
    settings: RelevanceSettings,
    seed: int,
) -> list[ImageRecord]:
    """Write self-trained semantic logits into web train records."""
    cfg = replace(settings.self_train, seed=seed)
    web_train = [
        r for r in records if r.source == SOURCE_WEB and r.split == SPLIT_TRAIN
    ]
    seeds = select_seeds(web_train, cfg)
    _, scores = self_train(features, seeds, web_train, cfg)
    return [
        replace(r, relevance=scores[r.id]) if r.id in scores else r for r in records
    ]


def score_knn_relevance(
    records: Sequence[ImageRecord],
    features: Mapping[str, np.ndarray],
    settings: RelevanceSettings,
) -> list[ImageRecord]:
    """Write kNN membership sentinels into web train records."""
    web_train = [
        r for r in records if r.source == SOURCE_WEB and r.split == SPLIT_TRAIN
    ]
    target_train = [
        r for r in records if r.source == SOURCE_TARGET and r.split == SPLIT_TRAIN
    ]
    fit_ids = [r.id for r in web_train + target_train if r.id in features]
    if not fit_ids:
        raise DataError("kNN relevance: no image features available")
    matrix = np.stack([features[rid] for rid in fit_ids])
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    matrix = matrix / np.where(norms > 0, norms, 1.0)
    pca = fit_pca(matrix, settings.pca_dim)
    members = knn_relevance(target_train, web_train, features, pca, settings.k)
    out = []
    for r in records:
        if r.source == SOURCE_WEB and r.split == SPLIT_TRAIN:
            score = KNN_MEMBER_SCORE if r.id in members else KNN_OUTSIDER_SCORE
            out.append(replace(r, relevance=score))
        else:
            out.append(r)
    return out


def score_difficulty(
    records: Sequence[ImageRecord], settings: CurriculumSettings
) -> list[ImageRecord]:
    """Fill missing difficulty on target train records from their image files."""
    out = []
    for r in records:
        if r.source == SOURCE_TARGET and r.split == SPLIT_TRAIN and r.difficulty is None:
            img = curr.load_gray_image(r.path, longer_side=settings.longer_side)
            score = curr.mean_edge_strength(
                img,
                sigma=settings.sigma,
                kernel_radius=settings.kernel_radius,
                zc_threshold=settings.zc_threshold,
            )
            out.append(replace(r, difficulty=score))
        else:
            out.append(r)
    return out


# -- orchestration ----------------------------------------------------------------


def _require_file(path: str | None, what: str) -> str:
    if path is None:
        raise ConfigError(f"{what} path is required for this run")
    if not os.path.exists(path):
        raise ConfigError(f"{what} path {path!r} does not exist")
    return path


def detect(
    records: Sequence[ImageRecord],
    region_sets: Mapping[str, RegionSet],
    region_features: FeatureBlob,
    weights: ModelWeights,
    classes: Sequence[str],
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list[Detection]:
    """Score every record's regions and keep the NMS survivors per class."""
    detections: list[Detection] = []
    for record in records:
        region_set = region_sets.get(record.id)
        if region_set is None or len(region_set) == 0:
            raise DataError(f"record {record.id!r} has no regions to score")
        feats = region_features.rows(region_set.feature_rows)
        output = forward(feats, weights)
        for ci, cls in enumerate(classes):
            candidates = [
                Detection(
                    image_id=record.id,
                    class_id=cls,
                    box=region_set.boxes[r],
                    score=float(output.per_region[r, ci]),
                )
                for r in range(len(region_set))
            ]
            detections.extend(nms(candidates, nms_threshold))
    return detections


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Execute one variant end to end and write weights/detections/report."""
    variant = curr.canonical_variant(config.variant)

    manifest_path = _require_file(config.manifest_path, "manifest")
    regions_path = _require_file(config.regions_path, "regions")
    features_path = _require_file(config.region_features_path, "region features")
    groundtruth_path = _require_file(config.groundtruth_path, "ground truth")

    with open(manifest_path, "r", encoding="utf-8") as fh:
        records = load_manifest(fh)
    with open(regions_path, "r", encoding="utf-8") as fh:
        region_sets = load_regions(fh)
    with open(features_path, "rb") as fh:
        region_features = read_feature_blob(fh)
    with open(groundtruth_path, "r", encoding="utf-8") as fh:
        groundtruth = load_groundtruth(fh)

    classes = sorted({c for r in records for c in r.labels})
    if not classes:
        raise DataError("manifest has no labeled records")

    if variant in RELEVANCE_VARIANTS and config.relevance.mode != MODE_MANIFEST:
        image_features_path = _require_file(config.image_features_path, "image features")
        with open(image_features_path, "rb") as fh:
            image_features = read_feature_blob(fh)
        features = image_feature_map(records, image_features)
        if config.relevance.mode == MODE_SEMANTIC:
            records = score_semantic_relevance(records, features, config.relevance, config.seed)
        else:
            records = score_knn_relevance(records, features, config.relevance)

    if variant in DIFFICULTY_VARIANTS:
        records = score_difficulty(records, config.curriculum)

    schedule = curr.make_schedule(
        variant, config.relevance.threshold, config.curriculum.num_regions
    )

    ranking = None
    if variant in DIFFICULTY_VARIANTS:
        target_train = [
            r for r in records if r.source == SOURCE_TARGET and r.split == SPLIT_TRAIN
        ]
        ranking = curr.rank_by_difficulty(target_train)

    train_cfg = replace(config.train, seed=config.seed)
    result = train_detector(
        records,
        region_sets,
        region_features,
        schedule,
        train_cfg,
        classes=classes,
        ranking=ranking,
    )

    test_records = [r for r in records if r.split == SPLIT_TEST]
    detections = detect(
        test_records, region_sets, region_features, result.weights, classes,
        config.nms_threshold,
    )

    per_class = evaluate_detections(detections, groundtruth, config.eval_iou)
    map_score = mean_ap(per_class)

    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "weights.wgt"), "wb") as fh:
        save_weights(result.weights, fh)
    with open(os.path.join(config.out_dir, "detections.jsonl"), "w", encoding="utf-8") as fh:
        save_detections(detections, fh)

    report = RunReport(
        variant=variant,
        seed=config.seed,
        admitted_counts=result.admitted_counts,
        loss_trace=result.loss_trace,
        per_class_ap=tuple((cls, None if per_class[cls] is None else per_class[cls].ap)
                           for cls in sorted(per_class)),
        map_score=map_score,
        config_echo=_flatten_config(config),
    )
    with open(os.path.join(config.out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.to_lines()))
        fh.write("\n")
    return report
