"""Synthetic desk-scale dataset generator.

Class-conditional Gaussian region features: every positive image carries
exactly one region with its class signature vector, the rest are noise.
Easy images have that one dominant region; hard images add a strong
confuser region carrying another class's signature, which makes the
image-level labels genuinely ambiguous for a detector trained from scratch.
Web-source images are always easy and carry base-query provenance so the
relevance stages can run; target-source images mix easy and hard. Ground
truth marks the signature region's box, so localization quality maps
directly onto mAP.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import (
    SOURCE_TARGET,
    SOURCE_WEB,
    SPLIT_TEST,
    SPLIT_TRAIN,
    FeatureBlob,
    GroundTruthBox,
    ImageRecord,
    RegionSet,
    save_manifest,
    save_regions,
    write_feature_blob,
)
from .errors import ConfigError
from .evaluation import save_groundtruth
from .rng import STREAM_SYNTH, check_seed, spawn_rng

SIGNATURE_SCALE = 6.0
CONFUSER_SCALE = 6.0
OUTLIER_SCALE = 10.0

_BOX_STRIDE = 20.0
_BOX_SIZE = 16.0


@dataclass(frozen=True)
class SyntheticDataset:
    records: tuple[ImageRecord, ...]
    region_sets: dict[str, RegionSet]
    region_features: FeatureBlob
    image_features: FeatureBlob  # row i belongs to records[i]
    groundtruth: tuple[GroundTruthBox, ...]
    classes: tuple[str, ...]


def _region_box(j: int) -> tuple[float, float, float, float]:
    x = j * _BOX_STRIDE
    return (x, 0.0, x + _BOX_SIZE, _BOX_SIZE)


def gen_synthetic(
    classes: Sequence[str] = ("alpha", "beta"),
    images_per_class: int = 10,
    regions_per_image: int = 4,
    dim: int = 8,
    easy_fraction: float = 0.5,
    noise: float = 0.1,
    seed: int = 0,
    *,
    web_per_class: int | None = None,
    test_per_class: int | None = None,
    web_outlier_fraction: float = 0.0,
) -> SyntheticDataset:
    """Generate aligned manifest, regions, features, and ground truth.

    `images_per_class` counts target-source train images; web and held-out
    test counts default to the same number. `easy_fraction` of each class's
    target images are easy (single dominant region), the rest hard (extra
    confuser region from another class). `web_outlier_fraction` of each
    class's web images are off-topic noise ranked below the clean results.
    """
    classes = tuple(classes)
    if len(classes) < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    if images_per_class < 1 or regions_per_image < 1:
        raise ConfigError("images_per_class and regions_per_image must be >= 1")
    if dim < len(classes) + 1:
        raise ConfigError(f"dim must be >= number of classes + 1, got {dim}")
    if not 0.0 <= easy_fraction <= 1.0:
        raise ConfigError("easy_fraction must be in [0, 1]")
    if noise < 0:
        raise ConfigError("noise must be >= 0")
    if not 0.0 <= web_outlier_fraction <= 1.0:
        raise ConfigError("web_outlier_fraction must be in [0, 1]")
    check_seed(seed)
    web_count = images_per_class if web_per_class is None else web_per_class
    test_count = images_per_class if test_per_class is None else test_per_class
    if web_count < 1 or test_count < 0:
        raise ConfigError("web_per_class must be >= 1 and test_per_class >= 0")

    rng = spawn_rng(seed, STREAM_SYNTH)
    signatures = np.zeros((len(classes), dim))
    for c in range(len(classes)):
        signatures[c, c] = SIGNATURE_SCALE

    records: list[ImageRecord] = []
    region_sets: dict[str, RegionSet] = {}
    region_rows: list[np.ndarray] = []
    image_rows: list[np.ndarray] = []
    groundtruth: list[GroundTruthBox] = []
    next_row = 0

    def background() -> np.ndarray:
        return noise * rng.standard_normal(dim)

    def add_image(image_id: str, feats: list[np.ndarray], gt_class: str | None) -> None:
        nonlocal next_row
        rows = tuple(range(next_row, next_row + len(feats)))
        next_row += len(feats)
        region_rows.extend(feats)
        image_rows.append(np.mean(feats, axis=0))
        boxes = tuple(_region_box(j) for j in range(len(feats)))
        region_sets[image_id] = RegionSet(image_id=image_id, boxes=boxes, feature_rows=rows)
        if gt_class is not None:
            groundtruth.append(
                GroundTruthBox(image_id=image_id, class_id=gt_class, box=boxes[0])
            )

    def easy_regions(c: int) -> list[np.ndarray]:
        feats = [signatures[c] + noise * rng.standard_normal(dim)]
        feats.extend(background() for _ in range(regions_per_image - 1))
        return feats

    def hard_regions(c: int) -> list[np.ndarray]:
        feats = [signatures[c] + noise * rng.standard_normal(dim)]
        if regions_per_image > 1:
            other = (c + 1) % len(classes)
            feats.append(CONFUSER_SCALE / SIGNATURE_SCALE * signatures[other]
                         + noise * rng.standard_normal(dim))
        feats.extend(background() for _ in range(regions_per_image - len(feats)))
        return feats

    # Web images: clean ones first (top-ranked), outliers after.
    n_outliers = int(round(web_outlier_fraction * web_count))
    n_clean = web_count - n_outliers
    for c, cls in enumerate(classes):
        for i in range(web_count):
            image_id = f"web-{cls}-{i:03d}"
            is_outlier = i >= n_clean
            if is_outlier:
                direction = np.zeros(dim)
                direction[len(classes) + (i % (dim - len(classes)))] = 1.0
                feats = [OUTLIER_SCALE * direction + noise * rng.standard_normal(dim)
                         for _ in range(regions_per_image)]
            else:
                feats = easy_regions(c)
            records.append(
                ImageRecord(
                    id=image_id,
                    source=SOURCE_WEB,
                    labels={cls: 1},
                    path=f"synthetic://{image_id}",
                    split=SPLIT_TRAIN,
                    query=cls,
                    query_rank=i + 1,
                )
            )
            add_image(image_id, feats, gt_class=None)

    # Target train images: easy prefix, hard suffix, difficulty to match.
    n_easy = int(np.floor(easy_fraction * images_per_class + 0.5))
    for c, cls in enumerate(classes):
        for i in range(images_per_class):
            image_id = f"tgt-{cls}-{i:03d}"
            is_easy = i < n_easy
            feats = easy_regions(c) if is_easy else hard_regions(c)
            difficulty = (
                0.02 + 0.08 * rng.uniform() if is_easy else 0.6 + 0.3 * rng.uniform()
            )
            records.append(
                ImageRecord(
                    id=image_id,
                    source=SOURCE_TARGET,
                    labels={cls: 1},
                    path=f"synthetic://{image_id}",
                    split=SPLIT_TRAIN,
                    difficulty=float(difficulty),
                )
            )
            add_image(image_id, feats, gt_class=cls)

    # Held-out test images mirror the target train mix.
    n_easy_test = int(np.floor(easy_fraction * test_count + 0.5))
    for c, cls in enumerate(classes):
        for i in range(test_count):
            image_id = f"test-{cls}-{i:03d}"
            feats = easy_regions(c) if i < n_easy_test else hard_regions(c)
            records.append(
                ImageRecord(
                    id=image_id,
                    source=SOURCE_TARGET,
                    labels={cls: 1},
                    path=f"synthetic://{image_id}",
                    split=SPLIT_TEST,
                )
            )
            add_image(image_id, feats, gt_class=cls)

    return SyntheticDataset(
        records=tuple(records),
        region_sets=region_sets,
        region_features=FeatureBlob(data=np.stack(region_rows)),
        image_features=FeatureBlob(data=np.stack(image_rows)),
        groundtruth=tuple(groundtruth),
        classes=classes,
    )


def write_synthetic(dataset: SyntheticDataset, out_dir: str) -> dict[str, str]:
    """Write the dataset under `out_dir`; returns the path of each artifact."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "manifest": os.path.join(out_dir, "manifest.jsonl"),
        "regions": os.path.join(out_dir, "regions.jsonl"),
        "region_features": os.path.join(out_dir, "region_features.fvec"),
        "image_features": os.path.join(out_dir, "image_features.fvec"),
        "groundtruth": os.path.join(out_dir, "groundtruth.jsonl"),
    }
    with open(paths["manifest"], "w", encoding="utf-8") as fh:
        save_manifest(dataset.records, fh)
    with open(paths["regions"], "w", encoding="utf-8") as fh:
        save_regions([dataset.region_sets[r.id] for r in dataset.records], fh)
    with open(paths["region_features"], "wb") as fh:
        write_feature_blob(dataset.region_features, fh)
    with open(paths["image_features"], "wb") as fh:
        write_feature_blob(dataset.image_features, fh)
    with open(paths["groundtruth"], "w", encoding="utf-8") as fh:
        save_groundtruth(dataset.groundtruth, fh)
    return paths
