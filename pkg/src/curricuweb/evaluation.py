"""Detection evaluation: IoU, greedy NMS, 11-point average precision, mAP.

Boxes are continuous (x1, y1, x2, y2) with area (x2-x1)*(y2-y1). A detection
matches the unmatched ground-truth box of highest IoU within its image when
that IoU reaches the threshold; later detections on an already-matched box
count as false positives. AP interpolates precision at the eleven recall
points 0.0, 0.1, ..., 1.0.

File formats (JSON object per line):
  detections   — {image_id, class, box, score}
  ground truth — {image_id, class, box}
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, TextIO

from .data import Box, GroundTruthBox, _check_box
from .errors import DataError, EvaluationError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_NMS_THRESHOLD = 0.4
DEFAULT_IOU_THRESHOLD = 0.5

# Exact tenths: k/10 reproduces recall ratios like 3/10 bit-for-bit.
RECALL_GRID = tuple(k / 10 for k in range(11))


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: str
    box: Box
    score: float

    def __post_init__(self):
        object.__setattr__(
            self, "box", _check_box(self.box, f"detection in {self.image_id!r}")
        )
        if not math.isfinite(self.score):
            raise DataError(f"detection in {self.image_id!r}: score must be finite")


@dataclass(frozen=True)
class PrCurve:
    """Precision/recall swept over detections in score order, plus the 11-point AP."""

    precision: tuple[float, ...]
    recall: tuple[float, ...]
    ap: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def nms(
    detections: Sequence[Detection], iou_threshold: float = DEFAULT_NMS_THRESHOLD
) -> list[Detection]:
    """Greedy suppression for one image+class group.

    Keeps detections in descending score order (ties: ascending box
    coordinates, then input order) and drops anything whose IoU with a kept
    box exceeds the threshold.
    """
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].box, i),
    )
    kept: list[Detection] = []
    for i in order:
        candidate = detections[i]
        if all(iou(candidate.box, k.box) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def average_precision(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> PrCurve | None:
    """11-point interpolated AP for one class; None when the class has no ground truth."""
    n_gt = len(ground_truth)
    if n_gt == 0:
        return None

    gts_by_image: dict[str, list[int]] = {}
    for idx, gt in enumerate(ground_truth):
        gts_by_image.setdefault(gt.image_id, []).append(idx)
    matched: set[int] = set()

    order = sorted(detections, key=lambda d: (-d.score, d.image_id, d.box))
    tp = fp = 0
    precision: list[float] = []
    recall: list[float] = []
    for det in order:
        best_idx = -1
        best_iou = 0.0
        for idx in gts_by_image.get(det.image_id, ()):
            if idx in matched:
                continue
            overlap = iou(det.box, ground_truth[idx].box)
            if overlap > best_iou:  # strict: equal IoU keeps the earlier box
                best_iou = overlap
                best_idx = idx
        if best_idx >= 0 and best_iou >= iou_threshold:
            matched.add(best_idx)
            tp += 1
        else:
            fp += 1
        precision.append(tp / (tp + fp))
        recall.append(tp / n_gt)

    ap = 0.0
    for r in RECALL_GRID:
        best = 0.0
        for p, rec in zip(precision, recall):
            if rec >= r and p > best:
                best = p
        ap += best
    ap /= len(RECALL_GRID)
    return PrCurve(precision=tuple(precision), recall=tuple(recall), ap=ap)


def mean_ap(per_class: Mapping[str, PrCurve | None]) -> float:
    """Unweighted mean AP over classes with a defined curve."""
    defined = [curve.ap for curve in per_class.values() if curve is not None]
    if not defined:
        raise EvaluationError("no class has a defined average precision")
    return sum(defined) / len(defined)


def evaluate_detections(
    detections: Sequence[Detection],
    ground_truth: Sequence[GroundTruthBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> dict[str, PrCurve | None]:
    """Per-class AP over every class present in detections or ground truth."""
    classes = sorted(
        {d.class_id for d in detections} | {g.class_id for g in ground_truth}
    )
    out: dict[str, PrCurve | None] = {}
    for cls in classes:
        dets = [d for d in detections if d.class_id == cls]
        gts = [g for g in ground_truth if g.class_id == cls]
        curve = average_precision(dets, gts, iou_threshold)
        if curve is None:
            logger.warning("class %r has no ground truth; AP undefined", cls)
        out[cls] = curve
    return out


# -- file I/O --------------------------------------------------------------------


def save_detections(detections: Iterable[Detection], stream: TextIO) -> None:
    for det in detections:
        obj = {
            "image_id": det.image_id,
            "class": det.class_id,
            "box": list(det.box),
            "score": det.score,
        }
        stream.write(json.dumps(obj, ensure_ascii=False))
        stream.write("\n")


def load_detections(stream: TextIO | Iterable[str]) -> list[Detection]:
    out: list[Detection] = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            out.append(
                Detection(
                    image_id=str(obj["image_id"]),
                    class_id=str(obj["class"]),
                    box=tuple(float(v) for v in obj["box"]),
                    score=float(obj["score"]),
                )
            )
        except json.JSONDecodeError as exc:
            raise ParseError(f"detections line {line_no}: invalid JSON ({exc.msg})") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"detections line {line_no}: {exc}") from exc
    return out


def save_groundtruth(boxes: Iterable[GroundTruthBox], stream: TextIO) -> None:
    for gt in boxes:
        obj = {"image_id": gt.image_id, "class": gt.class_id, "box": list(gt.box)}
        stream.write(json.dumps(obj, ensure_ascii=False))
        stream.write("\n")


def load_groundtruth(stream: TextIO | Iterable[str]) -> list[GroundTruthBox]:
    out: list[GroundTruthBox] = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            out.append(
                GroundTruthBox(
                    image_id=str(obj["image_id"]),
                    class_id=str(obj["class"]),
                    box=tuple(float(v) for v in obj["box"]),
                )
            )
        except json.JSONDecodeError as exc:
            raise ParseError(f"ground truth line {line_no}: invalid JSON ({exc.msg})") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"ground truth line {line_no}: {exc}") from exc
    return out
