"""Canonical dataset types and their file formats.

Three line-delimited UTF-8 formats (one JSON object per line):

* manifest  — image records; keys: id, source, labels, path, attributes,
  split, plus optional difficulty, relevance, content_hash, query,
  query_rank. Unknown keys are ignored on load.
* regions   — per-image proposals; keys: image_id, boxes, feature_rows.
* (detections and ground truth live in `evaluation`)

One binary format, FVEC: magic ``FVEC``, u32 LE version=1, u32 LE count,
u32 LE dim, then count*dim IEEE-754 binary32 LE values, row-major.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Mapping, Sequence, TextIO

import numpy as np

from .errors import DataError, FormatError, IntegrityError, ParseError

SOURCE_WEB = "web"
SOURCE_TARGET = "target"
SOURCES = (SOURCE_WEB, SOURCE_TARGET)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_TEST)

FVEC_MAGIC = b"FVEC"
FVEC_VERSION = 1
_FVEC_HEADER = struct.Struct("<4sIII")

Box = tuple[float, float, float, float]


def _check_box(box: Sequence[float], context: str) -> Box:
    if len(box) != 4:
        raise DataError(f"{context}: box must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise DataError(f"{context}: box coordinates must be finite")
    if not (x2 > x1 and y2 > y1):
        raise DataError(f"{context}: box must satisfy x2 > x1 and y2 > y1, got {box}")
    return (x1, y1, x2, y2)


@dataclass(frozen=True)
class ImageRecord:
    """One image with its per-class labels and optional pipeline scores.

    `labels` maps class id to -1 or +1; a class absent from the map counts
    as -1. `difficulty` and `relevance` are filled in by the curriculum and
    relevance stages. `query`/`query_rank` record the originating search
    query for web records so seed selection can find them again.
    """

    id: str
    source: str
    labels: Mapping[str, int]
    path: str
    split: str = SPLIT_TRAIN
    attributes: tuple[str, ...] = ()
    difficulty: float | None = None
    relevance: float | None = None
    content_hash: int | None = None
    query: str | None = None
    query_rank: int | None = None

    def __post_init__(self):
        if not self.id:
            raise DataError("record id must be non-empty")
        if self.source not in SOURCES:
            raise DataError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id!r}: unknown split {self.split!r}")
        for cls, value in self.labels.items():
            if value not in (-1, 1):
                raise DataError(
                    f"record {self.id!r}: label for {cls!r} must be -1 or 1, got {value!r}"
                )
        if self.split == SPLIT_TRAIN and not self.labels:
            raise DataError(f"record {self.id!r}: train-split records need labels")
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if self.difficulty is not None:
            if not math.isfinite(self.difficulty) or self.difficulty < 0:
                raise DataError(f"record {self.id!r}: difficulty must be finite and >= 0")
        if self.relevance is not None and not math.isfinite(self.relevance):
            raise DataError(f"record {self.id!r}: relevance must be finite")
        if self.content_hash is not None and not 0 <= self.content_hash < 2**64:
            raise DataError(f"record {self.id!r}: content_hash must fit in 64 bits")
        if self.query_rank is not None and self.query_rank < 1:
            raise DataError(f"record {self.id!r}: query_rank must be >= 1")

    def positive_classes(self) -> tuple[str, ...]:
        return tuple(sorted(c for c, v in self.labels.items() if v > 0))

    def label_for(self, cls: str) -> int:
        return self.labels.get(cls, -1)


@dataclass(frozen=True)
class FeatureBlob:
    """Dense row-major float32 feature matrix; immutable once built."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"feature blob must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise DataError("feature blob dim must be >= 1")
        if arr.size and not np.all(np.isfinite(arr)):
            raise DataError("feature blob contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def rows(self, indices: Sequence[int]) -> np.ndarray:
        """Gather rows as float64, range-checking the indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.count):
            raise DataError(
                f"feature row index out of range (blob has {self.count} rows)"
            )
        return self.data[idx].astype(np.float64)


@dataclass(frozen=True)
class RegionSet:
    """Region proposals for one image plus their rows in a feature blob."""

    image_id: str
    boxes: tuple[Box, ...]
    feature_rows: tuple[int, ...]

    def __post_init__(self):
        boxes = tuple(_check_box(b, f"regions for {self.image_id!r}") for b in self.boxes)
        rows = tuple(int(r) for r in self.feature_rows)
        if len(boxes) != len(rows):
            raise DataError(
                f"regions for {self.image_id!r}: {len(boxes)} boxes vs "
                f"{len(rows)} feature rows"
            )
        if any(r < 0 for r in rows):
            raise DataError(f"regions for {self.image_id!r}: negative feature row")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "feature_rows", rows)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: str
    box: Box

    def __post_init__(self):
        object.__setattr__(
            self, "box", _check_box(self.box, f"ground truth for {self.image_id!r}")
        )


# -- manifest I/O ------------------------------------------------------------


def _record_from_obj(obj: dict, line_no: int) -> ImageRecord:
    try:
        labels = {str(c): int(v) for c, v in dict(obj["labels"]).items()}
        return ImageRecord(
            id=str(obj["id"]),
            source=str(obj["source"]),
            labels=labels,
            path=str(obj["path"]),
            split=str(obj.get("split", SPLIT_TRAIN)),
            attributes=tuple(str(a) for a in obj.get("attributes", ())),
            difficulty=None if obj.get("difficulty") is None else float(obj["difficulty"]),
            relevance=None if obj.get("relevance") is None else float(obj["relevance"]),
            content_hash=None if obj.get("content_hash") is None else int(obj["content_hash"]),
            query=None if obj.get("query") is None else str(obj["query"]),
            query_rank=None if obj.get("query_rank") is None else int(obj["query_rank"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"manifest line {line_no}: {exc}") from exc


def load_manifest(stream: TextIO | Iterable[str]) -> list[ImageRecord]:
    """Parse a manifest stream, preserving file order and rejecting duplicate ids."""
    records: list[ImageRecord] = []
    seen: set[str] = set()
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest line {line_no}: invalid JSON ({exc.msg})") from exc
        if not isinstance(obj, dict):
            raise ParseError(f"manifest line {line_no}: expected an object")
        record = _record_from_obj(obj, line_no)
        if record.id in seen:
            raise IntegrityError(f"duplicate record id {record.id!r} (line {line_no})")
        seen.add(record.id)
        records.append(record)
    return records


def _record_to_obj(record: ImageRecord) -> dict:
    obj: dict = {
        "id": record.id,
        "source": record.source,
        "split": record.split,
        "path": record.path,
        "labels": {c: record.labels[c] for c in sorted(record.labels)},
        "attributes": list(record.attributes),
    }
    for key in ("difficulty", "relevance", "content_hash", "query", "query_rank"):
        value = getattr(record, key)
        if value is not None:
            obj[key] = value
    return obj


def save_manifest(records: Iterable[ImageRecord], stream: TextIO) -> None:
    seen: set[str] = set()
    for record in records:
        if record.id in seen:
            raise IntegrityError(f"duplicate record id {record.id!r}")
        seen.add(record.id)
        stream.write(json.dumps(_record_to_obj(record), ensure_ascii=False))
        stream.write("\n")


# -- FVEC blob I/O -----------------------------------------------------------


def write_feature_blob(blob: FeatureBlob, stream: BinaryIO) -> None:
    stream.write(_FVEC_HEADER.pack(FVEC_MAGIC, FVEC_VERSION, blob.count, blob.dim))
    stream.write(np.ascontiguousarray(blob.data, dtype="<f4").tobytes())


def read_feature_blob(stream: BinaryIO) -> FeatureBlob:
    header = stream.read(_FVEC_HEADER.size)
    if len(header) != _FVEC_HEADER.size:
        raise FormatError("feature blob: truncated header")
    magic, version, count, dim = _FVEC_HEADER.unpack(header)
    if magic != FVEC_MAGIC:
        raise FormatError(f"feature blob: bad magic {magic!r}")
    if version != FVEC_VERSION:
        raise FormatError(f"feature blob: unsupported version {version}")
    if dim < 1:
        raise FormatError("feature blob: dim must be >= 1")
    payload = stream.read(count * dim * 4)
    if len(payload) != count * dim * 4:
        raise FormatError(
            f"feature blob: truncated payload ({len(payload)} of {count * dim * 4} bytes)"
        )
    if stream.read(1):
        raise FormatError("feature blob: trailing data after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    if data.size and not np.all(np.isfinite(data)):
        raise FormatError("feature blob: non-finite value in payload")
    return FeatureBlob(data=data)


def l2_normalize(blob: FeatureBlob) -> FeatureBlob:
    """Scale every row to unit Euclidean norm; all-zero rows stay zero."""
    data = blob.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    nonzero = norms > 0
    data[nonzero] /= norms[nonzero, None]
    return FeatureBlob(data=data)


# -- regions I/O -------------------------------------------------------------


def load_regions(stream: TextIO | Iterable[str]) -> dict[str, RegionSet]:
    """Parse a regions file into a mapping keyed by image id."""
    out: dict[str, RegionSet] = {}
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            region = RegionSet(
                image_id=str(obj["image_id"]),
                boxes=tuple(tuple(float(v) for v in b) for b in obj["boxes"]),
                feature_rows=tuple(int(r) for r in obj["feature_rows"]),
            )
        except json.JSONDecodeError as exc:
            raise ParseError(f"regions line {line_no}: invalid JSON ({exc.msg})") from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"regions line {line_no}: {exc}") from exc
        if region.image_id in out:
            raise IntegrityError(f"duplicate regions for image {region.image_id!r}")
        out[region.image_id] = region
    return out


def save_regions(regions: Iterable[RegionSet], stream: TextIO) -> None:
    seen: set[str] = set()
    for region in regions:
        if region.image_id in seen:
            raise IntegrityError(f"duplicate regions for image {region.image_id!r}")
        seen.add(region.image_id)
        obj = {
            "image_id": region.image_id,
            "boxes": [list(b) for b in region.boxes],
            "feature_rows": list(region.feature_rows),
        }
        stream.write(json.dumps(obj, ensure_ascii=False))
        stream.write("\n")


# -- helpers -----------------------------------------------------------------


def content_hash_for(path: str) -> int:
    """64-bit content hash: raw bytes at `path` when readable, else the path text."""
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError:
        payload = path.encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def image_feature_map(
    records: Sequence[ImageRecord], blob: FeatureBlob
) -> dict[str, np.ndarray]:
    """Pair manifest order with blob rows: row i belongs to records[i]."""
    if len(records) != blob.count:
        raise DataError(
            f"image feature blob has {blob.count} rows for {len(records)} records"
        )
    data = blob.data.astype(np.float64)
    return {record.id: data[i] for i, record in enumerate(records)}
