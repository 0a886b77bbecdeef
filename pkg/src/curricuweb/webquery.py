"""Web dataset expansion: attribute queries, search clients, dedup.

Every target class gets one base text query plus one query per attribute
(viewpoint, pose, or habitat), never cross-combined. A search client returns
ranked image references; each top result can then be expanded through the
client's related-images endpoint. Results are deduplicated by content hash
into single-positive-label web records.

The shipped client is a file-backed stub reading fixture files, one JSON
object per line: {query_text, rank, image_ref, content_hash, related: [...]}.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .data import SOURCE_WEB, ImageRecord, content_hash_for
from .errors import ConfigError, DataError, ProtocolError, TransportError

logger = logging.getLogger(__name__)

KIND_BASE = "base"
KIND_ATTRIBUTED = "attributed"
KIND_RELATED = "related"

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat",
    "chair", "cow", "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)

_FRONT_SIDE = ("front view", "side view")


@dataclass(frozen=True)
class AttributeSet:
    viewpoints: tuple[str, ...] = ()
    poses: tuple[str, ...] = ()
    habitats: tuple[str, ...] = ()

    def __post_init__(self):
        for group in (self.viewpoints, self.poses, self.habitats):
            if any(not a for a in group):
                raise ConfigError("attribute strings must be non-empty")
        object.__setattr__(self, "viewpoints", tuple(self.viewpoints))
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "habitats", tuple(self.habitats))

    def all_attributes(self) -> tuple[str, ...]:
        return self.viewpoints + self.poses + self.habitats


@dataclass(frozen=True)
class Query:
    class_id: str
    text: str
    kind: str
    attribute: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ConfigError("query text must be non-empty")
        if self.kind not in (KIND_BASE, KIND_ATTRIBUTED, KIND_RELATED):
            raise ConfigError(f"unknown query kind {self.kind!r}")
        if self.kind == KIND_ATTRIBUTED and not self.attribute:
            raise ConfigError("attributed queries must carry their attribute")


@dataclass(frozen=True)
class SearchResult:
    query: Query
    rank: int
    image_ref: str
    content_hash: int

    def __post_init__(self):
        if self.rank < 1:
            raise DataError("result rank must be >= 1")
        if not 0 <= self.content_hash < 2**64:
            raise DataError("content_hash must fit in 64 bits")


def default_attribute_table() -> dict[str, AttributeSet]:
    """Attribute table for the 20 VOC classes.

    Vehicles and furniture get the two viewpoints; animals add poses; bird
    adds habitats. Small or flat objects (bottle, pottedplant, tvmonitor)
    get no attributes because viewpoints are not distinctive for them.
    """
    table: dict[str, AttributeSet] = {}
    for cls in ("aeroplane", "bicycle", "boat", "bus", "car",
                "motorbike", "train", "chair", "diningtable", "sofa"):
        table[cls] = AttributeSet(viewpoints=_FRONT_SIDE)
    table["bird"] = AttributeSet(viewpoints=_FRONT_SIDE, habitats=("water", "sky"))
    for cls in ("cat", "dog"):
        table[cls] = AttributeSet(viewpoints=_FRONT_SIDE, poses=("sitting", "walking", "jumping"))
    for cls in ("cow", "sheep"):
        table[cls] = AttributeSet(viewpoints=_FRONT_SIDE, poses=("walking",))
    table["horse"] = AttributeSet(viewpoints=_FRONT_SIDE, poses=("walking", "jumping"))
    table["person"] = AttributeSet(viewpoints=_FRONT_SIDE, poses=("sitting", "standing", "walking"))
    for cls in ("bottle", "pottedplant", "tvmonitor"):
        table[cls] = AttributeSet()
    return table


def expand_queries(
    classes: Sequence[str], table: dict[str, AttributeSet] | None = None
) -> list[Query]:
    """One base query per class plus one per attribute, attributes never combined."""
    if table is None:
        table = default_attribute_table()
    queries: list[Query] = []
    for cls in classes:
        queries.append(Query(class_id=cls, text=cls, kind=KIND_BASE))
        attrs = table.get(cls)
        if attrs is None:
            continue
        for attribute in attrs.all_attributes():
            queries.append(
                Query(
                    class_id=cls,
                    text=f"{cls} {attribute}",
                    kind=KIND_ATTRIBUTED,
                    attribute=attribute,
                )
            )
    return queries


# -- search clients -------------------------------------------------------------


class SearchClient(Protocol):
    """Two endpoints: ranked text search and related-by-image lookup."""

    def search(self, text: str, limit: int) -> list[tuple[str, int]]:
        """Return up to `limit` (image_ref, content_hash) pairs, best first."""
        ...

    def related(self, image_ref: str, limit: int) -> list[str]:
        """Return up to `limit` image refs visually similar to `image_ref`."""
        ...


class StubSearchClient:
    """File-backed stub used in place of a live search engine.

    `path` may be a fixture file or a directory of ``*.jsonl`` fixtures
    (read in sorted filename order). Loading is lazy; a missing path
    surfaces as a transport error on first use.
    """

    def __init__(self, path: str):
        self.path = path
        self._by_query: dict[str, list[tuple[int, str, int]]] | None = None
        self._related: dict[str, list[str]] = {}

    def _fixture_files(self) -> list[str]:
        if os.path.isdir(self.path):
            names = sorted(n for n in os.listdir(self.path) if n.endswith(".jsonl"))
            return [os.path.join(self.path, n) for n in names]
        return [self.path]

    def _load(self) -> None:
        if self._by_query is not None:
            return
        by_query: dict[str, list[tuple[int, str, int]]] = {}
        related: dict[str, list[str]] = {}
        for file_path in self._fixture_files():
            try:
                with open(file_path, "r", encoding="utf-8") as fh:
                    lines = fh.readlines()
            except OSError as exc:
                raise TransportError(
                    f"cannot read fixture {file_path!r}: {exc}", retryable=False
                ) from exc
            for line_no, line in enumerate(lines, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    entry = (
                        int(obj["rank"]),
                        str(obj["image_ref"]),
                        int(obj["content_hash"]),
                    )
                    query_text = str(obj["query_text"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ProtocolError(
                        f"fixture {file_path!r} line {line_no}: {exc}"
                    ) from exc
                by_query.setdefault(query_text, []).append(entry)
                refs = obj.get("related", ())
                if not isinstance(refs, (list, tuple)):
                    raise ProtocolError(
                        f"fixture {file_path!r} line {line_no}: related must be a list"
                    )
                related.setdefault(entry[1], [str(r) for r in refs])
        for entries in by_query.values():
            entries.sort()
        self._by_query = by_query
        self._related = related

    def search(self, text: str, limit: int) -> list[tuple[str, int]]:
        self._load()
        entries = self._by_query.get(text, [])
        return [(ref, chash) for _, ref, chash in entries[:limit]]

    def related(self, image_ref: str, limit: int) -> list[str]:
        self._load()
        return list(self._related.get(image_ref, ())[:limit])


def fetch(client: SearchClient, query: Query, limit: int) -> list[SearchResult]:
    """Run a text query; results come back re-ranked contiguously from 1."""
    if limit < 1:
        raise ConfigError("fetch limit must be >= 1")
    rows = client.search(query.text, limit)
    return [
        SearchResult(query=query, rank=i + 1, image_ref=ref, content_hash=chash)
        for i, (ref, chash) in enumerate(rows[:limit])
    ]


def expand_related(
    client: SearchClient,
    seed_results: Sequence[SearchResult],
    per_seed_limit: int = 20,
) -> list[SearchResult]:
    """Expand every seed through the related-images endpoint, seed order kept.

    Per-seed transport failures are logged and skipped; the call fails only
    when every seed fails.
    """
    if not seed_results:
        raise ConfigError("expand_related needs at least one seed result")
    if per_seed_limit < 1:
        raise ConfigError("per_seed_limit must be >= 1")

    out: list[SearchResult] = []
    failures = 0
    for seed in seed_results:
        try:
            refs = client.related(seed.image_ref, per_seed_limit)
        except TransportError as exc:
            failures += 1
            logger.warning("related lookup failed for %r: %s", seed.image_ref, exc)
            continue
        query = Query(
            class_id=seed.query.class_id,
            text=seed.image_ref,
            kind=KIND_RELATED,
            attribute=seed.query.attribute,
        )
        for i, ref in enumerate(refs[:per_seed_limit]):
            out.append(
                SearchResult(
                    query=query,
                    rank=i + 1,
                    image_ref=ref,
                    content_hash=content_hash_for(ref),
                )
            )
    if failures == len(seed_results):
        raise TransportError("related lookup failed for every seed", retryable=True)
    return out


def dedup_and_manifest(
    results: Iterable[SearchResult], classes: Sequence[str]
) -> list[ImageRecord]:
    """Collapse results into unique web records, first occurrence winning.

    Dedup key is the content hash (with the image ref as a fallback guard).
    Records carry a single +1 label for the originating class; the query
    text and rank are kept only for base/attributed queries, since related
    results never participate in seed selection.
    """
    known = set(classes)
    records: list[ImageRecord] = []
    seen_hashes: set[int] = set()
    seen_refs: set[str] = set()
    for result in results:
        cls = result.query.class_id
        if cls not in known:
            raise DataError(f"result class {cls!r} is not in the class list")
        if result.content_hash in seen_hashes or result.image_ref in seen_refs:
            continue
        seen_hashes.add(result.content_hash)
        seen_refs.add(result.image_ref)
        from_related = result.query.kind == KIND_RELATED
        records.append(
            ImageRecord(
                id=result.image_ref,
                source=SOURCE_WEB,
                labels={cls: 1},
                path=result.image_ref,
                attributes=(result.query.attribute,) if result.query.attribute else (),
                content_hash=result.content_hash,
                query=None if from_related else result.query.text,
                query_rank=None if from_related else result.rank,
            )
        )
    return records
