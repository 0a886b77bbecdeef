"""Difficulty scoring and curriculum schedules.

Difficulty is the mean edge strength of an image: the fraction of pixels
marked as edges by a Laplacian-of-Gaussian zero-crossing detector. Images
are ranked per class by that score, and nested training regions admit a
growing prefix of each class ranking (region t of T admits the
ceil(t/T * n_c) easiest images of class c).

A schedule is an ordered list of stages; each stage admits records by
source, optionally gates web records by relevance score, and optionally
gates target records by difficulty-rank fraction. The stage gate is the
0/1 product of those tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np
from scipy.signal import convolve2d

from .data import SOURCE_TARGET, SOURCE_WEB, SOURCES, ImageRecord
from .errors import ConfigError, DataError, ParseError

DEFAULT_SIGMA = 2.0
DEFAULT_KERNEL_RADIUS = 4
DEFAULT_ZC_THRESHOLD = 0.01
DEFAULT_NUM_REGIONS = 5

VARIANTS = ("WSDDN", "CurrWSDDN", "WebRel", "WebETH", "WebRelETH", "WebRelETC")


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with intensities in [0, 1], pixels indexed [row][col]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"gray image must be 2-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise DataError("gray image intensities must be finite and in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


def log_kernel(sigma: float = DEFAULT_SIGMA, kernel_radius: int = DEFAULT_KERNEL_RADIUS) -> np.ndarray:
    """Truncated Laplacian-of-Gaussian tap, shifted to zero mean.

    The zero-mean shift makes the response to a constant image exactly zero,
    which the truncation would otherwise break.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    if kernel_radius < 1:
        raise ConfigError("kernel_radius must be >= 1")
    coords = np.arange(-kernel_radius, kernel_radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(coords, coords)
    r2 = xx * xx + yy * yy
    kernel = (r2 - 2.0 * sigma**2) / sigma**4 * np.exp(-r2 / (2.0 * sigma**2))
    return kernel - kernel.mean()


def log_response(
    img: GrayImage,
    sigma: float = DEFAULT_SIGMA,
    kernel_radius: int = DEFAULT_KERNEL_RADIUS,
) -> np.ndarray:
    """LoG response over the valid interior (border where the kernel overhangs is dropped)."""
    if not (img.width > 2 * kernel_radius and img.height > 2 * kernel_radius):
        raise DataError(
            f"image {img.width}x{img.height} too small for kernel radius {kernel_radius}"
        )
    kernel = log_kernel(sigma, kernel_radius)
    # The kernel is symmetric, so convolution equals correlation here.
    return convolve2d(img.pixels, kernel, mode="valid")


def mean_edge_strength(
    img: GrayImage,
    *,
    sigma: float = DEFAULT_SIGMA,
    kernel_radius: int = DEFAULT_KERNEL_RADIUS,
    zc_threshold: float = DEFAULT_ZC_THRESHOLD,
) -> float:
    """Edge-pixel fraction of the image, edges from LoG zero crossings.

    A pixel is an edge pixel when the response at a 4-neighbour has strictly
    opposite sign and the absolute response difference exceeds zc_threshold.
    Both sides of a crossing are marked. Border pixels (kernel overhang) are
    never edges; the denominator is the full pixel count.
    """
    if zc_threshold < 0:
        raise ConfigError("zc_threshold must be >= 0")
    resp = log_response(img, sigma, kernel_radius)
    edges = np.zeros(resp.shape, dtype=bool)

    horiz = (resp[:, :-1] * resp[:, 1:] < 0) & (
        np.abs(resp[:, :-1] - resp[:, 1:]) > zc_threshold
    )
    edges[:, :-1] |= horiz
    edges[:, 1:] |= horiz

    vert = (resp[:-1, :] * resp[1:, :] < 0) & (
        np.abs(resp[:-1, :] - resp[1:, :]) > zc_threshold
    )
    edges[:-1, :] |= vert
    edges[1:, :] |= vert

    return float(edges.sum()) / float(img.width * img.height)


def load_gray_image(path: str, longer_side: int | None = 600) -> GrayImage:
    """Load an image file as grayscale in [0, 1].

    When `longer_side` is set, the image is resized so its longer side equals
    that many pixels (aspect preserved) before scoring, matching the ingestion
    policy for web imagery.
    """
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if longer_side is not None and max(im.size) != longer_side:
                w, h = im.size
                scale = longer_side / max(w, h)
                im = im.resize(
                    (max(1, round(w * scale)), max(1, round(h * scale))),
                    Image.BILINEAR,
                )
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path!r}: {exc}") from exc
    return GrayImage(pixels=arr)


# -- difficulty ranking --------------------------------------------------------


@dataclass(frozen=True)
class DifficultyRanking:
    """Per-class ascending difficulty order with deterministic id tie-breaks."""

    per_class: Mapping[str, tuple[tuple[str, float], ...]]

    def __post_init__(self):
        positions: dict[str, dict[str, int]] = {}
        for cls, entries in self.per_class.items():
            positions[cls] = {image_id: i for i, (image_id, _) in enumerate(entries)}
        object.__setattr__(self, "_positions", positions)

    def classes(self) -> tuple[str, ...]:
        return tuple(sorted(self.per_class))

    def count(self, cls: str) -> int:
        return len(self.per_class.get(cls, ()))

    def position(self, cls: str, image_id: str) -> int | None:
        return self._positions.get(cls, {}).get(image_id)

    def quota(self, cls: str, fraction: Fraction) -> int:
        """ceil(fraction * n_cls), computed exactly."""
        n = self.count(cls)
        return -((-fraction.numerator * n) // fraction.denominator)

    def admitted_ids(self, cls: str, fraction: Fraction) -> frozenset[str]:
        q = self.quota(cls, fraction)
        return frozenset(image_id for image_id, _ in self.per_class.get(cls, ())[:q])


def rank_by_difficulty(records: Sequence[ImageRecord]) -> DifficultyRanking:
    """Sort records ascending by difficulty within every positive-label class."""
    buckets: dict[str, list[tuple[str, float]]] = {}
    for record in records:
        positives = record.positive_classes()
        if not positives:
            continue
        if record.difficulty is None:
            raise DataError(f"record {record.id!r} has no difficulty score")
        for cls in positives:
            buckets.setdefault(cls, []).append((record.id, record.difficulty))
    per_class = {
        cls: tuple(sorted(entries, key=lambda e: (e[1], e[0])))
        for cls, entries in buckets.items()
    }
    return DifficultyRanking(per_class=per_class)


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        frac = value
    elif isinstance(value, int):
        frac = Fraction(value)
    elif isinstance(value, float):
        # Floats like 0.2 round to the intended tenth; exact quota math needs rationals.
        frac = Fraction(value).limit_denominator(10**6)
    else:
        raise ConfigError(f"difficulty fraction must be a number, got {value!r}")
    if not 0 < frac <= 1:
        raise ConfigError(f"difficulty fraction must be in (0, 1], got {frac}")
    return frac


@dataclass(frozen=True)
class CurriculumRegion:
    """One nested region: its rank fraction and per-class admitted ids."""

    fraction: Fraction
    admitted: Mapping[str, frozenset[str]]


def build_regions(
    ranking: DifficultyRanking, num_regions: int = DEFAULT_NUM_REGIONS
) -> list[CurriculumRegion]:
    """Nested regions with fractions t/num_regions; the last admits everything."""
    if num_regions < 1:
        raise ConfigError("num_regions must be >= 1")
    regions = []
    for t in range(1, num_regions + 1):
        fraction = Fraction(t, num_regions)
        admitted = {
            cls: ranking.admitted_ids(cls, fraction) for cls in ranking.classes()
        }
        regions.append(CurriculumRegion(fraction=fraction, admitted=admitted))
    return regions


# -- schedules -------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    """One training stage.

    `relevance_threshold` gates web-source records only (target images carry
    no relevance score); `max_difficulty_rank` gates target-source records
    only (web images carry no intra-web difficulty order).
    """

    admitted_sources: frozenset[str]
    relevance_threshold: float | None = None
    max_difficulty_rank: Fraction | None = None

    def __post_init__(self):
        sources = frozenset(self.admitted_sources)
        if not sources or not sources <= set(SOURCES):
            raise ConfigError(f"stage sources must be a non-empty subset of {SOURCES}")
        object.__setattr__(self, "admitted_sources", sources)
        if self.relevance_threshold is not None and not math.isfinite(self.relevance_threshold):
            raise ConfigError("relevance_threshold must be finite")
        if self.max_difficulty_rank is not None:
            object.__setattr__(
                self, "max_difficulty_rank", _as_fraction(self.max_difficulty_rank)
            )


@dataclass(frozen=True)
class CurriculumSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise ConfigError("schedule must have at least one stage")
        # Nesting: difficulty fractions over target-admitting stages never shrink.
        previous: Fraction | None = None
        for stage in stages:
            if SOURCE_TARGET not in stage.admitted_sources:
                continue
            effective = stage.max_difficulty_rank or Fraction(1)
            if previous is not None and effective < previous:
                raise ConfigError(
                    "target stages must have nondecreasing difficulty fractions"
                )
            previous = effective
        object.__setattr__(self, "stages", stages)


def gate(record: ImageRecord, stage: Stage, ranking: DifficultyRanking | None = None) -> int:
    """0/1 admission of a record into a stage.

    1 iff the record's source is admitted, a web record clears the stage's
    relevance threshold (when present), and a target record falls inside the
    stage's per-class difficulty fraction for at least one positive class
    (when present). Raises when the stage tests a field the record lacks.
    """
    if record.source not in stage.admitted_sources:
        return 0

    if stage.relevance_threshold is not None and record.source == SOURCE_WEB:
        if record.relevance is None:
            raise DataError(f"record {record.id!r} has no relevance score for a gated stage")
        if record.relevance < stage.relevance_threshold:
            return 0

    if stage.max_difficulty_rank is not None and record.source == SOURCE_TARGET:
        if ranking is None:
            raise DataError("difficulty-gated stage needs a DifficultyRanking")
        positives = record.positive_classes()
        if not positives:
            return 0
        for cls in positives:
            position = ranking.position(cls, record.id)
            if position is None:
                raise DataError(
                    f"record {record.id!r} is not ranked for class {cls!r}"
                )
            if position < ranking.quota(cls, stage.max_difficulty_rank):
                return 1
        return 0

    return 1


def canonical_variant(variant: str) -> str:
    """Resolve a variant name case-insensitively to its canonical spelling."""
    canonical = {v.lower(): v for v in VARIANTS}.get(str(variant).lower())
    if canonical is None:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return canonical


def make_schedule(
    variant: str,
    relevance_threshold: float = 8.0,
    num_regions: int = DEFAULT_NUM_REGIONS,
) -> CurriculumSchedule:
    """Build the stage list for one of the six training variants."""
    if num_regions < 1:
        raise ConfigError("num_regions must be >= 1")
    if not math.isfinite(relevance_threshold):
        raise ConfigError("relevance_threshold must be finite")

    canonical = canonical_variant(variant)

    web = frozenset({SOURCE_WEB})
    target = frozenset({SOURCE_TARGET})
    both = frozenset(SOURCES)

    def target_ladder() -> list[Stage]:
        return [
            Stage(target, max_difficulty_rank=Fraction(t, num_regions))
            for t in range(1, num_regions + 1)
        ]

    if canonical == "WSDDN":
        stages = [Stage(target)]
    elif canonical == "CurrWSDDN":
        stages = target_ladder()
    elif canonical == "WebRel":
        stages = [Stage(both, relevance_threshold=relevance_threshold)]
    elif canonical == "WebETH":
        stages = [Stage(web), Stage(target)]
    elif canonical == "WebRelETH":
        stages = [Stage(web, relevance_threshold=relevance_threshold), Stage(target)]
    else:  # WebRelETC
        stages = [Stage(web, relevance_threshold=relevance_threshold)] + target_ladder()
    return CurriculumSchedule(stages=tuple(stages))


# -- schedule file ----------------------------------------------------------------


def save_schedule(schedule: CurriculumSchedule, stream: TextIO) -> None:
    for stage in schedule.stages:
        frac = stage.max_difficulty_rank
        obj = {
            "admitted_sources": sorted(stage.admitted_sources),
            "relevance_threshold": stage.relevance_threshold,
            "max_difficulty_rank": None if frac is None else [frac.numerator, frac.denominator],
        }
        stream.write(json.dumps(obj, ensure_ascii=False))
        stream.write("\n")


def load_schedule(stream: TextIO | Iterable[str]) -> CurriculumSchedule:
    stages: list[Stage] = []
    for line_no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            frac = obj.get("max_difficulty_rank")
            if isinstance(frac, (list, tuple)):
                frac = Fraction(int(frac[0]), int(frac[1]))
            stages.append(
                Stage(
                    admitted_sources=frozenset(obj["admitted_sources"]),
                    relevance_threshold=obj.get("relevance_threshold"),
                    max_difficulty_rank=frac,
                )
            )
        except json.JSONDecodeError as exc:
            raise ParseError(f"schedule line {line_no}: invalid JSON ({exc.msg})") from exc
        except (KeyError, TypeError, ValueError, ZeroDivisionError) as exc:
            raise ParseError(f"schedule line {line_no}: {exc}") from exc
    return CurriculumSchedule(stages=tuple(stages))
