import io
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curricuweb.curriculum import (
    CurriculumSchedule,
    DifficultyRanking,
    GrayImage,
    Stage,
    build_regions,
    canonical_variant,
    gate,
    load_schedule,
    log_kernel,
    log_response,
    make_schedule,
    mean_edge_strength,
    rank_by_difficulty,
    save_schedule,
)
from curricuweb.data import ImageRecord
from curricuweb.errors import ConfigError, DataError


# -- independent oracles -------------------------------------------------------


def oracle_mark_edges(resp, zc_threshold):
    """Pixel-marking oracle: scan the response for strict sign changes."""
    h, w = resp.shape
    marked = set()
    for i in range(h):
        for j in range(w):
            for di, dj in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                ni, nj = i + di, j + dj
                if not (0 <= ni < h and 0 <= nj < w):
                    continue
                a, b = float(resp[i, j]), float(resp[ni, nj])
                if a * b < 0 and abs(a - b) > zc_threshold:
                    marked.add((i, j))
                    break
    return len(marked)


def oracle_edge_fraction(img, sigma, kernel_radius, zc_threshold):
    resp = log_response(img, sigma, kernel_radius)
    return oracle_mark_edges(resp, zc_threshold) / (img.width * img.height)


def oracle_convolve(pixels, kernel):
    """Valid-mode correlation with explicit python loops (kernel is symmetric)."""
    kh, kw = kernel.shape
    h, w = pixels.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            acc = 0.0
            for a in range(kh):
                for b in range(kw):
                    acc += pixels[i + a, j + b] * kernel[a, b]
            out[i, j] = acc
    return out


def step_image(size=64):
    pixels = np.zeros((size, size))
    pixels[:, size // 2:] = 1.0
    return GrayImage(pixels=pixels)


def checkerboard(size, cell=1):
    yy, xx = np.mgrid[0:size, 0:size]
    return GrayImage(pixels=(((xx // cell) + (yy // cell)) % 2).astype(float))


class TestGrayImage:
    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            GrayImage(pixels=np.array([[0.0, 1.5]]))

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            GrayImage(pixels=np.array([[0.0, np.nan]]))


class TestMeanEdgeStrength:
    def test_constant_image_is_exactly_zero(self):
        for value in (0.0, 0.37, 1.0):
            img = GrayImage(pixels=np.full((24, 30), value))
            assert mean_edge_strength(img) == 0.0

    def test_step_matches_pixel_marking_oracle_exactly(self):
        img = step_image()
        got = mean_edge_strength(img)
        assert got == oracle_edge_fraction(img, 2.0, 4, 0.01)
        assert got > 0.0

    def test_response_matches_loop_convolution(self):
        rng = np.random.default_rng(3)
        img = GrayImage(pixels=rng.uniform(0, 1, (12, 14)))
        kernel = log_kernel(1.5, 2)
        resp = log_response(img, 1.5, 2)
        assert resp.shape == (8, 10)
        assert np.allclose(resp, oracle_convolve(img.pixels, kernel), atol=1e-12)

    def test_checkerboard_busier_than_step(self):
        # 1-px cells need a kernel that fits an 8x8 image, so radius 2 here.
        cb = mean_edge_strength(checkerboard(8, cell=1), sigma=1.0, kernel_radius=2,
                                zc_threshold=0.01)
        step = mean_edge_strength(step_image())
        assert cb == oracle_edge_fraction(checkerboard(8, cell=1), 1.0, 2, 0.01)
        assert cb > step

    def test_checkerboard_beats_step_under_identical_defaults(self):
        cb = mean_edge_strength(checkerboard(64, cell=4))
        assert cb > mean_edge_strength(step_image())

    def test_too_small_image_raises(self):
        with pytest.raises(DataError):
            mean_edge_strength(GrayImage(pixels=np.zeros((8, 8))), kernel_radius=4)

    def test_value_in_unit_interval_on_random_images(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            img = GrayImage(pixels=rng.uniform(0, 1, (16, 16)))
            v = mean_edge_strength(img, sigma=1.0, kernel_radius=2)
            assert 0.0 <= v <= 1.0

    def test_border_pixels_never_contribute(self):
        # Response only exists on the interior, so the max possible count
        # is the interior size even for the busiest image.
        img = checkerboard(16, cell=1)
        v = mean_edge_strength(img, sigma=0.8, kernel_radius=1)
        assert v <= (14 * 14) / (16 * 16)


def rec(record_id, cls_labels, difficulty=None, source="target", **kwargs):
    return ImageRecord(
        id=record_id, source=source, labels=cls_labels,
        path=f"synthetic://{record_id}", difficulty=difficulty, **kwargs
    )


class TestRanking:
    def test_sorts_ascending(self):
        ranking = rank_by_difficulty([
            rec("a", {"cat": 1}, 0.3),
            rec("b", {"cat": 1}, 0.1),
            rec("c", {"cat": 1}, 0.2),
        ])
        assert [e[0] for e in ranking.per_class["cat"]] == ["b", "c", "a"]

    def test_tie_breaks_by_id(self):
        ranking = rank_by_difficulty([
            rec("z", {"cat": 1}, 0.2),
            rec("a", {"cat": 1}, 0.2),
        ])
        assert [e[0] for e in ranking.per_class["cat"]] == ["a", "z"]

    def test_multi_label_appears_in_both_classes(self):
        ranking = rank_by_difficulty([
            rec("both", {"cat": 1, "dog": 1}, 0.5),
            rec("c1", {"cat": 1}, 0.1),
            rec("d1", {"dog": 1}, 0.9),
        ])
        assert ranking.position("cat", "both") == 1
        assert ranking.position("dog", "both") == 0

    def test_missing_difficulty_names_record(self):
        with pytest.raises(DataError, match="nodiff"):
            rank_by_difficulty([rec("nodiff", {"cat": 1}, None)])

    def test_negative_labels_do_not_enter_ranking(self):
        ranking = rank_by_difficulty([rec("a", {"cat": 1, "dog": -1}, 0.1)])
        assert ranking.count("dog") == 0


class TestBuildRegions:
    def test_ten_images_five_regions(self):
        records = [rec(f"i{n:02d}", {"cat": 1}, n / 10) for n in range(10)]
        regions = build_regions(rank_by_difficulty(records), 5)
        sizes = [len(r.admitted["cat"]) for r in regions]
        assert sizes == [2, 4, 6, 8, 10]
        assert regions[-1].admitted["cat"] == frozenset(f"i{n:02d}" for n in range(10))

    def test_single_region_admits_everything(self):
        records = [rec(f"i{n}", {"cat": 1}, n / 10) for n in range(7)]
        regions = build_regions(rank_by_difficulty(records), 1)
        assert len(regions) == 1
        assert len(regions[0].admitted["cat"]) == 7

    def test_ceil_counts_match_brute_force(self):
        records = [rec(f"c{n}", {"cat": 1}, n / 10) for n in range(7)]
        records += [rec(f"d{n}", {"dog": 1}, n / 10) for n in range(3)]
        regions = build_regions(rank_by_difficulty(records), 5)
        assert [len(r.admitted["cat"]) for r in regions] == [2, 3, 5, 6, 7]
        assert [len(r.admitted["dog"]) for r in regions] == [1, 2, 2, 3, 3]
        # brute-force ceil oracle
        for t, region in enumerate(regions, start=1):
            for cls, n in (("cat", 7), ("dog", 3)):
                assert len(region.admitted[cls]) == math.ceil(t * n / 5)

    def test_regions_are_nested(self):
        rng = np.random.default_rng(5)
        records = [
            rec(f"r{n}", {"cat": 1, "dog": 1} if n % 3 == 0 else {"cat": 1},
                float(rng.uniform()))
            for n in range(20)
        ]
        regions = build_regions(rank_by_difficulty(records), 4)
        for earlier, later in zip(regions, regions[1:]):
            for cls in earlier.admitted:
                assert earlier.admitted[cls] <= later.admitted[cls]


class TestSchedules:
    def test_wsddn_single_ungated_target_stage(self):
        schedule = make_schedule("WSDDN")
        assert len(schedule.stages) == 1
        stage = schedule.stages[0]
        assert stage.admitted_sources == frozenset({"target"})
        assert stage.relevance_threshold is None
        assert stage.max_difficulty_rank is None

    def test_webreleth_two_stages_with_threshold_8(self):
        schedule = make_schedule("WebRelETH", relevance_threshold=8.0)
        assert len(schedule.stages) == 2
        assert schedule.stages[0].admitted_sources == frozenset({"web"})
        assert schedule.stages[0].relevance_threshold == 8.0
        assert schedule.stages[1].admitted_sources == frozenset({"target"})
        assert schedule.stages[1].relevance_threshold is None

    def test_webreletc_web_stage_plus_five_target_fractions(self):
        schedule = make_schedule("WebRelETC", 8.0, 5)
        assert len(schedule.stages) == 6
        assert schedule.stages[0].admitted_sources == frozenset({"web"})
        fracs = [s.max_difficulty_rank for s in schedule.stages[1:]]
        assert fracs == [Fraction(t, 5) for t in range(1, 6)]

    def test_currwsddn_ladder(self):
        schedule = make_schedule("currwsddn", num_regions=3)
        assert [s.max_difficulty_rank for s in schedule.stages] == [
            Fraction(1, 3), Fraction(2, 3), Fraction(1)
        ]

    def test_webrel_single_mixed_stage(self):
        schedule = make_schedule("WebRel", 4.5)
        assert len(schedule.stages) == 1
        assert schedule.stages[0].admitted_sources == frozenset({"web", "target"})
        assert schedule.stages[0].relevance_threshold == 4.5

    def test_webeth_has_no_relevance_gate(self):
        schedule = make_schedule("WebETH")
        assert schedule.stages[0].relevance_threshold is None

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            make_schedule("WebUltra")
        with pytest.raises(ConfigError):
            canonical_variant("nope")

    def test_non_nested_schedule_rejected(self):
        with pytest.raises(ConfigError):
            CurriculumSchedule(stages=(
                Stage(frozenset({"target"}), max_difficulty_rank=Fraction(2, 5)),
                Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1, 5)),
            ))

    def test_empty_schedule_rejected(self):
        with pytest.raises(ConfigError):
            CurriculumSchedule(stages=())

    def test_schedule_file_roundtrip(self):
        schedule = make_schedule("WebRelETC", 8.0, 5)
        buf = io.StringIO()
        save_schedule(schedule, buf)
        loaded = load_schedule(io.StringIO(buf.getvalue()))
        assert loaded == schedule


class TestGate:
    def setup_method(self):
        self.web_stage = Stage(frozenset({"web"}), relevance_threshold=8.0)
        self.target_stage = Stage(frozenset({"target"}))

    def test_web_above_threshold_admitted(self):
        assert gate(rec("w", {"cat": 1}, source="web", relevance=9.0), self.web_stage) == 1

    def test_web_below_threshold_rejected(self):
        assert gate(rec("w", {"cat": 1}, source="web", relevance=7.9), self.web_stage) == 0

    def test_wrong_source_rejected_without_testing_fields(self):
        # target record with no relevance score: source check must short-circuit
        assert gate(rec("t", {"cat": 1}), self.web_stage) == 0

    def test_missing_relevance_raises(self):
        with pytest.raises(DataError):
            gate(rec("w", {"cat": 1}, source="web"), self.web_stage)

    def test_difficulty_fraction_gate_matches_brute_force(self):
        records = [rec(f"i{n}", {"cat": 1}, n / 10) for n in range(5)]
        ranking = rank_by_difficulty(records)
        stage = Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1, 5))
        admitted = [r.id for r in records if gate(r, stage, ranking) == 1]
        # brute force: ceil(1/5 * 5) = 1 easiest
        expected = sorted(records, key=lambda r: (r.difficulty, r.id))[:1]
        assert admitted == [r.id for r in expected]

    def test_multi_label_admitted_via_any_positive_class(self):
        records = [
            rec("easy-dog", {"dog": 1}, 0.1),
            rec("both", {"cat": 1, "dog": 1}, 0.5),
            rec("easy-cat", {"cat": 1}, 0.05),
        ]
        ranking = rank_by_difficulty(records)
        stage = Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1, 2))
        # "both" ranks 2nd of 2 in cat (quota 1) but 2nd of 2 in dog (quota 1)...
        assert gate(records[1], stage, ranking) == 0
        big_stage = Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1))
        assert gate(records[1], big_stage, ranking) == 1

    def test_unranked_target_raises(self):
        ranking = rank_by_difficulty([rec("a", {"cat": 1}, 0.1)])
        stage = Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1))
        with pytest.raises(DataError, match="stranger"):
            gate(rec("stranger", {"cat": 1}, 0.2), stage, ranking)

    def test_gate_needs_ranking_for_difficulty_stage(self):
        stage = Stage(frozenset({"target"}), max_difficulty_rank=Fraction(1, 2))
        with pytest.raises(DataError):
            gate(rec("a", {"cat": 1}, 0.1), stage, None)

    def test_gate_is_pure_and_binary(self):
        record = rec("w", {"cat": 1}, source="web", relevance=10.0)
        values = {gate(record, self.web_stage) for _ in range(5)}
        assert values == {1}

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nesting_property_on_random_datasets(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 25))
        classes = ["cat", "dog", "bird"][: int(rng.integers(1, 4))]
        records = []
        for i in range(n):
            positives = [c for c in classes if rng.uniform() < 0.5] or [classes[0]]
            records.append(rec(f"r{i}", {c: 1 for c in positives}, float(rng.uniform())))
        ranking = rank_by_difficulty(records)
        schedule = make_schedule("CurrWSDDN", num_regions=4)
        previous: set[str] = set()
        for stage in schedule.stages:
            admitted = {r.id for r in records if gate(r, stage, ranking) == 1}
            assert previous <= admitted
            previous = admitted
        assert previous == {r.id for r in records}  # final coverage
