import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curricuweb.curriculum import CurriculumSchedule, Stage, make_schedule
from curricuweb.data import FeatureBlob, ImageRecord, RegionSet
from curricuweb.errors import ConfigError, DataError, FormatError, ScheduleError, ShapeError
from curricuweb.head import (
    Gradients,
    ModelWeights,
    TrainConfig,
    backward,
    forward,
    label_vector,
    load_weights,
    loss,
    save_weights,
    train,
    train_detector,
)


def random_weights(rng, dim, num_classes, scale=0.5):
    return ModelWeights(
        rng.uniform(-scale, scale, (dim, num_classes)),
        rng.uniform(-scale, scale, num_classes),
        rng.uniform(-scale, scale, (dim, num_classes)),
        rng.uniform(-scale, scale, num_classes),
    )


def finite_difference_gradients(feats, weights, y, h=1e-5):
    """Central-difference oracle over every parameter entry."""
    names = ("cls_weight", "cls_bias", "det_weight", "det_bias")

    def loss_at(name, idx, delta):
        blocks = {n: getattr(weights, n).copy() for n in names}
        blocks[name][idx] += delta
        shifted = ModelWeights(**blocks)
        return loss(forward(feats, shifted).image_score, y)

    out = {}
    for name in names:
        block = getattr(weights, name)
        grad = np.zeros_like(block)
        it = np.nditer(block, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            grad[idx] = (loss_at(name, idx, h) - loss_at(name, idx, -h)) / (2 * h)
        out[name] = grad
    return Gradients(**out)


def max_rel_error(a, b):
    scale = np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, 1e-6)])
    return float((np.abs(a - b) / scale).max())


class TestForward:
    def test_single_region_det_softmax_is_one(self):
        rng = np.random.default_rng(0)
        out = forward(rng.standard_normal((1, 3)), random_weights(rng, 3, 4))
        assert np.allclose(out.det_softmax, 1.0)
        assert np.allclose(out.image_score, out.cls_softmax[0])
        assert abs(out.image_score.sum() - 1.0) < 1e-9

    def test_zero_weights_uniform_scores(self):
        rng = np.random.default_rng(1)
        zero = ModelWeights(np.zeros((3, 5)), np.zeros(5), np.zeros((3, 5)), np.zeros(5))
        out = forward(rng.standard_normal((4, 3)), zero)
        assert np.allclose(out.image_score, 0.2, atol=1e-9)

    def test_fixed_instance_matches_straight_line_recomputation(self):
        # independent step-by-step oracle with explicit loops, no shared code
        rng = np.random.default_rng(20)
        feats = rng.standard_normal((3, 2))
        w = random_weights(rng, 2, 2)
        out = forward(feats, w)

        cls_scores = [[sum(feats[r][d] * w.cls_weight[d][c] for d in range(2)) + w.cls_bias[c]
                       for c in range(2)] for r in range(3)]
        det_scores = [[sum(feats[r][d] * w.det_weight[d][c] for d in range(2)) + w.det_bias[c]
                       for c in range(2)] for r in range(3)]
        expected = []
        for c in range(2):
            total = 0.0
            for r in range(3):
                row_exp = [math.exp(v) for v in cls_scores[r]]
                cls_sm = row_exp[c] / sum(row_exp)
                col_exp = [math.exp(det_scores[rr][c]) for rr in range(3)]
                det_sm = col_exp[r] / sum(col_exp)
                total += cls_sm * det_sm
            expected.append(total)
        assert np.allclose(out.image_score, expected, atol=1e-10)

    def test_dimension_mismatch_raises(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            forward(rng.standard_normal((2, 4)), random_weights(rng, 3, 2))

    def test_zero_regions_raises(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ShapeError):
            forward(np.zeros((0, 3)), random_weights(rng, 3, 2))

    def test_non_finite_features_raise(self):
        rng = np.random.default_rng(4)
        feats = np.array([[1.0, np.nan, 0.0]])
        with pytest.raises(DataError):
            forward(feats, random_weights(rng, 3, 2))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_normalization_properties(self, seed):
        rng = np.random.default_rng(seed)
        R = int(rng.integers(1, 7))
        C = int(rng.integers(1, 6))
        D = int(rng.integers(1, 6))
        out = forward(rng.standard_normal((R, D)) * 3, random_weights(rng, D, C, scale=2.0))
        assert np.allclose(out.cls_softmax.sum(axis=1), 1.0, atol=1e-6)
        assert np.allclose(out.det_softmax.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(out.image_score >= 0.0) and np.all(out.image_score <= 1.0)
        assert np.allclose(out.image_score, np.clip(out.per_region.sum(axis=0), 0, 1))


class TestLoss:
    def test_saturated_positive_is_zero(self):
        assert loss(np.array([1.0]), np.array([1.0])) == 0.0

    def test_saturated_negative_is_zero(self):
        assert loss(np.array([0.0]), np.array([-1.0])) == 0.0

    def test_symmetry_point(self):
        for y in (1.0, -1.0):
            assert abs(loss(np.array([0.5]), np.array([y])) - 0.693147) < 1e-6

    def test_out_of_range_score_raises(self):
        with pytest.raises(DataError):
            loss(np.array([1.5]), np.array([1.0]))

    def test_labels_as_mapping_with_absent_class_negative(self):
        # absent class index means -1, so a low score is a good score there
        value = loss(np.array([0.9, 0.1]), {0: 1})
        expected = -math.log(0.9) - math.log(0.9)
        assert abs(value - expected) < 1e-12

    def test_clip_keeps_loss_finite(self):
        value = loss(np.array([0.0]), np.array([1.0]), epsilon_clip=1e-12)
        assert value == pytest.approx(-math.log(1e-12))

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            phi = rng.uniform(0, 1, 4)
            y = rng.choice([-1.0, 1.0], 4)
            assert loss(phi, y) >= 0.0


class TestBackward:
    def test_matches_finite_differences_on_random_instances(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            R = int(rng.integers(1, 5))
            C = int(rng.integers(1, 4))
            D = int(rng.integers(1, 4))
            feats = rng.standard_normal((R, D))
            w = random_weights(rng, D, C)
            y = rng.choice([-1.0, 1.0], C)
            analytic = backward(feats, w, y)
            fd = finite_difference_gradients(feats, w, y)
            for name in ("cls_weight", "cls_bias", "det_weight", "det_bias"):
                assert max_rel_error(getattr(analytic, name), getattr(fd, name)) < 1e-4

    def test_single_region_matches_closed_form(self):
        # With one region the detection stream is constant, so the gradient
        # reduces to the class-softmax chain rule; recompute it by hand.
        rng = np.random.default_rng(7)
        D, C = 3, 4
        x = rng.standard_normal(D)
        w = random_weights(rng, D, C)
        y = rng.choice([-1.0, 1.0], C)
        analytic = backward(x.reshape(1, -1), w, y)

        z = x @ w.cls_weight + w.cls_bias
        e = np.exp(z - z.max())
        s = e / e.sum()
        g = -y / (y * (s - 0.5) + 0.5)          # d loss / d phi, phi = s here
        dz = s * (g - float((g * s).sum()))      # softmax Jacobian by hand
        assert np.allclose(analytic.cls_weight, np.outer(x, dz), atol=1e-12)
        assert np.allclose(analytic.cls_bias, dz, atol=1e-12)
        assert np.allclose(analytic.det_weight, 0.0, atol=1e-12)
        assert np.allclose(analytic.det_bias, 0.0, atol=1e-12)

    def test_identical_regions_symmetric_contributions(self):
        # Identical rows at zero weights: the detection stream gets exactly
        # zero gradient, and the class-stream gradient is independent of how
        # many copies of the row are stacked.
        rng = np.random.default_rng(8)
        D, C = 3, 4
        x = rng.standard_normal(D)
        zero = ModelWeights(np.zeros((D, C)), np.zeros(C), np.zeros((D, C)), np.zeros(C))
        y = rng.choice([-1.0, 1.0], C)
        grads = {R: backward(np.tile(x, (R, 1)), zero, y) for R in (1, 2, 5)}
        for R in (2, 5):
            assert np.allclose(grads[R].det_weight, 0.0, atol=1e-15)
            assert np.allclose(grads[R].det_bias, 0.0, atol=1e-15)
            assert np.allclose(grads[R].cls_weight, grads[1].cls_weight, atol=1e-12)
            assert np.allclose(grads[R].cls_bias, grads[1].cls_bias, atol=1e-12)


def toy_dataset(num_images=1, num_classes=2, dim=3, regions=2, seed=0, source="target"):
    rng = np.random.default_rng(seed)
    records, region_sets, rows = [], {}, []
    classes = [f"c{i}" for i in range(num_classes)]
    for i in range(num_images):
        image_id = f"img{i}"
        cls = classes[i % num_classes]
        records.append(
            ImageRecord(
                id=image_id, source=source, labels={cls: 1},
                path=f"synthetic://{image_id}",
            )
        )
        start = len(rows)
        rows.extend(rng.standard_normal(dim) for _ in range(regions))
        region_sets[image_id] = RegionSet(
            image_id=image_id,
            boxes=tuple((20.0 * j, 0.0, 20.0 * j + 16.0, 16.0) for j in range(regions)),
            feature_rows=tuple(range(start, start + regions)),
        )
    blob = FeatureBlob(data=np.stack(rows))
    return records, region_sets, blob, classes


class TestTrain:
    def test_empty_stage_raises_with_stage_number(self):
        records, region_sets, blob, classes = toy_dataset(num_images=2, source="target")
        schedule = make_schedule("WebETH")  # stage 1 wants web records; none exist
        with pytest.raises(ScheduleError, match="stage 1 empty"):
            train(records, region_sets, blob, schedule, TrainConfig(), classes=classes)

    def test_single_image_loss_decreases(self):
        records, region_sets, blob, classes = toy_dataset(num_images=1, num_classes=2)
        config = TrainConfig(learning_rate=1e-2, epochs_per_stage=50, weight_decay=0.0, seed=3)
        result = train_detector(
            records, region_sets, blob, make_schedule("WSDDN"), config, classes=classes
        )
        trace = result.loss_trace[0]
        assert len(trace) == 50
        for earlier, later in zip(trace, trace[1:]):
            assert later <= earlier + 1e-9

    def test_gated_out_record_changes_nothing(self):
        records, region_sets, blob, classes = toy_dataset(num_images=4, source="target")
        # web record failing the relevance gate of a WebRel stage
        gated_out = ImageRecord(
            id="noise", source="web", labels={classes[0]: 1},
            path="synthetic://noise", relevance=2.0,
        )
        rng = np.random.default_rng(9)
        noise_rows = FeatureBlob(
            data=np.vstack([blob.data, rng.standard_normal((2, blob.dim)).astype(np.float32)])
        )
        sets_with_noise = dict(region_sets)
        sets_with_noise["noise"] = RegionSet(
            image_id="noise",
            boxes=((0.0, 0.0, 16.0, 16.0), (20.0, 0.0, 36.0, 16.0)),
            feature_rows=(blob.count, blob.count + 1),
        )
        schedule = make_schedule("WebRel", relevance_threshold=8.0)
        config = TrainConfig(epochs_per_stage=5, seed=11)
        with_noise = train(
            records + [gated_out], sets_with_noise, noise_rows, schedule, config,
            classes=classes,
        )
        without = train(records, region_sets, blob, schedule, config, classes=classes)
        for name in ("cls_weight", "cls_bias", "det_weight", "det_bias"):
            assert np.array_equal(getattr(with_noise, name), getattr(without, name))

    def test_same_seed_bit_identical(self):
        records, region_sets, blob, classes = toy_dataset(num_images=6, num_classes=3)
        config = TrainConfig(epochs_per_stage=4, seed=21)
        a = train(records, region_sets, blob, make_schedule("WSDDN"), config, classes=classes)
        b = train(records, region_sets, blob, make_schedule("WSDDN"), config, classes=classes)
        for name in ("cls_weight", "cls_bias", "det_weight", "det_bias"):
            assert np.array_equal(getattr(a, name), getattr(b, name))

    def test_different_seed_differs(self):
        records, region_sets, blob, classes = toy_dataset(num_images=4)
        a = train(records, region_sets, blob, make_schedule("WSDDN"),
                  TrainConfig(seed=1, epochs_per_stage=2), classes=classes)
        b = train(records, region_sets, blob, make_schedule("WSDDN"),
                  TrainConfig(seed=2, epochs_per_stage=2), classes=classes)
        assert not np.array_equal(a.cls_weight, b.cls_weight)

    def test_admitted_record_without_regions_raises(self):
        records, region_sets, blob, classes = toy_dataset(num_images=2)
        del region_sets["img1"]
        with pytest.raises(DataError, match="img1"):
            train(records, region_sets, blob, make_schedule("WSDDN"),
                  TrainConfig(epochs_per_stage=1), classes=classes)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epochs_per_stage=0)
        with pytest.raises(ConfigError):
            TrainConfig(weight_decay=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(epsilon_clip=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(epsilon_clip=1.0)


class TestWeightsIO:
    def test_roundtrip(self):
        rng = np.random.default_rng(13)
        w = random_weights(rng, 5, 3)
        buf = io.BytesIO()
        save_weights(w, buf)
        buf.seek(0)
        back = load_weights(buf)
        assert back.dim == 5 and back.num_classes == 3
        for name in ("cls_weight", "cls_bias", "det_weight", "det_bias"):
            assert np.allclose(getattr(back, name), getattr(w, name), atol=1e-6)

    def test_serialization_is_deterministic(self):
        rng = np.random.default_rng(14)
        w = random_weights(rng, 4, 2)
        bufs = []
        for _ in range(2):
            buf = io.BytesIO()
            save_weights(w, buf)
            bufs.append(buf.getvalue())
        assert bufs[0] == bufs[1]

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            load_weights(io.BytesIO(b"NOPE" + b"\x00" * 8))

    def test_truncated(self):
        rng = np.random.default_rng(15)
        buf = io.BytesIO()
        save_weights(random_weights(rng, 3, 2), buf)
        with pytest.raises(FormatError):
            load_weights(io.BytesIO(buf.getvalue()[:-2]))


class TestLabelVector:
    def test_absent_class_is_negative(self):
        y = label_vector({"cat": 1}, ["cat", "dog"])
        assert np.array_equal(y, [1.0, -1.0])
