"""Command-line interface.

One binary with subcommands so every pipeline stage can run on its own:
build-queries, crawl, score-relevance, edge-score, make-schedule, train,
evaluate, run, gen-synthetic.

Exit codes: 0 success, 2 config error, 3 data error, 4 transport error.
The CURRICUWEB_THREADS environment variable caps worker parallelism for
per-image scoring (default 1); results never depend on the worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

from . import curriculum as curr
from . import pipeline as pipe
from .data import load_manifest, load_regions, read_feature_blob, save_manifest
from .errors import ConfigError, CurricuwebError, DataError
from .evaluation import evaluate_detections, load_detections, load_groundtruth, mean_ap
from .head import TrainConfig, save_weights, train
from .relevance import SelfTrainConfig
from .synth import gen_synthetic, write_synthetic
from .webquery import (
    StubSearchClient,
    VOC_CLASSES,
    dedup_and_manifest,
    default_attribute_table,
    expand_queries,
    expand_related,
    fetch,
)

THREADS_ENV = "CURRICUWEB_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def _classes_arg(raw: str | None) -> list[str]:
    if not raw:
        return list(VOC_CLASSES)
    classes = [c.strip() for c in raw.split(",") if c.strip()]
    if not classes:
        raise ConfigError("class list is empty")
    return classes


# -- subcommands -----------------------------------------------------------------


def _cmd_build_queries(args) -> int:
    queries = expand_queries(_classes_arg(args.classes), default_attribute_table())
    lines = [
        json.dumps(
            {"class": q.class_id, "kind": q.kind, "attribute": q.attribute, "text": q.text},
            ensure_ascii=False,
        )
        for q in queries
    ]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def _cmd_crawl(args) -> int:
    classes = _classes_arg(args.classes)
    client = StubSearchClient(args.fixtures)
    queries = expand_queries(classes, default_attribute_table())
    results = []
    for query in queries:
        results.extend(fetch(client, query, args.limit))
    if args.related_limit > 0 and results:
        results.extend(expand_related(client, list(results), args.related_limit))
    records = dedup_and_manifest(results, classes)
    with open(args.out, "w", encoding="utf-8") as fh:
        save_manifest(records, fh)
    print(f"crawled {len(records)} unique web records from {len(queries)} queries")
    return 0


def _cmd_score_relevance(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        records = load_manifest(fh)
    with open(args.features, "rb") as fh:
        blob = read_feature_blob(fh)
    from .data import image_feature_map

    features = image_feature_map(records, blob)
    settings = pipe.RelevanceSettings(
        mode=args.mode,
        threshold=args.threshold,
        k=args.k,
        pca_dim=args.pca_dim,
        self_train=SelfTrainConfig(
            seeds_per_label=args.seeds_per_label,
            seeds_per_attribute_query=args.seeds_per_attribute_query,
            confidence_add_threshold=args.confidence_threshold,
            max_iterations=args.iterations,
            learning_rate=args.learning_rate,
            epochs_per_iteration=args.epochs_per_iteration,
            seed=args.seed,
        ),
    )
    if args.mode == pipe.MODE_SEMANTIC:
        records = pipe.score_semantic_relevance(records, features, settings, args.seed)
    elif args.mode == pipe.MODE_KNN:
        records = pipe.score_knn_relevance(records, features, settings)
    else:
        raise ConfigError(f"score-relevance mode must be semantic or knn, got {args.mode!r}")
    with open(args.out, "w", encoding="utf-8") as fh:
        save_manifest(records, fh)
    return 0


def _cmd_edge_score(args) -> int:
    with open(args.images, "r", encoding="utf-8") as fh:
        records = load_manifest(fh)

    def score(record):
        img = curr.load_gray_image(record.path, longer_side=args.longer_side)
        return curr.mean_edge_strength(
            img,
            sigma=args.sigma,
            kernel_radius=args.radius,
            zc_threshold=args.zc_threshold,
        )

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(score, records))  # map keeps input order
    else:
        scores = [score(r) for r in records]
    records = [replace(r, difficulty=s) for r, s in zip(records, scores)]
    with open(args.out, "w", encoding="utf-8") as fh:
        save_manifest(records, fh)
    return 0


def _cmd_make_schedule(args) -> int:
    schedule = curr.make_schedule(args.variant, args.threshold, args.regions)
    with open(args.out, "w", encoding="utf-8") as fh:
        curr.save_schedule(schedule, fh)
    return 0


def _cmd_train(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        records = load_manifest(fh)
    with open(args.regions, "r", encoding="utf-8") as fh:
        region_sets = load_regions(fh)
    with open(args.features, "rb") as fh:
        blob = read_feature_blob(fh)
    with open(args.schedule, "r", encoding="utf-8") as fh:
        schedule = curr.load_schedule(fh)

    ranking = None
    if any(s.max_difficulty_rank is not None for s in schedule.stages):
        from .data import SOURCE_TARGET, SPLIT_TRAIN

        ranking = curr.rank_by_difficulty(
            [r for r in records if r.source == SOURCE_TARGET and r.split == SPLIT_TRAIN]
        )
    config = TrainConfig(
        learning_rate=args.learning_rate,
        epochs_per_stage=args.epochs,
        weight_decay=args.weight_decay,
        seed=args.seed,
        epsilon_clip=args.epsilon_clip,
    )
    weights = train(records, region_sets, blob, schedule, config, ranking=ranking)
    with open(args.out, "wb") as fh:
        save_weights(weights, fh)
    return 0


def _cmd_evaluate(args) -> int:
    with open(args.detections, "r", encoding="utf-8") as fh:
        detections = load_detections(fh)
    with open(args.groundtruth, "r", encoding="utf-8") as fh:
        groundtruth = load_groundtruth(fh)
    per_class = evaluate_detections(detections, groundtruth, args.iou)
    map_score = mean_ap(per_class)

    print(f"{'class':<20} {'AP':>10}")
    for cls in sorted(per_class):
        curve = per_class[cls]
        print(f"{cls:<20} {'undefined' if curve is None else f'{curve.ap:>10.4f}'}")
    print(f"{'mAP':<20} {map_score:>10.4f}")
    for cls in sorted(per_class):
        curve = per_class[cls]
        if curve is not None:
            print(f"AP {cls} {curve.ap!r}")
    print(f"mAP {map_score!r}")
    return 0


def _cmd_run(args) -> int:
    config = pipe.PipelineConfig(
        variant=args.variant,
        manifest_path=args.manifest,
        regions_path=args.regions,
        region_features_path=args.region_features,
        image_features_path=args.image_features,
        groundtruth_path=args.groundtruth,
        out_dir=args.out,
        seed=args.seed,
        train=TrainConfig(
            learning_rate=args.learning_rate,
            epochs_per_stage=args.epochs,
            weight_decay=args.weight_decay,
            epsilon_clip=args.epsilon_clip,
        ),
        relevance=pipe.RelevanceSettings(
            mode=args.relevance_mode,
            threshold=args.threshold,
            k=args.k,
            pca_dim=args.pca_dim,
            self_train=SelfTrainConfig(
                seeds_per_label=args.seeds_per_label,
                seeds_per_attribute_query=args.seeds_per_attribute_query,
                confidence_add_threshold=args.confidence_threshold,
                max_iterations=args.iterations,
                learning_rate=args.relevance_lr,
                epochs_per_iteration=args.relevance_epochs,
            ),
        ),
        curriculum=pipe.CurriculumSettings(
            sigma=args.sigma,
            kernel_radius=args.radius,
            zc_threshold=args.zc_threshold,
            num_regions=args.regions_count,
        ),
        nms_threshold=args.nms,
        eval_iou=args.iou,
    )
    report = pipe.run_pipeline(config)
    print(report.summary())
    return 0


def _cmd_gen_synthetic(args) -> int:
    dataset = gen_synthetic(
        classes=_classes_arg(args.classes) if args.classes else ("alpha", "beta"),
        images_per_class=args.images_per_class,
        regions_per_image=args.regions_per_image,
        dim=args.dim,
        easy_fraction=args.easy_fraction,
        noise=args.noise,
        seed=args.seed,
        web_per_class=args.web_per_class,
        test_per_class=args.test_per_class,
        web_outlier_fraction=args.web_outlier_fraction,
    )
    paths = write_synthetic(dataset, args.out)
    print(f"wrote {len(dataset.records)} records to {args.out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="curricuweb",
        description="Easy-to-hard weakly supervised detection pipeline at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-queries", help="expand classes into attribute queries")
    p.add_argument("--classes", help="comma-separated class list (default: the 20 VOC classes)")
    p.add_argument("--out", help="write queries to this file instead of stdout")
    p.set_defaults(func=_cmd_build_queries)

    p = sub.add_parser("crawl", help="run queries against the file-backed search stub")
    p.add_argument("--fixtures", required=True, help="fixture file or directory of *.jsonl")
    p.add_argument("--classes")
    p.add_argument("--limit", type=int, default=20, help="results per query")
    p.add_argument("--related-limit", type=int, default=20,
                   help="related images per seed result; 0 disables expansion")
    p.add_argument("--out", required=True, help="output manifest")
    p.set_defaults(func=_cmd_crawl)

    p = sub.add_parser("score-relevance", help="write relevance scores into a manifest")
    p.add_argument("--mode", choices=(pipe.MODE_SEMANTIC, pipe.MODE_KNN), required=True)
    p.add_argument("--features", required=True, help="image-level FVEC blob (manifest order)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=8.0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--seeds-per-label", type=int, default=80)
    p.add_argument("--seeds-per-attribute-query", type=int, default=20)
    p.add_argument("--confidence-threshold", type=float, default=8.0)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--learning-rate", type=float, default=0.1)
    p.add_argument("--epochs-per-iteration", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_score_relevance)

    p = sub.add_parser("edge-score", help="score image difficulty by mean edge strength")
    p.add_argument("--images", required=True, help="input manifest")
    p.add_argument("--out", required=True, help="output manifest with difficulty filled in")
    p.add_argument("--sigma", type=float, default=curr.DEFAULT_SIGMA)
    p.add_argument("--radius", type=int, default=curr.DEFAULT_KERNEL_RADIUS)
    p.add_argument("--zc-threshold", type=float, default=curr.DEFAULT_ZC_THRESHOLD)
    p.add_argument("--longer-side", type=int, default=600)
    p.set_defaults(func=_cmd_edge_score)

    p = sub.add_parser("make-schedule", help="write a variant's stage file")
    p.add_argument("--variant", required=True)
    p.add_argument("--threshold", type=float, default=8.0)
    p.add_argument("--regions", type=int, default=curr.DEFAULT_NUM_REGIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_schedule)

    p = sub.add_parser("train", help="train the detection head with a schedule file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--features", required=True, help="region-level FVEC blob")
    p.add_argument("--schedule", required=True)
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon-clip", type=float, default=1e-12)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="per-class AP and mAP of a detections file")
    p.add_argument("--detections", required=True)
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("run", help="run a full pipeline variant")
    p.add_argument("--variant", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regions", required=True)
    p.add_argument("--region-features", required=True)
    p.add_argument("--image-features")
    p.add_argument("--groundtruth", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--epsilon-clip", type=float, default=1e-12)
    p.add_argument("--relevance-mode", choices=pipe.RELEVANCE_MODES,
                   default=pipe.MODE_SEMANTIC)
    p.add_argument("--threshold", type=float, default=8.0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--pca-dim", type=int, default=64)
    p.add_argument("--seeds-per-label", type=int, default=80)
    p.add_argument("--seeds-per-attribute-query", type=int, default=20)
    p.add_argument("--confidence-threshold", type=float, default=8.0)
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--relevance-lr", type=float, default=0.1)
    p.add_argument("--relevance-epochs", type=int, default=10)
    p.add_argument("--sigma", type=float, default=curr.DEFAULT_SIGMA)
    p.add_argument("--radius", type=int, default=curr.DEFAULT_KERNEL_RADIUS)
    p.add_argument("--zc-threshold", type=float, default=curr.DEFAULT_ZC_THRESHOLD)
    p.add_argument("--regions-count", type=int, default=curr.DEFAULT_NUM_REGIONS,
                   help="number of nested difficulty regions")
    p.add_argument("--nms", type=float, default=0.4)
    p.add_argument("--iou", type=float, default=0.5)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic desk-scale dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", help="comma-separated class names (default alpha,beta)")
    p.add_argument("--images-per-class", type=int, default=10)
    p.add_argument("--regions-per-image", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--easy-fraction", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--web-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--web-outlier-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_gen_synthetic)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CurricuwebError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
