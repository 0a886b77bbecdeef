"""curricuweb: easy-to-hard weakly supervised detection at desk scale.

Library modules:

* ``data``       — dataset types, manifest/FVEC/regions formats
* ``webquery``   — attribute query expansion and the search-client stub
* ``relevance``  — semantic (self-trained) and distribution (kNN) relevance
* ``curriculum`` — edge-strength difficulty, nested regions, stage schedules
* ``head``       — two-stream detection head and the curriculum-gated trainer
* ``evaluation`` — IoU, NMS, 11-point AP, mAP
* ``synth``      — synthetic dataset generator
* ``pipeline``   — end-to-end orchestration
* ``cli``        — the ``curricuweb`` command
"""

from .data import (
    FeatureBlob,
    GroundTruthBox,
    ImageRecord,
    RegionSet,
    l2_normalize,
    load_manifest,
    load_regions,
    read_feature_blob,
    save_manifest,
    save_regions,
    write_feature_blob,
)
from .curriculum import (
    CurriculumSchedule,
    DifficultyRanking,
    GrayImage,
    Stage,
    build_regions,
    gate,
    make_schedule,
    mean_edge_strength,
    rank_by_difficulty,
)
from .errors import (
    ConfigError,
    CurricuwebError,
    DataError,
    EvaluationError,
    FormatError,
    IntegrityError,
    ParseError,
    ScheduleError,
    ShapeError,
    TransportError,
)
from .evaluation import Detection, PrCurve, average_precision, iou, mean_ap, nms
from .head import (
    DetectionOutput,
    ModelWeights,
    TrainConfig,
    TrainResult,
    backward,
    forward,
    loss,
    train,
    train_detector,
)
from .pipeline import PipelineConfig, RunReport, run_pipeline
from .relevance import (
    PcaModel,
    RelevanceClassifier,
    SelfTrainConfig,
    fit_pca,
    knn_relevance,
    select_seeds,
    self_train,
)
from .synth import SyntheticDataset, gen_synthetic, write_synthetic
from .webquery import (
    AttributeSet,
    Query,
    SearchResult,
    StubSearchClient,
    VOC_CLASSES,
    dedup_and_manifest,
    default_attribute_table,
    expand_queries,
    expand_related,
    fetch,
)

__version__ = "0.1.0"
