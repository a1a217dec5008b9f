"""Zero-shot-learning benchmark toolkit.

Five compatibility-based classifiers (DeViSE, ALE, SJE, ESZSL, SAE), six
fusion schemes (MV, MDT, DNN, GT, Con, Auc), the four standard accuracy
measures, difficulty/ceiling/combined-points analyses, and a reproducible
experiment harness with a CLI.
"""

from .analysis import (
    AttributeScores,
    IncompleteTableError,
    PointsTable,
    attribute_scores,
    combined_points,
    correctness_from_predictions,
    difficulty_levels,
)
from .classifiers import (
    CompatibilityModel,
    SingularSystemError,
    SpectralConflictError,
    TrainConfig,
    TrainingDivergedError,
    load_model,
    predict,
    ranking_loss_and_gradient,
    save_model,
    score,
    score_rows,
    solve_sylvester,
    train,
    train_eszsl,
    train_ranking,
    train_sae,
)
from .data import (
    AttributeTable,
    Dataset,
    DegenerateMetaSplitError,
    InvalidDatasetError,
    PrototypeTable,
    SplitSpec,
    Violation,
    carve_meta_split,
    load_bundle,
    save_bundle,
    synthesize,
    validate,
)
from .fusion import (
    BasePredictionSet,
    FusionModel,
    NoConsensusError,
    build_prediction_set,
    ceiling,
    fuse_auction,
    fuse_consensus,
    fuse_dnn,
    fuse_game,
    fuse_majority,
    fuse_mdt,
    load_fusion_model,
    save_fusion_model,
    train_dnn,
    train_game,
    train_mdt,
)
from .harness import ExperimentConfig, RunRecord, emit_report, run_experiment
from .metrics import (
    MetricReport,
    ScoreMatrix,
    evaluate,
    f1_macro,
    log_loss,
    softmax_probabilities,
    top_k_accuracy,
)

__version__ = "0.1.0"
