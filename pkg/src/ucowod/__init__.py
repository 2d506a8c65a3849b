"""Open-world object detection with unknown-class discrimination.

The package covers the full loop on synthetic data: pseudo-label selection
for unlabeled objects, an unknown-aware classification loss, pairwise
similarity training with a self-supervised phase, cluster refinement of
unknown embeddings, and the open-world evaluation protocol (known-class mAP,
wilderness impact, open-set error counts, and unknown-class mAP/recall under
optimal id matching).
"""

from .core import (
    Box,
    ClassLabel,
    Detection,
    GroundTruthObject,
    LabelKind,
    Proposal,
    TaskConfig,
    from_corners,
    iou,
    label_for_class_id,
    to_corners,
    validate_task_sequence,
)
from .harness import (
    RefineOutcome,
    RunConfig,
    SyntheticDataset,
    SyntheticScene,
    ToyHead,
    TrainResult,
    build_training_rows,
    class_prototypes,
    detect,
    detect_with_embeddings,
    generate_dataset,
    refine_pipeline,
    train,
)
from .losses import (
    LossWeights,
    PairLabelMatrix,
    PairSelectionSchedule,
    SimilarityState,
    classification_loss,
    combined_label_matrix,
    cosine_similarity_grad,
    l1_regression_loss,
    self_label_matrix,
    self_similarity_loss,
    similarity_loss,
    similarity_matrix,
    supervised_label_matrix,
    total_training_loss,
    update_lambda,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    MatchResult,
    absolute_open_set_error,
    average_precision,
    evaluate,
    hungarian_assign,
    match_known_detections,
    nms,
    uc_map,
    uc_recall,
    wilderness_impact,
)
from .pseudo_label import UlpConfig, select_pseudo_labels
from .refinement import (
    ClusterState,
    RefineResult,
    kl_divergence,
    kl_loss,
    kmeans_init,
    refine,
    select_cluster_count,
    silhouette_score,
    soft_assignment,
    target_distribution,
)

__version__ = "0.1.0"
