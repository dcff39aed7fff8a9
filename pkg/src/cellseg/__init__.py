"""Instance-mask toolkit for microscopy cell segmentation."""

from .masks import (
    FLIP_DIAGONAL,
    FLIP_HORIZONTAL,
    FLIP_VERTICAL,
    Rle,
    flip,
    iou,
    majority_vote,
    rle_decode,
    rle_encode,
    set_ops,
)
from .instances import (
    CLASS_CYTOPLASM,
    CLASS_NUCLEUS,
    CLASS_WHOLE_CELL,
    Instance,
    PredictionSet,
)
from .evaluation import (
    MODE_CLASS_AWARE,
    MODE_WHOLE_CELL,
    EvalReport,
    best_match,
    evaluate_dataset,
    worst_k,
)
from .ensemble import (
    EnsembleConfig,
    EnsembleOutput,
    ensemble_datasets,
    ensemble_predictions,
    match_for_reference,
    refine_instance,
)
from .cells import Cell, compose_cell, merge_classes, pair_nucleus, semantic_union

__version__ = "0.1.0"

__all__ = [
    "Rle", "flip", "iou", "majority_vote", "rle_decode", "rle_encode", "set_ops",
    "FLIP_HORIZONTAL", "FLIP_VERTICAL", "FLIP_DIAGONAL",
    "Instance", "PredictionSet",
    "CLASS_NUCLEUS", "CLASS_CYTOPLASM", "CLASS_WHOLE_CELL",
    "EvalReport", "best_match", "evaluate_dataset", "worst_k",
    "MODE_WHOLE_CELL", "MODE_CLASS_AWARE",
    "EnsembleConfig", "EnsembleOutput", "ensemble_predictions",
    "ensemble_datasets", "match_for_reference", "refine_instance",
    "Cell", "compose_cell", "merge_classes", "pair_nucleus", "semantic_union",
    "__version__",
]
