"""Student-teacher feature pyramid matching for unsupervised anomaly detection."""
from .backbone import (ARCHITECTURES, NetworkHandle, PyramidConfig, WeightsArchive,
                       extract_pyramid, init_student, load_teacher, random_archive)
from .datasets import (CategorySet, SynthSpec, generate_synthetic, load_category,
                       pretrain_toy_teacher, write_category)
from .distill import (LossBreakdown, batch_loss, level_loss, normalize_positions,
                      position_loss, total_loss)
from .metrics import (EvalReport, connected_components, evaluate_category,
                      pixel_roc_auc, pro_score, roc_auc)
from .scorer import AnomalyMap, fuse, level_map, score_image, upsample
from .trainer import Checkpoint, TrainConfig, dump_features, split_dataset, train, validate

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES", "NetworkHandle", "PyramidConfig", "WeightsArchive",
    "extract_pyramid", "init_student", "load_teacher", "random_archive", "CategorySet",
    "SynthSpec", "generate_synthetic", "load_category", "pretrain_toy_teacher",
    "write_category", "LossBreakdown", "batch_loss", "level_loss",
    "normalize_positions", "position_loss", "total_loss", "EvalReport",
    "connected_components", "evaluate_category", "pixel_roc_auc", "pro_score",
    "roc_auc", "AnomalyMap", "fuse", "level_map", "score_image", "upsample",
    "Checkpoint", "TrainConfig", "dump_features", "split_dataset", "train", "validate",
]

