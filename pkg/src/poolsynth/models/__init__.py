from .arch import ARCHITECTURES, ArchSpec, StatBatchNorm2d
from .snapshot import (
    FORMAT_VERSION,
    FeatureStatistics,
    ModelSnapshot,
    accuracy,
    build_model,
    forward_with_stats,
    load_model,
    predict_logits,
    read_manifest,
    refresh_running_stats,
    save_model,
    snapshot_from_module,
    snapshots_equal,
)
from .train import Trainer, TrainHP, lr_factor, train_epochs, train_steps

__all__ = [
    "ARCHITECTURES", "ArchSpec", "StatBatchNorm2d", "FORMAT_VERSION", "FeatureStatistics", "ModelSnapshot",
    "accuracy", "build_model", "forward_with_stats", "load_model", "predict_logits", "read_manifest",
    "refresh_running_stats", "save_model", "snapshot_from_module", "snapshots_equal", "Trainer", "TrainHP",
    "lr_factor", "train_epochs", "train_steps",
]
