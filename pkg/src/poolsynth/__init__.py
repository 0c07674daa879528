"""Dataset distillation by matching BN statistics of a pool of teacher models."""

__version__ = "0.1.0"

from .data import LabeledDataset, SyntheticDataset, init_synthetic, load_dataset, load_synthetic, save_synthetic
from .labeling_eval import EvalHP, EvalReport, cross_arch_evaluate, evaluate, random_baseline, relabel
from .models import ModelSnapshot, TrainHP, build_model, load_model, save_model
from .pool import PoolManifest, PruneSpec, generate_post_pool, generate_prior_pool
from .synthesis import SynthesisConfig, distill, statistic_matching_loss

__all__ = [
    "__version__", "LabeledDataset", "SyntheticDataset", "init_synthetic", "load_dataset", "load_synthetic",
    "save_synthetic", "EvalHP", "EvalReport", "cross_arch_evaluate", "evaluate", "random_baseline", "relabel",
    "ModelSnapshot", "TrainHP", "build_model", "load_model", "save_model", "PoolManifest", "PruneSpec",
    "generate_post_pool", "generate_prior_pool", "SynthesisConfig", "distill", "statistic_matching_loss",
]
