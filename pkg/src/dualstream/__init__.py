"""Dual-stream facial beauty regression, built on a small autograd core.

Two streams feed one regression head: a frozen multi-scale prior encoder
(surrogate by default, real features via FPYR import) and a trainable
bidirectional selective-scan sequence stream; a cross-attention module
fuses them. Training follows the published protocol: robust regression
loss, decoupled-decay Adam, cosine schedule, best-correlation
checkpointing.
"""

from .data import ManifestRecord, PreprocessConfig, generate_synthetic_dataset, load_manifest
from .fusion import Model, ModelConfig
from .metrics import EvalResult, evaluate_scores, mae, pearson, rmse
from .optim import AdamW, CosineSchedule, cosine_lr, smooth_l1
from .prior import FeaturePyramid, PriorEncoderConfig, export_features, import_features
from .ssm import VimConfig
from .tensor import Tensor, backward, no_grad
from .train import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    restore_model,
    run_ablation,
    run_training,
    save_checkpoint,
)

__all__ = [
    "AdamW",
    "Checkpoint",
    "CosineSchedule",
    "EvalResult",
    "FeaturePyramid",
    "ManifestRecord",
    "Model",
    "ModelConfig",
    "PreprocessConfig",
    "PriorEncoderConfig",
    "Tensor",
    "TrainConfig",
    "VimConfig",
    "backward",
    "cosine_lr",
    "evaluate_scores",
    "export_features",
    "generate_synthetic_dataset",
    "import_features",
    "load_checkpoint",
    "load_manifest",
    "mae",
    "no_grad",
    "pearson",
    "restore_model",
    "rmse",
    "run_ablation",
    "run_training",
    "save_checkpoint",
    "smooth_l1",
]
__version__ = "0.1.0"
