"""Resolution-based knowledge distillation on a small numpy autodiff engine."""

__version__ = "0.1.0"

from ._accel import backend
from .data import AugmentConfig, DatasetDir, ImageRecord, UnlabeledRecord, make_dataset
from .distill import DistillConfig, PhaseResult, TrainConfig, distill_student, fine_tune, run_ablation, train_teacher
from .evaluation import MetricsReport, bootstrap_ci, emit_report, evaluate_metrics
from .model import Model, ModelConfig, build_model, count_flops, load_checkpoint, save_checkpoint
from .resize import ResizeMode, bicubic_resize, lanczos_resize
from .tensor import Tensor, backward, no_grad

__all__ = [
    "AugmentConfig", "DatasetDir", "DistillConfig", "ImageRecord", "MetricsReport", "Model", "ModelConfig",
    "PhaseResult", "ResizeMode", "Tensor", "TrainConfig", "UnlabeledRecord", "backend", "backward",
    "bicubic_resize", "bootstrap_ci", "build_model", "count_flops", "distill_student", "emit_report",
    "evaluate_metrics", "fine_tune", "lanczos_resize", "load_checkpoint", "make_dataset", "no_grad",
    "run_ablation", "save_checkpoint", "train_teacher",
]
