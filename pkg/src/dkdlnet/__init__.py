"""Bearing fault diagnosis toolkit: CNN teacher, distilled student, LoRA recovery."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    build_manifest,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .distill import DkdConfig, combined_loss, cross_entropy, dkd_loss, kd_loss
from .errors import DataError, DivergenceError
from .evaluate import EvalReport, LatencyReport, bench_latency, evaluate, write_report
from .models import (
    Model,
    build_dkdl_net,
    build_dkdl_spec,
    build_student,
    build_teacher,
    count_parameters,
    describe_text,
    spec_for,
)
from .train import (
    TrainConfig,
    TrainResult,
    distill_student,
    finetune_lora,
    train_student,
    train_teacher,
)

__all__ = [
    "__version__",
    "DatasetManifest",
    "DataError",
    "DivergenceError",
    "DkdConfig",
    "EvalReport",
    "LatencyReport",
    "Model",
    "TrainConfig",
    "TrainResult",
    "bench_latency",
    "build_dkdl_net",
    "build_dkdl_spec",
    "build_manifest",
    "build_student",
    "build_teacher",
    "combined_loss",
    "count_parameters",
    "cross_entropy",
    "describe_text",
    "dkd_loss",
    "distill_student",
    "evaluate",
    "finetune_lora",
    "kd_loss",
    "load_checkpoint",
    "load_dataset",
    "read_checkpoint",
    "save_checkpoint",
    "save_dataset",
    "spec_for",
    "synth_dataset",
    "train_student",
    "train_teacher",
    "write_report",
]
