"""Request and response bodies for the pipeline service.

Every request model forbids unknown fields so that typos surface as
usage errors instead of being silently ignored.  Paths in requests may
be absolute or relative; relative paths resolve against the service
work directory.
"""

from typing import Any, Optional

from pydantic import BaseModel, ConfigDict


class _Request(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthRequest(_Request):
    per_class: int = 280
    seed: int = 0
    split_ratio: float = 0.8
    name: str = "synth"


class IngestRequest(_Request):
    data_dir: str
    split_ratio: float = 0.8
    seed: int = 0
    windows_per_class: int = 280
    label_map: Optional[str] = None
    name: str = "cwru"


class DatasetResponse(BaseModel):
    manifest: str
    features: str
    hash: str
    source: str
    num_windows: int
    class_counts: dict[str, dict[str, int]]
    files: list[str]


class TrainTeacherRequest(_Request):
    manifest: str = "cache/synth.json"
    config: dict[str, Any] = {}
    tag: str = "teacher"


class DistillRequest(_Request):
    teacher: str = "checkpoints/teacher.ckpt"
    manifest: str = "cache/synth.json"
    config: dict[str, Any] = {}
    tag: str = "student"


class FinetuneRequest(_Request):
    student: str = "checkpoints/student.ckpt"
    manifest: str = "cache/synth.json"
    config: dict[str, Any] = {}
    tag: str = "dkdl-net"


class TrainResponse(BaseModel):
    checkpoint: str
    runlog: str
    procedure: str
    model_name: str
    best_epoch: int
    epochs_run: int
    best_metrics: dict[str, Optional[float]]
    files: list[str]


class MergeRequest(_Request):
    checkpoint: str = "checkpoints/dkdl-net.ckpt"
    output: Optional[str] = None


class MergeResponse(BaseModel):
    output: str
    model_name: str
    files: list[str]


class EvalRequest(_Request):
    checkpoint: str
    manifest: str = "cache/synth.json"
    split: str = "test"
    batch_size: int = 256
    svg: bool = False
    stem: Optional[str] = None


class EvalResponse(BaseModel):
    report: dict[str, Any]
    files: list[str]


class BenchRequest(_Request):
    checkpoints: list[str]
    num_samples: int = 2500
    warmup: int = 100
    seed: int = 0
    name: str = "latency"


class BenchResponse(BaseModel):
    reports: list[dict[str, Any]]
    files: list[str]


class DescribeRequest(_Request):
    target: str
    rank: int = 12
    pooling: str = "max"


class DescribeResponse(BaseModel):
    model_name: str
    text: str
    total_parameters: int
    trainable_parameters: int
    merged: bool


class HealthResponse(BaseModel):
    status: str
    version: str
    work_dir: str
