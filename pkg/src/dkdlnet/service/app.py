"""FastAPI app wiring the pipeline into HTTP routes.

One app instance owns one work directory with a fixed layout
(``checkpoints/``, ``reports/``, ``logs/``, ``cache/``) plus a
``produced.json`` manifest recording the files written by the most
recent invocation of each command.  Mutating routes serialize on a
process-wide lock; training is CPU-bound and stateful on disk, so
overlapping runs would interleave artifacts.

Errors map onto a small vocabulary the CLI translates into exit codes:
``usage`` (bad arguments), ``data`` (missing or malformed inputs) and
``divergence`` (training produced a non-finite loss).
"""

import json
import math
import os
import threading
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from .. import __version__, data, models, train
from ..checkpoint import load_checkpoint, save_checkpoint
from ..evaluate import bench_latency, evaluate, write_latency_reports, write_report
from ..errors import DataError, DivergenceError
from ..train import TrainConfig
from . import schemas

WORK_SUBDIRS = ("checkpoints", "reports", "logs", "cache")
PRODUCED_FILE = "produced.json"


def default_work_dir() -> Path:
    return Path(os.environ.get("DKDL_WORK_DIR", "dkdl-work"))


def _resolve(work: Path, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else work / p


def _rel(work: Path, path: Path) -> str:
    p = Path(path)
    return str(p.relative_to(work)) if p.is_relative_to(work) else str(p)


def _record_produced(work: Path, command: str, files: list) -> None:
    # Overwritten per command so repeated runs stay idempotent.
    path = work / PRODUCED_FILE
    produced = {}
    if path.is_file():
        produced = json.loads(path.read_text())
    produced[command] = sorted(files)
    path.write_text(json.dumps(produced, sort_keys=True, indent=2) + "\n")


def _json_safe(value):
    """Replace non-finite floats with None; strict JSON forbids NaN."""
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def _best_metrics(runlog: train.RunLog, best_epoch: int) -> dict:
    record = runlog.records[best_epoch]
    metrics = {
        "train_loss": record.train_loss,
        "train_acc": record.train_acc,
        "eval_loss": record.eval_loss,
        "eval_acc": record.eval_acc,
    }
    if record.gamma is not None:
        metrics["gamma"] = record.gamma
    return _json_safe(metrics)


def _counts(manifest: data.DatasetManifest) -> dict:
    return {
        split: {str(k): v for k, v in sorted(manifest.class_counts(split).items())}
        for split in ("train", "test")
    }


def _error_response(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"detail": {"kind": kind, "message": message}},
    )


def create_app(work_dir=None) -> FastAPI:
    work = Path(work_dir) if work_dir is not None else default_work_dir()
    app = FastAPI(title="dkdlnet", version=__version__)
    app.state.work_dir = work
    app.state.lock = threading.Lock()
    for sub in WORK_SUBDIRS:
        (work / sub).mkdir(parents=True, exist_ok=True)

    @app.exception_handler(DivergenceError)
    def _divergence(request: Request, exc: DivergenceError):
        return _error_response(409, "divergence", str(exc))

    @app.exception_handler(DataError)
    def _data(request: Request, exc: DataError):
        return _error_response(422, "data", str(exc))

    @app.exception_handler(FileNotFoundError)
    def _missing(request: Request, exc: FileNotFoundError):
        return _error_response(422, "data", str(exc))

    @app.exception_handler(ValueError)
    def _usage(request: Request, exc: ValueError):
        return _error_response(400, "usage", str(exc))

    @app.exception_handler(RequestValidationError)
    def _validation(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first.get("loc", ()))
        return _error_response(400, "usage", f"{where}: {first.get('msg', 'invalid')}")

    def _save_dataset(manifest: data.DatasetManifest, name: str, command: str):
        path = work / "cache" / f"{name}.json"
        data.save_dataset(manifest, path)
        feature_path = path.parent / f"{path.stem}.dkdw"
        files = [_rel(work, path), _rel(work, feature_path)]
        _record_produced(work, command, files)
        return schemas.DatasetResponse(
            manifest=files[0],
            features=files[1],
            hash=manifest.hash,
            source=manifest.source,
            num_windows=len(manifest.windows),
            class_counts=_counts(manifest),
            files=files,
        )

    def _train_response(result: train.TrainResult, tag: str, command: str):
        ckpt = work / "checkpoints" / f"{tag}.ckpt"
        save_checkpoint(result.model, ckpt)
        log = work / "logs" / f"{tag}.csv"
        files = [_rel(work, ckpt), _rel(work, log)]
        _record_produced(work, command, files)
        return schemas.TrainResponse(
            checkpoint=files[0],
            runlog=files[1],
            procedure=result.model.metadata.get("procedure", command),
            model_name=result.model.spec.name,
            best_epoch=result.best_epoch,
            epochs_run=len(result.runlog.records) - 1,
            best_metrics=_best_metrics(result.runlog, result.best_epoch),
            files=files,
        )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(
            status="ok", version=__version__, work_dir=str(work)
        )

    @app.post("/synth", response_model=schemas.DatasetResponse)
    def synth(req: schemas.SynthRequest):
        with app.state.lock:
            manifest = data.synth_dataset(
                num_per_class=req.per_class,
                seed=req.seed,
                split_ratio=req.split_ratio,
            )
            return _save_dataset(manifest, req.name, "synth")

    @app.post("/ingest", response_model=schemas.DatasetResponse)
    def ingest(req: schemas.IngestRequest):
        with app.state.lock:
            label_map = None
            if req.label_map is not None:
                label_map = str(_resolve(work, req.label_map))
            manifest = data.build_manifest(
                str(_resolve(work, req.data_dir)),
                split_ratio=req.split_ratio,
                seed=req.seed,
                windows_per_class=req.windows_per_class,
                label_map=label_map,
            )
            return _save_dataset(manifest, req.name, "ingest")

    @app.post("/train-teacher", response_model=schemas.TrainResponse)
    def train_teacher(req: schemas.TrainTeacherRequest):
        with app.state.lock:
            cfg = TrainConfig.from_flat(req.config)
            manifest = data.load_dataset(_resolve(work, req.manifest))
            log = work / "logs" / f"{req.tag}.csv"
            result = train.train_teacher(manifest, cfg, log_path=log)
            return _train_response(result, req.tag, "train-teacher")

    @app.post("/distill", response_model=schemas.TrainResponse)
    def distill(req: schemas.DistillRequest):
        with app.state.lock:
            cfg = TrainConfig.from_flat(req.config)
            manifest = data.load_dataset(_resolve(work, req.manifest))
            log = work / "logs" / f"{req.tag}.csv"
            result = train.distill_student(
                str(_resolve(work, req.teacher)), manifest, cfg, log_path=log
            )
            return _train_response(result, req.tag, "distill")

    @app.post("/finetune", response_model=schemas.TrainResponse)
    def finetune(req: schemas.FinetuneRequest):
        with app.state.lock:
            cfg = TrainConfig.from_flat(req.config)
            manifest = data.load_dataset(_resolve(work, req.manifest))
            log = work / "logs" / f"{req.tag}.csv"
            result = train.finetune_lora(
                str(_resolve(work, req.student)), manifest, cfg, log_path=log
            )
            return _train_response(result, req.tag, "finetune")

    @app.post("/merge", response_model=schemas.MergeResponse)
    def merge(req: schemas.MergeRequest):
        with app.state.lock:
            path = _resolve(work, req.checkpoint)
            model = load_checkpoint(path)
            try:
                model.merge_adapters()
            except RuntimeError as exc:
                raise DataError(f"{path}: {exc}") from None
            if req.output is not None:
                out = _resolve(work, req.output)
            else:
                out = work / "checkpoints" / f"{path.stem}-merged.ckpt"
            save_checkpoint(model, out)
            files = [_rel(work, out)]
            _record_produced(work, "merge", files)
            return schemas.MergeResponse(
                output=files[0], model_name=model.spec.name, files=files
            )

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_checkpoint(req: schemas.EvalRequest):
        with app.state.lock:
            ckpt = _resolve(work, req.checkpoint)
            model = load_checkpoint(ckpt)
            manifest = data.load_dataset(_resolve(work, req.manifest))
            report = evaluate(
                model, manifest, split=req.split, batch_size=req.batch_size
            )
            stem = req.stem or f"{ckpt.stem}-{req.split}"
            paths = write_report(
                report, work / "reports", stem, svg=req.svg
            )
            files = [_rel(work, p) for p in paths]
            _record_produced(work, "eval", files)
            return schemas.EvalResponse(report=_json_safe(report.to_dict()), files=files)

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest):
        with app.state.lock:
            paths = [str(_resolve(work, c)) for c in req.checkpoints]
            reports = bench_latency(
                paths, num_samples=req.num_samples, warmup=req.warmup, seed=req.seed
            )
            out = write_latency_reports(
                reports, work / "reports" / f"{req.name}.json"
            )
            files = [_rel(work, out)]
            _record_produced(work, "bench", files)
            return schemas.BenchResponse(
                reports=[r.to_dict() for r in reports], files=files
            )

    @app.post("/describe", response_model=schemas.DescribeResponse)
    def describe(req: schemas.DescribeRequest):
        if req.target in ("teacher", "student", "dkdl-net"):
            spec = models.spec_for(req.target, rank=req.rank, pooling=req.pooling)
            merged = False
        else:
            model = load_checkpoint(_resolve(work, req.target))
            spec, merged = model.spec, model.merged
        return schemas.DescribeResponse(
            model_name=spec.name,
            text=models.describe_text(spec, merged=merged),
            total_parameters=models.count_parameters(spec),
            trainable_parameters=models.count_parameters(spec, trainable_only=True),
            merged=merged,
        )

    return app
