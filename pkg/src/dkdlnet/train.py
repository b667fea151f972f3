"""Training procedures and the Adam optimizer.

Three procedures share one epoch loop: the teacher trains on
cross-entropy, the student distills against cached logits of a frozen
teacher with the combined decoupled loss, and the low-rank adapters
fine-tune on cross-entropy with every base tensor frozen.  All
randomness flows from a single named seed, so repeating a run yields
identical weights and logs; only the wall-clock column of a run log can
differ between runs.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import load_batches
from .distill import DkdConfig, combined_loss, cross_entropy
from .errors import DataError, DivergenceError
from .models import NUM_CLASSES, Model, build_dkdl_net, build_student, build_teacher
from .tensor import Tape


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}/{self.beta2}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


@dataclass
class LoraConfig:
    rank: int = 12
    sigma: float = 0.01


@dataclass
class TrainConfig:
    """Hyperparameters for any of the training procedures."""

    lr: float = 0.005
    weight_decay: float = 0.0001
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    decoupled_decay: bool = False
    dkd: DkdConfig = field(default_factory=DkdConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self):
        """Nested plain-python dict, safe for JSON and checkpoint metadata."""
        return {
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "decoupled_decay": self.decoupled_decay,
            "dkd": {
                "alpha": self.dkd.alpha,
                "beta": self.dkd.beta,
                "gamma": self.dkd.gamma,
                "temperature": self.dkd.temperature,
                "gamma_mode": self.dkd.gamma_mode,
                "t2_scale": self.dkd.t2_scale,
            },
            "lora": {"rank": self.lora.rank, "sigma": self.lora.sigma},
            "adam": {
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
            },
        }

    def to_flat(self):
        """Dotted-key view of ``to_dict`` (`dkd.alpha`, `adam.beta1`, ...)."""
        flat = {}
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                for sub, subvalue in value.items():
                    flat[f"{key}.{sub}"] = subvalue
            else:
                flat[key] = value
        return flat

    @classmethod
    def from_flat(cls, mapping):
        """Build a config from dotted keys, starting from the defaults."""
        base = cls()
        known = base.to_flat()
        top = {f.name: getattr(base, f.name) for f in fields(cls)}
        nested = {"dkd": {}, "lora": {}, "adam": {}}
        for key, value in dict(mapping).items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if "." in key:
                group, sub = key.split(".", 1)
                nested[group][sub] = _coerce_like(known[key], value, key)
            else:
                top[key] = _coerce_like(known[key], value, key)
        top["dkd"] = replace(DkdConfig(), **nested["dkd"])
        top["lora"] = replace(LoraConfig(), **nested["lora"])
        top["adam"] = replace(AdamConfig(), **nested["adam"])
        return cls(**top)


def _coerce_like(default, value, key):
    """Cast a raw override to its default's type; bools reject non-bools."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ValueError(f"config key {key!r} expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return type(default)(value) if not isinstance(value, type(default)) else value


# ---------------------------------------------------------------------------
# Adam


def fresh_adam_state():
    return {"t": 0, "m": {}, "v": {}}


def adam_step(params, grads, state, cfg):
    """One Adam update over name-aligned dicts of arrays, in place.

    Classic L2 regularization folds ``weight_decay * param`` into the
    gradient; with ``decoupled_decay`` the decay is applied directly to
    the parameter instead.  Moment buffers allocate lazily, so tensors
    that never produce gradients never get state.
    """
    state["t"] += 1
    t = state["t"]
    b1, b2, eps = cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps
    for name, grad in grads.items():
        param = params[name]
        if param.shape != grad.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter "
                f"{name!r} of shape {param.shape}"
            )
        g = grad
        if cfg.weight_decay != 0.0 and not cfg.decoupled_decay:
            g = g + cfg.weight_decay * param
        if name not in state["m"]:
            state["m"][name] = np.zeros_like(param)
            state["v"][name] = np.zeros_like(param)
        m, v = state["m"][name], state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        if cfg.weight_decay != 0.0 and cfg.decoupled_decay:
            param -= cfg.lr * cfg.weight_decay * param
        param -= cfg.lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamOptimizer:
    """Binds ``adam_step`` to a set of named trainable tensors."""

    def __init__(self, tensors, cfg):
        self.tensors = {n: t for n, t in tensors.items() if t.requires_grad}
        self.state = fresh_adam_state()
        self.cfg = cfg

    def step(self):
        grads = {n: t.grad for n, t in self.tensors.items() if t.grad is not None}
        params = {n: self.tensors[n].data for n in grads}
        adam_step(params, grads, self.state, self.cfg)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


# ---------------------------------------------------------------------------
# Run logs


RUNLOG_FIELDS = ("epoch", "train_loss", "train_acc", "eval_loss", "eval_acc", "wall_ms")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float
    wall_ms: float
    gamma: float = None


class RunLog:
    """Per-epoch training trace, persisted as CSV.

    Row 0 holds the untrained model's metrics (no updates applied);
    ``eval_loss``/``eval_acc`` are always plain cross-entropy metrics on
    the test split, while ``train_loss`` is the procedure's own
    objective.  Learnable-gamma runs carry a trailing ``gamma`` column.
    """

    def __init__(self, records=None):
        self.records = list(records or [])

    def append(self, record):
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError(
                f"epoch {record.epoch} does not follow {self.records[-1].epoch}"
            )
        self.records.append(record)

    @property
    def has_gamma(self):
        return any(r.gamma is not None for r in self.records)

    def fieldnames(self):
        return RUNLOG_FIELDS + ("gamma",) if self.has_gamma else RUNLOG_FIELDS

    def _row(self, record):
        row = [
            str(record.epoch),
            repr(float(record.train_loss)),
            repr(float(record.train_acc)),
            repr(float(record.eval_loss)),
            repr(float(record.eval_acc)),
            repr(float(record.wall_ms)),
        ]
        if self.has_gamma:
            row.append("" if record.gamma is None else repr(float(record.gamma)))
        return row

    def to_csv_text(self):
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(self.fieldnames())
        for record in self.records:
            writer.writerow(self._row(record))
        return out.getvalue()

    def write(self, path):
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def read(cls, path):
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        if not rows or rows[0][:6] != list(RUNLOG_FIELDS):
            raise DataError(f"{path} is not a run log")
        log = cls()
        for row in rows[1:]:
            gamma = None
            if len(row) > 6 and row[6] != "":
                gamma = float(row[6])
            log.append(
                EpochRecord(
                    epoch=int(row[0]),
                    train_loss=float(row[1]),
                    train_acc=float(row[2]),
                    eval_loss=float(row[3]),
                    eval_acc=float(row[4]),
                    wall_ms=float(row[5]),
                    gamma=gamma,
                )
            )
        return log

    def comparable_rows(self):
        """Rows with the wall-clock column dropped, for determinism checks."""
        return [
            (r.epoch, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc, r.gamma)
            for r in self.records
        ]


class _LogWriter:
    """Appends one CSV line per epoch, flushed immediately."""

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(",".join(fieldnames) + "\n")

    def append(self, runlog, record):
        with open(self.path, "a") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(runlog._row(record))
            fh.flush()


# ---------------------------------------------------------------------------
# Shared training engine


@dataclass
class TrainResult:
    model: Model
    runlog: RunLog
    best_epoch: int


def _epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([int(seed), 9, int(epoch)]).generate_state(1)[0])


def _accuracy_count(logits, labels):
    return int(np.sum(np.argmax(logits, axis=1) == labels))


def _objective_over_split(model, manifest, cfg, batch_loss, split):
    """Mean loss and accuracy of ``batch_loss`` without any updates."""
    model.eval()
    total = 0.0
    correct = 0
    seen = 0
    for x, y, idx in load_batches(manifest, split, cfg.batch_size, yield_indices=True):
        loss, logits = batch_loss(x, y, idx)
        total += loss.item() * len(y)
        correct += _accuracy_count(logits.data, y)
        seen += len(y)
    return total / seen, correct / seen


def _ce_metrics(model, manifest, cfg, split):
    def ce(x, y, idx):
        logits = model.forward(x)
        return cross_entropy(logits, y), logits

    return _objective_over_split(model, manifest, cfg, ce, split)


def _fit(model, manifest, cfg, batch_loss, procedure, extra_tensors=None,
         record_gamma=False, log_path=None):
    """The epoch loop shared by all procedures.

    ``batch_loss(x, y, idx) -> (loss, logits)`` defines the objective;
    ``idx`` carries manifest window indices for per-window caches.  The
    model with the best eval accuracy (ties resolved toward the latest
    epoch) is restored before returning.
    """
    tensors = {n: t for n, t in model.params.items() if t.requires_grad}
    tensors.update(extra_tensors or {})
    optimizer = AdamOptimizer(tensors, cfg)
    has_eval = manifest.split_indices("test").size > 0

    def snapshot():
        return {name: array.copy() for name, array in model.named_tensors()}

    def gamma_now():
        return cfg.dkd.effective_gamma() if record_gamma else None

    def eval_metrics():
        if not has_eval:
            return float("nan"), float("nan")
        return _ce_metrics(model, manifest, cfg, "test")

    runlog = RunLog()
    start = time.perf_counter()
    init_train_loss, init_train_acc = _objective_over_split(
        model, manifest, cfg, batch_loss, "train"
    )
    eval_loss, eval_acc = eval_metrics()
    first = EpochRecord(
        epoch=0,
        train_loss=init_train_loss,
        train_acc=init_train_acc,
        eval_loss=eval_loss,
        eval_acc=eval_acc,
        wall_ms=(time.perf_counter() - start) * 1000.0,
        gamma=gamma_now(),
    )
    runlog.append(first)
    writer = _LogWriter(log_path, runlog.fieldnames()) if log_path else None
    if writer:
        writer.append(runlog, first)

    best_score = eval_acc if has_eval else init_train_acc
    best_epoch = 0
    best_state = snapshot()

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        total = 0.0
        correct = 0
        seen = 0
        batches = load_batches(
            manifest, "train", cfg.batch_size,
            shuffle_seed=_epoch_seed(cfg.seed, epoch), yield_indices=True,
        )
        for batch_index, (x, y, idx) in enumerate(batches):
            optimizer.zero_grad()
            with Tape() as tape:
                loss, logits = batch_loss(x, y, idx)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(
                    f"{procedure} training diverged: loss {value} at "
                    f"epoch {epoch}, batch {batch_index} (lr={cfg.lr})"
                )
            tape.backward(loss)
            optimizer.step()
            total += value * len(y)
            correct += _accuracy_count(logits.data, y)
            seen += len(y)
        eval_loss, eval_acc = eval_metrics()
        record = EpochRecord(
            epoch=epoch,
            train_loss=total / seen,
            train_acc=correct / seen,
            eval_loss=eval_loss,
            eval_acc=eval_acc,
            wall_ms=(time.perf_counter() - start) * 1000.0,
            gamma=gamma_now(),
        )
        runlog.append(record)
        if writer:
            writer.append(runlog, record)
        score = eval_acc if has_eval else record.train_acc
        if score >= best_score:
            best_score = score
            best_epoch = epoch
            best_state = snapshot()

    for name, array in model.named_tensors():
        array[...] = best_state[name]
    model.eval()
    model.metadata.update(
        {
            "procedure": procedure,
            "config": cfg.to_dict(),
            "best_epoch": best_epoch,
            "best_eval_acc": None if not has_eval else best_score,
        }
    )
    return TrainResult(model=model, runlog=runlog, best_epoch=best_epoch)


def _as_model(source, expect):
    if isinstance(source, Model):
        if source.spec.name != expect:
            raise DataError(f"expected a {expect} model, got {source.spec.name!r}")
        return source
    return load_checkpoint(source, expect=expect)


def _cached_logits(teacher, manifest, cfg):
    """Frozen-teacher logits for every train window, indexed by window id."""
    teacher.eval()
    out = np.zeros((len(manifest.windows), NUM_CLASSES), dtype=np.float64)
    for x, _, idx in load_batches(manifest, "train", cfg.batch_size, yield_indices=True):
        out[idx] = teacher.forward(x).data
    return out


# ---------------------------------------------------------------------------
# Procedures


def train_teacher(manifest, cfg=None, log_path=None):
    """Train the six-block teacher from scratch with cross-entropy."""
    cfg = cfg or TrainConfig()
    model = Model(build_teacher(), seed=cfg.seed)

    def batch_loss(x, y, idx):
        logits = model.forward(x)
        return cross_entropy(logits, y), logits

    return _fit(model, manifest, cfg, batch_loss, procedure="teacher", log_path=log_path)


def train_student(manifest, cfg=None, log_path=None):
    """Cross-entropy-only student baseline (no teacher involved)."""
    cfg = cfg or TrainConfig()
    model = Model(build_student(), seed=cfg.seed)

    def batch_loss(x, y, idx):
        logits = model.forward(x)
        return cross_entropy(logits, y), logits

    return _fit(model, manifest, cfg, batch_loss, procedure="student-ce", log_path=log_path)


def distill_student(teacher, manifest, cfg=None, log_path=None):
    """Train a fresh student against a frozen teacher's logits.

    The teacher runs once in eval mode to cache its train-split logits;
    its weights are never touched.  In learnable-gamma mode the blend
    parameter joins the optimizer and its value lands in the run log.
    """
    cfg = cfg or TrainConfig()
    teacher_model = _as_model(teacher, expect="teacher")
    student = Model(build_student(), seed=cfg.seed)
    teacher_logits = _cached_logits(teacher_model, manifest, cfg)

    def batch_loss(x, y, idx):
        logits = student.forward(x)
        return combined_loss(teacher_logits[idx], logits, y, cfg.dkd), logits

    extra = {}
    record_gamma = cfg.dkd.gamma_mode == "learnable"
    if record_gamma:
        extra["dkd.gamma"] = cfg.dkd.learnable_gamma()
    return _fit(
        student, manifest, cfg, batch_loss, procedure="distill",
        extra_tensors=extra, record_gamma=record_gamma, log_path=log_path,
    )


def finetune_lora(student, manifest, cfg=None, log_path=None):
    """Wrap a trained student in fresh adapters and fine-tune only those."""
    cfg = cfg or TrainConfig()
    student_model = _as_model(student, expect="student")
    net = build_dkdl_net(
        student_model, rank=cfg.lora.rank, sigma=cfg.lora.sigma, seed=cfg.seed
    )

    def batch_loss(x, y, idx):
        logits = net.forward(x)
        return cross_entropy(logits, y), logits

    return _fit(net, manifest, cfg, batch_loss, procedure="finetune-lora", log_path=log_path)
