"""Classification metrics, ROC/AUC, report files, and latency benchmarks.

Metrics are computed one-vs-rest per class from a single confusion
matrix.  Macro averages are the headline numbers; micro averages are
reported alongside because for single-label problems micro precision,
micro recall, and accuracy coincide, which doubles as an internal
consistency check.  ROC curves are exact empirical curves with a
threshold at every distinct score; AUC integrates them by the
trapezoidal rule.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import load_batches
from .errors import DataError
from .models import NUM_CLASSES, Model

BENCH_SAMPLES = 2500
BENCH_WARMUP = 100


@dataclass
class ClassMetrics:
    label: int
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


@dataclass
class RocCurve:
    label: int
    points: list  # (fpr, tpr) pairs, monotone in both axes
    auc: float


@dataclass
class EvalReport:
    model_name: str
    split: str
    num_samples: int
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    per_class: list
    confusion: np.ndarray
    roc: list

    def to_dict(self):
        return {
            "model": self.model_name,
            "split": self.split,
            "num_samples": int(self.num_samples),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "per_class": [
                {
                    "label": m.label,
                    "tp": m.tp,
                    "fp": m.fp,
                    "fn": m.fn,
                    "tn": m.tn,
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                }
                for m in self.per_class
            ],
            "confusion": self.confusion.tolist(),
            "roc": [
                {
                    "label": c.label,
                    "auc": c.auc,
                    "points": [[float(f), float(t)] for f, t in c.points],
                }
                for c in self.roc
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Metric arithmetic


def confusion_matrix(y_true, y_pred, num_classes=NUM_CLASSES):
    """Count matrix with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (y_true, y_pred), 1)
    return matrix


def _safe_div(num, den):
    return num / den if den else 0.0


def metrics_from_confusion(confusion):
    """Per-class one-vs-rest counts and P/R/F1, plus macro/micro averages.

    Returns (per_class, accuracy, macro, micro) where macro and micro are
    (precision, recall, f1) triples.  Zero denominators yield 0.0;
    F1 comes from unrounded precision and recall.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    total = int(confusion.sum())
    per_class = []
    for c in range(confusion.shape[0]):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum() - tp)
        fn = int(confusion[c, :].sum() - tp)
        tn = total - tp - fp - fn
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2.0 * precision * recall, precision + recall)
        per_class.append(ClassMetrics(c, tp, fp, fn, tn, precision, recall, f1))
    accuracy = _safe_div(int(np.trace(confusion)), total)
    macro = (
        float(np.mean([m.precision for m in per_class])),
        float(np.mean([m.recall for m in per_class])),
        float(np.mean([m.f1 for m in per_class])),
    )
    tp_sum = sum(m.tp for m in per_class)
    fp_sum = sum(m.fp for m in per_class)
    fn_sum = sum(m.fn for m in per_class)
    micro_p = _safe_div(tp_sum, tp_sum + fp_sum)
    micro_r = _safe_div(tp_sum, tp_sum + fn_sum)
    micro = (micro_p, micro_r, _safe_div(2.0 * micro_p * micro_r, micro_p + micro_r))
    return per_class, accuracy, macro, micro


def roc_curve(scores, positive):
    """Empirical ROC with a threshold at every distinct score.

    ``positive`` is a boolean mask of true positives.  Points run from
    (0, 0) to (1, 1); AUC is the trapezoidal integral over fpr.  With no
    positives (or no negatives) the curve is degenerate and AUC is NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return [(0.0, 0.0), (1.0, 1.0)], float("nan")
    order = np.argsort(-scores, kind="stable")
    sorted_pos = positive[order]
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(~sorted_pos)
    # Keep only the last index of each run of equal scores: one threshold
    # per distinct value, so ties move the operating point jointly.
    distinct = np.nonzero(np.diff(scores[order], append=-np.inf))[0]
    tpr = np.concatenate([[0.0], tp[distinct] / n_pos])
    fpr = np.concatenate([[0.0], fp[distinct] / n_neg])
    auc = float(np.trapezoid(tpr, fpr))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_scores(model, manifest, split, batch_size=256):
    """Softmax scores and labels for a whole split, in manifest order."""
    model.eval()
    scores = []
    labels = []
    for x, y in load_batches(manifest, split, batch_size):
        scores.append(_softmax(model.forward(x).data))
        labels.append(y)
    return np.concatenate(scores), np.concatenate(labels)


def evaluate(model, manifest, split="test", batch_size=256):
    """Full evaluation of one model on one split."""
    scores, labels = predict_scores(model, manifest, split, batch_size)
    predictions = np.argmax(scores, axis=1)
    confusion = confusion_matrix(labels, predictions)
    per_class, accuracy, macro, micro = metrics_from_confusion(confusion)
    roc = []
    for c in range(NUM_CLASSES):
        points, auc = roc_curve(scores[:, c], labels == c)
        roc.append(RocCurve(label=c, points=points, auc=auc))
    return EvalReport(
        model_name=model.spec.name,
        split=split,
        num_samples=int(labels.size),
        accuracy=accuracy,
        macro_precision=macro[0],
        macro_recall=macro[1],
        macro_f1=macro[2],
        micro_precision=micro[0],
        micro_recall=micro[1],
        micro_f1=micro[2],
        per_class=per_class,
        confusion=confusion,
        roc=roc,
    )


# ---------------------------------------------------------------------------
# Report files


def _confusion_csv(report):
    header = "true\\pred," + ",".join(str(c) for c in range(report.confusion.shape[1]))
    lines = [header]
    for c, row in enumerate(report.confusion):
        lines.append(f"{c}," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def _roc_csv(report):
    lines = ["class,fpr,tpr"]
    for curve in report.roc:
        for fpr, tpr in curve.points:
            lines.append(f"{curve.label},{fpr!r},{tpr!r}")
    return "\n".join(lines) + "\n"


def write_report(report, directory, stem, svg=False):
    """Write JSON + CSV artifacts (and optional SVG plots); returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    json_path = directory / f"{stem}.json"
    json_path.write_text(report.to_json())
    paths.append(json_path)
    confusion_path = directory / f"{stem}_confusion.csv"
    confusion_path.write_text(_confusion_csv(report))
    paths.append(confusion_path)
    roc_path = directory / f"{stem}_roc.csv"
    roc_path.write_text(_roc_csv(report))
    paths.append(roc_path)
    if svg:
        paths.extend(_write_svg_plots(report, directory, stem))
    return paths


def _write_svg_plots(report, directory, stem):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    image = ax.imshow(report.confusion, cmap="Blues")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_title(f"{report.model_name}: confusion ({report.split})")
    fig.colorbar(image, ax=ax)
    for (r, c), value in np.ndenumerate(report.confusion):
        if value:
            ax.text(c, r, str(int(value)), ha="center", va="center", fontsize=7)
    path = directory / f"{stem}_confusion.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.2, 4.4))
    for curve in report.roc:
        xs, ys = zip(*curve.points)
        ax.plot(xs, ys, linewidth=1.0, label=f"class {curve.label} (AUC {curve.auc:.3f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"{report.model_name}: ROC ({report.split})")
    ax.legend(fontsize=6, loc="lower right")
    path = directory / f"{stem}_roc.svg"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    written.append(path)
    return written


# ---------------------------------------------------------------------------
# Latency benchmark


@dataclass
class LatencyReport:
    model_name: str
    num_samples: int
    warmup: int
    mean_us: float
    median_us: float
    p95_us: float
    cpu_model: str

    def to_dict(self):
        return {
            "model": self.model_name,
            "num_samples": self.num_samples,
            "warmup": self.warmup,
            "mean_us": self.mean_us,
            "median_us": self.median_us,
            "p95_us": self.p95_us,
            "cpu_model": self.cpu_model,
        }


def cpu_model_name():
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                return line.split(":", 1)[1].strip()
    except OSError:
        pass
    import platform

    return platform.processor() or platform.machine() or "unknown"


def _prepare_for_bench(source):
    """Load if needed, fold adapters, cast to the 32-bit inference path."""
    if isinstance(source, Model):
        model = source
    else:
        from .checkpoint import load_checkpoint

        model = load_checkpoint(source)
    if model.adapters and not model.merged:
        model.merge_adapters()
    return model.cast(np.float32).eval()


def bench_inputs(num_samples, fft_bins=1024, seed=0):
    """Standard-normal windows, standardized per row, float32."""
    rng = np.random.default_rng([int(seed), 4])
    x = rng.standard_normal((num_samples, 1, fft_bins))
    x -= x.mean(axis=2, keepdims=True)
    x /= x.std(axis=2, keepdims=True)
    return x.astype(np.float32)


def bench_latency(model_ckpts, num_samples=BENCH_SAMPLES, warmup=BENCH_WARMUP, seed=0):
    """Single-threaded per-sample forward timings for each model.

    All models see the identical preloaded inputs; times cover the pure
    forward call only.  Returns one LatencyReport per model, in order.
    """
    if num_samples <= warmup:
        raise ValueError(f"num_samples ({num_samples}) must exceed warmup ({warmup})")
    inputs = bench_inputs(num_samples)
    cpu = cpu_model_name()
    reports = []
    for source in model_ckpts:
        model = _prepare_for_bench(source)
        for i in range(warmup):
            model.forward(inputs[i % num_samples])
        times_us = np.empty(num_samples)
        for i in range(num_samples):
            sample = inputs[i]
            start = time.perf_counter()
            model.forward(sample)
            times_us[i] = (time.perf_counter() - start) * 1e6
        reports.append(
            LatencyReport(
                model_name=model.spec.name,
                num_samples=num_samples,
                warmup=warmup,
                mean_us=float(times_us.mean()),
                median_us=float(np.median(times_us)),
                p95_us=float(np.percentile(times_us, 95)),
                cpu_model=cpu,
            )
        )
    return reports


def write_latency_reports(reports, path):
    """One JSON row per model, as a single array document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    return path
