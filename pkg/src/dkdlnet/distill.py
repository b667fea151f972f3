"""Training objectives: cross-entropy, classical KD, and its decomposition.

Classical knowledge distillation compares full softened distributions,
KD = KL(p^T || p^S). Splitting each distribution into the binary
(target vs rest) pair b = [p_t, 1 - p_t] and the renormalized non-target
part p_tilde gives

    KD = TCKD + (1 - p_t^T) * NCKD

with TCKD = KL(b^T || b^S) and NCKD = KL(p_tilde^T || p_tilde^S). The
decoupled loss reweights the two parts independently,
L_DKD = alpha * TCKD + beta * NCKD, and the full objective blends in
supervised cross-entropy: L = (1 - gamma) * L_CE + gamma * L_DKD.

Teacher logits are plain arrays here (detached): only student logits and,
in learnable-gamma mode, the gamma parameter receive gradients. Everything
runs in log space; the only exponentials taken are of log-probabilities,
which are <= 0, so large logits cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as dt
from .tensor import Tensor


@dataclass
class DkdConfig:
    """Weights and knobs for the distillation objective."""

    alpha: float = 1.0
    beta: float = 8.0
    gamma: float = 0.5
    temperature: float = 1.0
    gamma_mode: str = "fixed"  # "fixed" | "learnable"
    t2_scale: bool = False  # multiply KD-family losses by T^2
    # sigmoid pre-image of gamma; created on first use in learnable mode
    gamma_param: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError(f"alpha and beta must be >= 0, got {self.alpha}/{self.beta}")
        if self.gamma_mode not in ("fixed", "learnable"):
            raise ValueError(f"gamma_mode must be 'fixed' or 'learnable', got {self.gamma_mode!r}")

    def learnable_gamma(self) -> Tensor:
        """The trainable parameter behind gamma; sigmoid keeps gamma in (0, 1)."""
        if self.gamma_mode != "learnable":
            raise ValueError("gamma is fixed; set gamma_mode='learnable' first")
        if self.gamma_param is None:
            g = min(max(self.gamma, 1e-6), 1.0 - 1e-6)
            theta = math.log(g / (1.0 - g))
            self.gamma_param = Tensor(np.asarray(theta), requires_grad=True)
        return self.gamma_param

    def effective_gamma(self) -> float:
        if self.gamma_mode == "learnable" and self.gamma_param is not None:
            return float(1.0 / (1.0 + np.exp(-self.gamma_param.item())))
        return self.gamma


@dataclass
class ProbabilityBundle:
    """One logit vector split the way the decomposition sees it."""

    p: np.ndarray  # full softmax, sums to 1
    b: np.ndarray  # [p_target, 1 - p_target]
    p_tilde: np.ndarray  # non-target classes renormalized, length N-1
    target_index: int


def decompose(logits, target: int, temperature: float = 1.0) -> ProbabilityBundle:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"decompose expects a single logit vector, got shape {z.shape}")
    n = z.shape[0]
    if n < 2:
        raise ValueError("decompose needs at least 2 classes (non-target set would be empty)")
    target = int(target)
    if not 0 <= target < n:
        raise ValueError(f"target {target} out of range [0, {n})")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = z / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    rest = np.delete(z, target)
    pt = np.exp(rest - rest.max())
    pt /= pt.sum()
    return ProbabilityBundle(p=p, b=np.array([p[target], 1.0 - p[target]]),
                             p_tilde=pt, target_index=target)


def _as_batch(logits, name: str):
    """Coerce logits to 2-d; return (value, was_single_sample)."""
    if isinstance(logits, Tensor):
        if logits.ndim == 1:
            return dt.reshape(logits, (1, logits.shape[0])), True
        if logits.ndim == 2:
            return logits, False
    else:
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim == 1:
            return arr[None, :], True
        if arr.ndim == 2:
            return arr, False
    raise ValueError(f"{name} logits must be 1-d or 2-d")


def _labels(target, batch: int, classes: int) -> np.ndarray:
    idx = np.asarray(target)
    if idx.ndim == 0:
        idx = idx.reshape(1)
    idx = idx.astype(np.int64)
    if idx.shape != (batch,):
        raise ValueError(f"expected {batch} labels, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    return idx


def cross_entropy(logits, labels) -> Tensor:
    """Batch-mean negative log-likelihood of the labeled class."""
    logits, _ = _as_batch(logits, "cross_entropy")
    if not isinstance(logits, Tensor):
        logits = Tensor(logits)
    b = logits.shape[0]
    idx = _labels(labels, b, logits.shape[1])
    picked = dt.gather(dt.log_softmax(logits), idx)
    return dt.scale(dt.tensor_sum(picked), -1.0 / b)


class _TeacherSide:
    """All teacher-derived constants, computed once per loss call in numpy."""

    __slots__ = ("log_p", "p", "log_pt", "pt", "log_pnt", "log_tilde", "p_tilde", "keep")

    def __init__(self, teacher: np.ndarray, idx: np.ndarray, temperature: float):
        b, n = teacher.shape
        z = teacher / temperature
        m = z.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
        self.log_p = z - lse
        self.p = np.exp(self.log_p)
        self.log_pt = self.log_p[np.arange(b), idx]
        self.pt = np.exp(self.log_pt)
        self.keep = np.arange(n)[None, :] != idx[:, None]
        rest = z[self.keep].reshape(b, n - 1)
        mr = rest.max(axis=-1, keepdims=True)
        lse_nt = mr + np.log(np.exp(rest - mr).sum(axis=-1, keepdims=True))
        self.log_pnt = (lse_nt - lse).squeeze(-1)  # log(1 - p_t)
        self.log_tilde = rest - lse_nt
        self.p_tilde = np.exp(self.log_tilde)


def _student_side(student: Tensor, idx: np.ndarray, temperature: float):
    zs = dt.scale(student, 1.0 / temperature)
    log_p = dt.log_softmax(zs)
    log_pt = dt.gather(log_p, idx)
    rest = dt.drop_index(zs, idx)
    log_tilde = dt.log_softmax(rest)
    log_pnt = dt.logsumexp(rest) - dt.logsumexp(zs)
    return log_p, log_pt, log_pnt, log_tilde


def _prepare(teacher_logits, student_logits, target, temperature: float):
    teacher, _ = _as_batch(teacher_logits, "kd")
    if isinstance(teacher, Tensor):
        teacher = teacher.data  # the teacher is frozen: detach unconditionally
    teacher = np.asarray(teacher, dtype=np.float64)
    student, _ = _as_batch(student_logits, "kd")
    if not isinstance(student, Tensor):
        student = Tensor(student)
    if teacher.shape != student.shape:
        raise ValueError(
            f"teacher/student logit shapes differ: {teacher.shape} vs {student.shape}")
    if teacher.shape[1] < 2:
        raise ValueError("distillation needs at least 2 classes")
    idx = _labels(target, teacher.shape[0], teacher.shape[1])
    return teacher, student, idx


def kd_per_sample(teacher_logits, student_logits, target, temperature: float = 1.0) -> Tensor:
    """KL(p^T || p^S) per sample at the given temperature (no reduction)."""
    teacher, student, idx = _prepare(teacher_logits, student_logits, target, temperature)
    ts = _TeacherSide(teacher, idx, temperature)
    log_p_s = dt.log_softmax(dt.scale(student, 1.0 / temperature))
    return dt.tensor_sum((Tensor(ts.log_p) - log_p_s) * Tensor(ts.p), axis=-1)


def tckd_per_sample(teacher_logits, student_logits, target, temperature: float = 1.0) -> Tensor:
    """KL(b^T || b^S) per sample: the binary target-vs-rest term."""
    teacher, student, idx = _prepare(teacher_logits, student_logits, target, temperature)
    ts = _TeacherSide(teacher, idx, temperature)
    _, log_pt_s, log_pnt_s, _ = _student_side(student, idx, temperature)
    t_term = (Tensor(ts.log_pt) - log_pt_s) * Tensor(ts.pt)
    nt_term = (Tensor(ts.log_pnt) - log_pnt_s) * Tensor(1.0 - ts.pt)
    return t_term + nt_term


def nckd_per_sample(teacher_logits, student_logits, target, temperature: float = 1.0) -> Tensor:
    """KL(p_tilde^T || p_tilde^S) per sample: the non-target term."""
    teacher, student, idx = _prepare(teacher_logits, student_logits, target, temperature)
    ts = _TeacherSide(teacher, idx, temperature)
    _, _, _, log_tilde_s = _student_side(student, idx, temperature)
    return dt.tensor_sum((Tensor(ts.log_tilde) - log_tilde_s) * Tensor(ts.p_tilde), axis=-1)


def _reduce(per_sample: Tensor, temperature: float, t2_scale: bool) -> Tensor:
    loss = dt.tensor_mean(per_sample)
    if t2_scale:
        loss = dt.scale(loss, temperature * temperature)
    return loss


def kd_loss(teacher_logits, student_logits, target, temperature: float = 1.0,
            t2_scale: bool = False) -> Tensor:
    return _reduce(kd_per_sample(teacher_logits, student_logits, target, temperature),
                   temperature, t2_scale)


def tckd_loss(teacher_logits, student_logits, target, temperature: float = 1.0,
              t2_scale: bool = False) -> Tensor:
    return _reduce(tckd_per_sample(teacher_logits, student_logits, target, temperature),
                   temperature, t2_scale)


def nckd_loss(teacher_logits, student_logits, target, temperature: float = 1.0,
              t2_scale: bool = False) -> Tensor:
    return _reduce(nckd_per_sample(teacher_logits, student_logits, target, temperature),
                   temperature, t2_scale)


def dkd_loss(teacher_logits, student_logits, target, cfg: DkdConfig) -> Tensor:
    """alpha * TCKD + beta * NCKD, batch-mean."""
    t = cfg.temperature
    tckd = tckd_per_sample(teacher_logits, student_logits, target, t)
    nckd = nckd_per_sample(teacher_logits, student_logits, target, t)
    combined = dt.scale(tckd, cfg.alpha) + dt.scale(nckd, cfg.beta)
    return _reduce(combined, t, cfg.t2_scale)


def combined_loss(teacher_logits, student_logits, labels, cfg: DkdConfig) -> Tensor:
    """(1 - gamma) * CE + gamma * DKD; gamma may be a trained parameter."""
    ce = cross_entropy(student_logits, labels)
    dkd = dkd_loss(teacher_logits, student_logits, labels, cfg)
    if cfg.gamma_mode == "learnable":
        g = dt.sigmoid(cfg.learnable_gamma())
        return (-g + 1.0) * ce + g * dkd
    return dt.scale(ce, 1.0 - cfg.gamma) + dt.scale(dkd, cfg.gamma)
