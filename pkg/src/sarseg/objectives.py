"""Class-weighted sigmoid loss and confusion-matrix segmentation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossSpec:
    weights: tuple[float, ...]
    ignore_index: int = 255
    kind: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.weights or not all(math.isfinite(w) and w > 0 for w in self.weights):
            raise ValueError(f"class weights must be finite and > 0, got {self.weights}")
        if self.kind not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown loss kind {self.kind!r}")


def sigmoid(x):
    """Logistic function; stable for large |x| on scalars, arrays and tensors."""
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def weighted_loss(logits: torch.Tensor, labels: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    """Mean over non-ignored pixels of the class-weighted binary log loss.

    logits: (K, H, W) or (B, K, H, W); labels: matching (H, W) or (B, H, W).
    With ``spec.kind == "softmax"`` a weighted softmax cross-entropy is used instead.
    """
    if logits.ndim == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    k = logits.shape[1]
    if len(spec.weights) != k:
        raise ValueError(f"{len(spec.weights)} class weights for {k} classes")
    labels = labels.long()
    valid = labels != spec.ignore_index
    if not bool(valid.any()):
        raise ValueError("every pixel is ignored; the mean loss is undefined")
    bad = valid & ((labels < 0) | (labels >= k))
    if bool(bad.any()):
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {k}) and not ignore_index")
    w = torch.tensor(spec.weights, dtype=logits.dtype, device=logits.device)
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    if spec.kind == "softmax":
        nll = -F.log_softmax(logits, dim=1).gather(1, safe.unsqueeze(1)).squeeze(1)
        per_pixel = w[safe] * nll
    else:
        onehot = F.one_hot(safe, k).permute(0, 3, 1, 2).to(logits.dtype)
        # log(1 - sigmoid(z)) = logsigmoid(-z)
        terms = onehot * F.logsigmoid(logits) + (1 - onehot) * F.logsigmoid(-logits)
        per_pixel = -(w[None, :, None, None] * terms).sum(dim=1)
    return per_pixel[valid].sum() / valid.sum()


class ConfusionMatrix:
    """k x k pixel counts; ``counts[g, p]`` = pixels with ground truth g predicted as p."""

    def __init__(self, k: int, counts: Optional[np.ndarray] = None):
        self.k = k
        self.counts = np.zeros((k, k), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (k, k) or (self.counts < 0).any():
            raise ValueError(f"confusion counts must be a nonnegative {k}x{k} array")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(pred, gt, k: int, ignore_index: int = 255, cm: Optional[ConfusionMatrix] = None,
               exclude: Sequence[int] = ()) -> ConfusionMatrix:
    """Add every pixel whose ground truth is not ignored (nor in ``exclude``) to ``cm``."""
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = gt != ignore_index
    for c in exclude:
        keep &= gt != c
    pred, gt = pred[keep], gt[keep]
    if gt.size and (gt.min() < 0 or gt.max() >= k):
        raise ValueError(f"ground-truth label outside [0, {k})")
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise ValueError(f"predicted label outside [0, {k})")
    counts = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    cm = cm if cm is not None else ConfusionMatrix(k)
    return ConfusionMatrix(k, cm.counts + counts)


def _tp_fp_fn(cm: ConfusionMatrix):
    c = cm.counts
    tp = np.diag(c)
    return tp, c.sum(axis=0) - tp, c.sum(axis=1) - tp


def _ratios(num, den, classes):
    """Per-class num/den with None where den == 0; mean over the defined ones."""
    per = [None if den[i] == 0 else float(num[i] / den[i]) for i in range(len(num))]
    used = [per[i] for i in classes if per[i] is not None]
    return per, (float(np.mean(used)) if used else None)


def miou(cm: ConfusionMatrix, classes: Optional[Sequence[int]] = None):
    """Per-class IoU (None for classes absent from both prediction and truth) and their mean."""
    classes = range(cm.k) if classes is None else classes
    tp, fp, fn = _tp_fp_fn(cm)
    per, mean = _ratios(tp, tp + fp + fn, classes)
    if mean is None:
        raise ValueError("no class has a nonzero IoU denominator")
    return per, mean


def overall_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts) / cm.total)


def aux_metrics(cm: ConfusionMatrix, classes: Optional[Sequence[int]] = None) -> dict:
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    classes = range(cm.k) if classes is None else classes
    tp, fp, fn = _tp_fp_fn(cm)
    acc, macc = _ratios(tp, tp + fn, classes)
    prec, mprec = _ratios(tp, tp + fp, classes)
    dice, mdice = _ratios(2 * tp, 2 * tp + fp + fn, classes)
    return {"accuracy": acc, "mean_accuracy": macc, "precision": prec, "mean_precision": mprec,
            "dice": dice, "mdice": mdice}


@dataclass
class MetricsReport:
    iou: list
    miou: float
    accuracy: list
    mean_accuracy: float
    precision: list
    mean_precision: float
    dice: list
    mdice: float
    oa: float
    step: int = 0
    wall_time: float = 0.0
    classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def metrics_report(cm: ConfusionMatrix, background: Optional[int] = None, step: int = 0,
                   wall_time: float = 0.0) -> MetricsReport:
    """Every metric from one confusion matrix. A declared background class is left out of the means
    and its per-class entries are reported as None."""
    classes = [c for c in range(cm.k) if c != background]
    iou, mean_iou = miou(cm, classes)
    aux = aux_metrics(cm, classes)
    if background is not None:
        for values in (iou, aux["accuracy"], aux["precision"], aux["dice"]):
            values[background] = None
    return MetricsReport(iou=iou, miou=mean_iou, oa=overall_accuracy(cm), step=step,
                         wall_time=wall_time, classes=classes, **aux)
