"""Confusion-matrix metrics and evaluation over scene lists.

Rows of the 3x3 matrix are ground truth, columns are predictions.  Balanced
accuracy averages per-class recall over classes that actually occur in the
ground truth; mean IoU averages over classes present in either ground truth
or prediction.  Percentages in reports carry two decimals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

N_CLASSES = 3


def new_confusion() -> np.ndarray:
    return np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    flat = gt.astype(np.int64).ravel() * N_CLASSES + pred.astype(np.int64).ravel()
    cm += np.bincount(flat, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)
    return cm


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def balanced_accuracy(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    gt_counts = cm.sum(axis=1)
    present = gt_counts > 0
    recalls = np.diag(cm)[present] / gt_counts[present]
    return float(recalls.mean())


def mean_iou(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    gt = cm.sum(axis=1)
    pred = cm.sum(axis=0)
    present = (gt + pred) > 0
    inter = np.diag(cm)[present]
    union = (gt + pred)[present] - inter
    return float((inter / union).mean())


@dataclass
class EvalReport:
    name: str
    n_images: int
    confusion: np.ndarray
    accuracy: float
    balanced_accuracy: float
    mean_iou: float
    cost: dict | None = None
    sec_per_image: float = 0.0

    def metrics_dict(self):
        """Deterministic part of the report (no wall-clock fields)."""
        d = {
            "name": self.name,
            "n_images": self.n_images,
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "mean_iou": self.mean_iou,
            "accuracy_pct": round(100 * self.accuracy, 2),
            "balanced_accuracy_pct": round(100 * self.balanced_accuracy, 2),
            "mean_iou_pct": round(100 * self.mean_iou, 2),
        }
        if self.cost is not None:
            d["cost"] = self.cost
        return d

    @staticmethod
    def csv_header():
        return "name,n_images,accuracy_pct,balanced_accuracy_pct,mean_iou_pct"

    def csv_row(self):
        return "%s,%d,%.2f,%.2f,%.2f" % (
            self.name, self.n_images, 100 * self.accuracy,
            100 * self.balanced_accuracy, 100 * self.mean_iou)


def evaluate(predict_fn, scenes, name="model", cost: dict | None = None) -> EvalReport:
    """Run ``predict_fn(image) -> mask`` over scenes and pool the confusion."""
    if not scenes:
        raise ValueError("no scenes to evaluate")
    cm = new_confusion()
    t0 = time.perf_counter()
    for sc in scenes:
        accumulate(cm, predict_fn(sc.image), sc.mask)
    elapsed = time.perf_counter() - t0
    return EvalReport(
        name=name,
        n_images=len(scenes),
        confusion=cm,
        accuracy=accuracy(cm),
        balanced_accuracy=balanced_accuracy(cm),
        mean_iou=mean_iou(cm),
        cost=cost,
        sec_per_image=elapsed / len(scenes),
    )


def evaluate_model(model, scenes, adapters=None, name="model") -> EvalReport:
    cost = model.count_costs(adapters=adapters, input_hw=scenes[0].image.shape).as_dict() \
        if scenes else None
    return evaluate(lambda img: model.predict(img[None], adapters=adapters)[0],
                    scenes, name=name, cost=cost)


def model_balanced_accuracy(model, scenes, adapters=None, batch=16) -> float:
    """Batched BA evaluation (faster than evaluate(); no timing/cost)."""
    cm = new_confusion()
    for i in range(0, len(scenes), batch):
        chunk = scenes[i:i + batch]
        imgs = np.stack([s.image for s in chunk])
        preds = model.predict(imgs, adapters=adapters)
        for p, s in zip(preds, chunk):
            accumulate(cm, p, s.mask)
    return balanced_accuracy(cm)
