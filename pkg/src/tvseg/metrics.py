"""Segmentation quality metrics: global accuracy, mean IoU over an
aggregated confusion matrix, and the regularization-effect score RE.

RE is 100/(N1*N2) times the summed Euclidean magnitude of the discrete
gradient of the segmentation.  By default the gradient is taken of the raw
class-index map (``label_index``), which makes the score depend on how
classes are numbered; ``one_hot`` instead sums the scores of the per-class
binary maps and is invariant under relabeling.  Lower RE means smoother
boundaries and fewer isolated regions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import dual_norms, grad

CSV_HEADER = "model,noise_kind,level,miou,accuracy,re"


@dataclass
class MetricsRow:
    """One line of a sweep result table."""

    model: str
    noise_kind: str
    level: float
    miou: float
    accuracy: float
    re: float

    def to_csv_row(self) -> str:
        return (f"{self.model},{self.noise_kind},{self.level:g},"
                f"{self.miou:.6f},{self.accuracy:.6f},{self.re:.6f}")


def _check_same_shape(pred, truth):
    if pred.shape != truth.shape:
        raise ValueError(f"label maps differ in shape: {pred.shape} vs {truth.shape}")


def global_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Percentage of pixels labeled correctly."""
    _check_same_shape(pred, truth)
    return 100.0 * float((pred == truth).mean())


def confusion_matrix(pred: np.ndarray, truth: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """(C, C) count matrix indexed [true class, predicted class]."""
    _check_same_shape(pred, truth)
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def accuracy_from_confusion(conf: np.ndarray) -> float:
    return 100.0 * float(np.trace(conf)) / float(conf.sum())


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean IoU over classes that occur in truth or prediction."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    present = union > 0
    return 100.0 * float((tp[present] / union[present]).mean())


def miou(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    return miou_from_confusion(confusion_matrix(pred, truth, num_classes))


def regularization_effect(u: np.ndarray, mode: str = "label_index") -> float:
    """RE score of a segmentation (a label map or a single-channel field)."""
    u = np.asarray(u)
    if u.ndim == 3:
        if u.shape[0] != 1:
            raise ValueError(f"expected a single-channel field, got shape {u.shape}")
        field = u.astype(np.float64)
    elif u.ndim == 2:
        field = u.astype(np.float64)[None]
    else:
        raise ValueError(f"expected a 2-D label map or (1, N1, N2) field, got {u.shape}")
    n1, n2 = field.shape[1:]
    if mode == "label_index":
        total = float(dual_norms(grad(field)).sum())
    elif mode == "one_hot":
        if not np.issubdtype(u.dtype, np.integer):
            raise ValueError("one_hot mode needs an integer label map")
        total = 0.0
        for cls in np.unique(field):
            binary = (field == cls).astype(np.float64)
            total += float(dual_norms(grad(binary)).sum())
    else:
        raise ValueError(f"mode must be 'label_index' or 'one_hot', got {mode!r}")
    return 100.0 * total / (n1 * n2)
