"""Confusion matrices and unweighted average recall."""

from __future__ import annotations

import numpy as np

from .errors import EmptyClass


def confusion_matrix(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    return np.bincount(y_true * n_classes + y_pred, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )


def recalls(confusion) -> np.ndarray:
    c = np.asarray(confusion, dtype=np.float64)
    support = c.sum(axis=1)
    if np.any(support == 0):
        missing = np.flatnonzero(support == 0).tolist()
        raise EmptyClass(f"no samples of true class {missing}")
    return np.diag(c) / support


def uar(confusion) -> float:
    """Mean of the per-class recalls."""
    return float(recalls(confusion).mean())


def uar_present(confusion) -> float:
    """UAR over the classes that actually occur; used for model selection."""
    c = np.asarray(confusion, dtype=np.float64)
    support = c.sum(axis=1)
    present = support > 0
    if not present.any():
        raise EmptyClass("empty confusion matrix")
    return float((np.diag(c)[present] / support[present]).mean())
