"""Binarization, confusion counting and segmentation quality metrics."""

from dataclasses import dataclass

import numpy as np

from .image import ShapeError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    f1: float
    accuracy: float
    precision: float
    recall: float
    degenerate: tuple = ()


def binarize(p, threshold=0.5):
    """Probability map to mask: pixel is vessel iff p >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(p, dtype=np.float64) >= threshold).astype(np.uint8)


def confusion(pred, truth, fov=None):
    """Count tp/fp/fn/tn, optionally restricted to fov == 1 pixels."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} dims differ")
    p = pred.astype(bool)
    t = truth.astype(bool)
    if fov is not None:
        fov = np.asarray(fov)
        if fov.shape != pred.shape:
            raise ShapeError(f"fov {fov.shape} does not match prediction {pred.shape}")
        keep = fov.astype(bool)
        p, t = p[keep], t[keep]
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
    )


def compute_metrics(c):
    """F1/accuracy/precision/recall from counts; 0/0 ratios report 0 + flag."""
    if c.total <= 0:
        raise ValueError("no pixels to evaluate")
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1")
    accuracy = (c.tp + c.tn) / c.total
    return MetricsReport(
        f1=f1, accuracy=accuracy, precision=precision, recall=recall,
        degenerate=tuple(degenerate),
    )


def metrics_payload(report, counts):
    """JSON-ready dict combining a report with its raw counts."""
    return {
        "f1": report.f1,
        "accuracy": report.accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "tp": counts.tp,
        "fp": counts.fp,
        "fn": counts.fn,
        "tn": counts.tn,
        "degenerate_flags": list(report.degenerate),
    }
