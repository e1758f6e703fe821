"""Evaluation measures: multiclass log loss, accuracy, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

PROB_CLIP = 1e-15


@dataclass
class PredictionBatch:
    probs: np.ndarray   # (N, M) rows summing to 1
    labels: np.ndarray  # (N,) true class indices


def log_loss(probs, labels) -> float:
    """-(1/N) sum_i ln rho_{i, y_i}, natural log, probabilities clipped to
    [1e-15, 1 - 1e-15] before the logarithm."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or labels.shape[0] != probs.shape[0]:
        raise ShapeMismatch(f"probs {probs.shape} vs labels {labels.shape}")
    picked = probs[np.arange(probs.shape[0]), labels]
    picked = np.clip(picked, PROB_CLIP, 1.0 - PROB_CLIP)
    return float(-np.log(picked).mean())


def accuracy(probs, labels) -> float:
    """Fraction of samples whose argmax matches the label (ties -> lowest index)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    return float((probs.argmax(axis=1) == labels).mean())


def confusion(probs, labels, n_classes=9) -> np.ndarray:
    """Counts indexed [true, predicted]; argmax ties go to the lowest class."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    predicted = probs.argmax(axis=1)
    matrix = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predicted), 1)
    return matrix
