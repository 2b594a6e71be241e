"""Prediction quality and calibration metrics.

All metrics consume (probs [S,K], labels [S]) numpy arrays and compute in
float64.  Confidence is the max class probability; binning for calibration
uses equal-width bins, right edge inclusive, with the lowest bin also
closed on the left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-8


def _validate(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"probs must be a non-empty [S,K] array, got {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels must be one integer per prediction row")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label outside class range")
    return probs, labels


def error_rate(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 error in percent."""
    probs, labels = _validate(probs, labels)
    correct = probs.argmax(axis=1) == labels
    return float(100.0 * (1.0 - correct.mean()))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true class, log floored."""
    probs, labels = _validate(probs, labels)
    p_true = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p_true, LOG_FLOOR)).mean())


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean multi-class Brier score: sum_k (p_k - onehot_k)^2, range [0,2]."""
    probs, labels = _validate(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(((probs - onehot) ** 2).sum(axis=1).mean())


def _bin_index(conf: np.ndarray, num_bins: int, lo: float, hi: float) -> np.ndarray:
    width = (hi - lo) / num_bins
    # tiny shift keeps values that land exactly on an edge in the lower bin
    idx = np.ceil((conf - lo) / width - 1e-12).astype(int) - 1
    return np.clip(idx, 0, num_bins - 1)


@dataclass
class ReliabilityBin:
    bin_low: float
    bin_high: float
    count: int
    mean_confidence: float
    accuracy: float


def reliability_bins(
    probs: np.ndarray,
    labels: np.ndarray,
    num_bins: int = 10,
    conf_range: tuple[float, float] = (0.0, 1.0),
) -> list[ReliabilityBin]:
    """Equal-width confidence bins over conf_range.

    Records with confidence outside the range are dropped, which supports
    zoomed diagrams over a sub-interval.  Empty bins are reported with
    count 0 and zero statistics.
    """
    probs, labels = _validate(probs, labels)
    lo, hi = conf_range
    if not lo < hi:
        raise ValueError(f"bad confidence range {conf_range}")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    inside = (conf >= lo) & (conf <= hi)
    conf, correct = conf[inside], correct[inside]
    idx = _bin_index(conf, num_bins, lo, hi) if len(conf) else np.zeros(0, dtype=int)
    width = (hi - lo) / num_bins
    bins = []
    for b in range(num_bins):
        mask = idx == b
        count = int(mask.sum())
        bins.append(
            ReliabilityBin(
                bin_low=lo + b * width,
                bin_high=lo + (b + 1) * width,
                count=count,
                mean_confidence=float(conf[mask].mean()) if count else 0.0,
                accuracy=float(correct[mask].mean()) if count else 0.0,
            )
        )
    return bins


def ece(probs: np.ndarray, labels: np.ndarray, num_bins: int = 10) -> float:
    """Expected calibration error in percent, equal-width bins on [0,1]."""
    probs, labels = _validate(probs, labels)
    total = probs.shape[0]
    bins = reliability_bins(probs, labels, num_bins=num_bins, conf_range=(0.0, 1.0))
    err = 0.0
    for b in bins:
        if b.count:
            err += (b.count / total) * abs(b.accuracy - b.mean_confidence)
    return float(err * 100.0)


def summarize(probs: np.ndarray, labels: np.ndarray, num_bins: int = 10) -> dict:
    return {
        "error_rate": error_rate(probs, labels),
        "accuracy": 100.0 - error_rate(probs, labels),
        "ece": ece(probs, labels, num_bins=num_bins),
        "brier": brier(probs, labels),
        "nll": nll(probs, labels),
        "n_samples": int(len(labels)),
    }
