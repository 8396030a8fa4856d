"""Softmax- and dropout-derived uncertainty scores.

All metrics are oriented so that higher values indicate inputs more likely
to be misclassified. Pure functions over immutable inputs.
"""
from __future__ import annotations

import csv
import io

import numpy as np

from .core import SoftmaxMatrix, StochasticPredictionStack, write_text_atomic

METRICS = ("deepgini", "vanilla_softmax", "pcs", "entropy", "mc_dropout")


def deepgini(softmax: SoftmaxMatrix) -> np.ndarray:
    """Gini impurity of the softmax row: 1 - sum of squared likelihoods."""
    v = softmax.values
    return 1.0 - np.sum(v * v, axis=1)


def vanilla_softmax(softmax: SoftmaxMatrix) -> np.ndarray:
    """1 minus the top softmax likelihood."""
    return 1.0 - softmax.values.max(axis=1)


def pcs(softmax: SoftmaxMatrix) -> np.ndarray:
    """1 minus the margin between the top and runner-up likelihoods."""
    v = softmax.values
    top2 = np.partition(v, v.shape[1] - 2, axis=1)[:, -2:]
    return 1.0 - (top2[:, 1] - top2[:, 0])


def entropy(softmax: SoftmaxMatrix) -> np.ndarray:
    """Shannon entropy (natural log) of the softmax row, with 0 ln 0 := 0."""
    v = softmax.values
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(v > 0, v * np.log(v), 0.0)
    return -terms.sum(axis=1)


def mc_dropout_variation_ratio(stack: StochasticPredictionStack) -> np.ndarray:
    """1 minus the fraction of stochastic passes agreeing with the modal class.

    Modal ties are broken by the lowest class index.
    """
    preds = np.argmax(stack.samples, axis=2)  # (T, tests)
    t, n = preds.shape
    n_classes = stack.samples.shape[2]
    scores = np.empty(n)
    for i in range(n):
        counts = np.bincount(preds[:, i], minlength=n_classes)
        scores[i] = 1.0 - counts.max() / t
    return scores


def export_scores_csv(path, scores: np.ndarray) -> None:
    """Write (test_index, score) rows as RFC-4180 CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["test_index", "score"])
    for i, s in enumerate(scores):
        writer.writerow([i, repr(float(s))])
    write_text_atomic(path, buf.getvalue())
