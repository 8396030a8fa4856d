"""Evaluation machinery: APFD, active-learning selection, paired statistics."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import DataError, write_text_atomic
from .prioritize import Ranking

EXACT_WILCOXON_MAX_N = 25


@dataclass(frozen=True)
class ApfdResult:
    apfd: float
    n_tests: int
    n_faults: int


@dataclass(frozen=True)
class StatResult:
    approach_a: str
    approach_b: str
    p_value: float
    p_value_bonferroni: float
    a12: float
    n_pairs: int


def apfd(ranking: Ranking, misclassified) -> ApfdResult:
    """Average Percentage Faults Detected for a ranking.

    Each misclassified test counts as one unique fault, detected exactly
    by its own test: APFD = 1 - sum(TF) / (N * M) + 1 / (2N).
    """
    misclassified = np.asarray(misclassified, dtype=bool)
    n = len(ranking)
    if len(misclassified) != n:
        raise DataError("ranking / misclassification length mismatch")
    m = int(misclassified.sum())
    if m == 0:
        raise DataError("APFD undefined: no misclassified tests")
    positions = np.empty(n, dtype=np.int64)
    positions[ranking.order] = np.arange(1, n + 1)  # 1-based rank per test
    tf_sum = int(positions[misclassified].sum())
    return ApfdResult(1.0 - tf_sum / (n * m) + 1.0 / (2 * n), n, m)


def select_active(ranking: Ranking, fraction: float) -> np.ndarray:
    """The ceil(fraction * N) highest-priority test indices, in rank order."""
    if not 0 < fraction <= 1:
        raise DataError("fraction must be in (0, 1]")
    count = math.ceil(fraction * len(ranking))
    return ranking.order[:count].copy()


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped; tied absolute differences receive
    average ranks. The exact null distribution is used for up to
    25 remaining pairs, a normal approximation with continuity and tie
    correction above that. All differences zero yields p = 1 (flagged
    with a warning).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("paired samples must be 1-D and equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        warnings.warn("all paired differences are zero; p = 1 by convention")
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        return float(_exact_two_sided(ranks, w_plus))
    return float(_normal_two_sided(ranks, w_plus))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    # doubled average ranks are integers; count sign assignments by their
    # doubled rank-sum with a subset-sum table (counts stay below 2^53)
    r2 = np.rint(2 * ranks).astype(np.int64)
    total = int(r2.sum())
    table = np.zeros(total + 1)
    table[0] = 1.0
    for r in r2:
        table[r:] += table[:total + 1 - r]
    w2 = int(round(2 * w_plus))
    denom = 2.0 ** len(ranks)
    p_ge = table[w2:].sum() / denom
    p_le = table[:w2 + 1].sum() / denom
    return min(1.0, 2.0 * min(p_ge, p_le))


def _normal_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    n = len(ranks)
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float(((tie_counts ** 3 - tie_counts) / 48.0).sum())
    if var <= 0:
        return 1.0
    num = w_plus - mu
    num -= 0.5 * np.sign(num)  # continuity correction
    z = abs(num) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def vargha_delaney_a12_paired(x, y) -> float:
    """Paired Vargha-Delaney effect size by pairwise win counting."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) == 0:
        raise DataError("paired samples must be 1-D, equal length, nonempty")
    wins = int((x > y).sum())
    ties = int((x == y).sum())
    return (wins + 0.5 * ties) / len(x)


def bonferroni(p: float, comparisons: int) -> float:
    """Bonferroni-corrected p-value, capped at 1."""
    if not 0 <= p <= 1:
        raise DataError("p-value must lie in [0, 1]")
    if comparisons < 1:
        raise DataError("comparisons must be >= 1")
    return min(1.0, p * comparisons)


def pairwise_stats(per_approach: dict) -> list:
    """All-pairs Wilcoxon + A12 over per-seed result vectors.

    ``per_approach`` maps approach name to an array of per-seed values
    (e.g. APFDs); the Bonferroni factor is the number of pairs.
    """
    names = list(per_approach)
    pairs = list(combinations(names, 2))
    factor = max(1, len(pairs))
    results = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for a, b in pairs:
            xa = np.asarray(per_approach[a], dtype=np.float64)
            xb = np.asarray(per_approach[b], dtype=np.float64)
            p = wilcoxon_signed_rank(xa, xb)
            results.append(StatResult(a, b, p, bonferroni(p, factor),
                                      vargha_delaney_a12_paired(xa, xb),
                                      len(xa)))
    return results


def export_stats_csv(path, results) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["approach_a", "approach_b", "p", "p_bonferroni", "a12"])
    for r in results:
        writer.writerow([r.approach_a, r.approach_b, repr(float(r.p_value)),
                         repr(float(r.p_value_bonferroni)),
                         repr(float(r.a12))])
    write_text_atomic(path, buf.getvalue())
