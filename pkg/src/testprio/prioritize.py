"""Test orderings from coverage profiles or scalar scores: CTM, CAM, raw score.

All ties are broken by ascending original test index, so reruns are
deterministic.
"""
from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass

import numpy as np

from .core import DataError, write_text_atomic
from .coverage import POPCOUNT8, CoverageProfile


@dataclass(frozen=True)
class Ranking:
    """A permutation of test indices (position 0 runs first) plus the
    per-test scores the order was derived from."""

    order: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if sorted(order.tolist()) != list(range(len(order))):
            raise DataError("order is not a permutation")
        if len(scores) != len(order):
            raise DataError("scores / order length mismatch")
        object.__setattr__(self, "order", order)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.order)


def score_order(scores) -> Ranking:
    """Rank tests by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise DataError("NaN score")
    order = np.argsort(-scores, kind="stable")
    return Ranking(order, scores)


def ctm_order(profile: CoverageProfile) -> Ranking:
    """Rank tests by descending total-coverage ratio."""
    if profile.n_rows == 0:
        raise DataError("empty profile")
    ratios = profile.row_counts() / profile.n_targets
    return Ranking(np.argsort(-ratios, kind="stable"), ratios)


def cam_order(profile: CoverageProfile) -> Ranking:
    """Greedy additional-coverage ordering.

    Each step picks the test covering the most previously uncovered
    targets (ties by ascending index). Once no test adds new coverage,
    the remainder is appended in CTM order with gain 0. Implemented as
    lazy greedy: marginal gains only ever shrink, so a stale heap entry
    re-inserted with its refreshed gain preserves the exact argmax.
    """
    if profile.n_rows == 0:
        raise DataError("empty profile")
    packed = profile.packed
    n = profile.n_rows
    counts = profile.row_counts()
    covered = np.zeros(packed.shape[1], dtype=np.uint8)

    heap = [(-counts[i], i) for i in range(n)]
    heapq.heapify(heap)
    order = []
    gains = np.zeros(n)
    selected = np.zeros(n, dtype=bool)
    while heap:
        neg_gain, i = heapq.heappop(heap)
        if -neg_gain <= 0:
            break
        fresh = int(POPCOUNT8[packed[i] & ~covered].sum())
        if fresh != -neg_gain:
            if fresh > 0:
                heapq.heappush(heap, (-fresh, i))
            continue
        order.append(i)
        gains[i] = fresh
        selected[i] = True
        covered |= packed[i]

    if not selected.all():
        remaining = np.flatnonzero(~selected)
        ratios = counts[remaining] / profile.n_targets
        tail = remaining[np.argsort(-ratios, kind="stable")]
        order.extend(tail.tolist())
    return Ranking(np.array(order, dtype=np.int64), gains)


def export_ranking_csv(path, ranking: Ranking) -> None:
    """Write (rank, test_index, score) rows as RFC-4180 CSV."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["rank", "test_index", "score"])
    for rank, idx in enumerate(ranking.order):
        writer.writerow([rank, int(idx), repr(float(ranking.scores[idx]))])
    write_text_atomic(path, buf.getvalue())


def load_ranking_csv(path) -> Ranking:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    order = np.array([int(r["test_index"]) for r in rows], dtype=np.int64)
    scores = np.zeros(len(rows))
    for r in rows:
        scores[int(r["test_index"])] = float(r["score"])
    return Ranking(order, scores)
