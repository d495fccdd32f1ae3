"""GAP@k, mAP and PERR, each with a slow brute-force twin.

Tie-breaking everywhere is deterministic: within a video, equal scores are
ranked by class id ascending; in the global GAP list equal scores are
ranked by (video index, class id) ascending; in per-class mAP rankings by
video index ascending.

The ``oracle_*`` functions recompute everything from scratch with plain
Python sorting and no running counters. They exist to check the fast paths
and are deliberately slow.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    pass


@dataclass
class PredictionSet:
    """Confidences ``scores[i, c]`` for video ``ids[i]`` with ground truth ``labels[i]``."""

    ids: list
    scores: np.ndarray
    labels: list

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.ids):
            raise MetricError(f"scores shape {self.scores.shape} does not match {len(self.ids)} ids")
        if len(self.labels) != len(self.ids):
            raise MetricError("labels and ids differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise MetricError("video ids must be unique")
        if not np.all(np.isfinite(self.scores)):
            raise MetricError("non-finite confidence")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def label_matrix(self) -> np.ndarray:
        y = np.zeros(self.scores.shape, dtype=bool)
        for i, labels in enumerate(self.labels):
            y[i, list(labels)] = True
        return y


@dataclass
class MetricReport:
    gap: float
    map: float
    perr: float
    per_class_ap: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"gap": self.gap, "map": self.map, "perr": self.perr}


def _ranked_within_rows(scores: np.ndarray) -> np.ndarray:
    # stable sort of the negated scores keeps equal scores in ascending column order
    return np.argsort(-scores, axis=1, kind="stable")


def global_list(preds: PredictionSet, k: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Scores and hit flags of the pooled top-k predictions, in global rank order."""
    if k < 1:
        raise MetricError("k must be >= 1")
    n, C = preds.scores.shape
    kk = min(k, C)
    top = _ranked_within_rows(preds.scores)[:, :kk]
    scores = np.take_along_axis(preds.scores, top, axis=1).reshape(-1)
    hits = np.take_along_axis(preds.label_matrix(), top, axis=1).reshape(-1)
    videos = np.repeat(np.arange(n), kk)
    classes = top.reshape(-1)
    order = np.lexsort((classes, videos, -scores))
    return scores[order], hits[order]


def _ap_from_hits(hits: np.ndarray, total_positives: int) -> float:
    """``sum_k k / (rank_k * P)`` over the hit ranks, one rounding per term and an exact sum."""
    ranks = np.flatnonzero(hits) + 1
    counts = np.arange(1, len(ranks) + 1)
    return math.fsum(counts / (ranks * float(total_positives)))


def gap_at_k(preds: PredictionSet, k: int = 20) -> float:
    """Global average precision over each video's top-k predictions.

    The recall denominator counts every ground-truth label, including those a
    video can never fit into its top k.
    """
    total = sum(len(l) for l in preds.labels)
    if total == 0:
        raise MetricError("GAP is undefined when no video has a label")
    _, hits = global_list(preds, k)
    return _ap_from_hits(hits, total)


def mean_ap(preds: PredictionSet) -> tuple[float, np.ndarray]:
    """Unweighted mean of non-interpolated per-class AP.

    Classes with no positive video are excluded from the mean; their entry in
    the returned per-class vector is NaN.
    """
    y = preds.label_matrix()
    positives = y.sum(axis=0)
    if not positives.any():
        raise MetricError("mAP is undefined when no class has a positive")
    order = np.argsort(-preds.scores, axis=0, kind="stable")
    hits = np.take_along_axis(y, order, axis=0)
    per_class = np.array([_ap_from_hits(hits[:, c], p) if p else np.nan for c, p in enumerate(positives)])
    return float(np.nanmean(per_class)), per_class


def perr(preds: PredictionSet) -> float:
    """Mean over labelled videos of precision within the top-n, n = #labels."""
    y = preds.label_matrix()
    ranked = _ranked_within_rows(preds.scores)
    values = []
    for i, labels in enumerate(preds.labels):
        n = len(labels)
        if n == 0:
            continue
        values.append(y[i, ranked[i, :n]].sum() / n)
    return float(np.mean(values)) if values else 0.0


def evaluate(preds: PredictionSet, k: int = 20) -> MetricReport:
    mAP, per_class = mean_ap(preds)
    return MetricReport(gap_at_k(preds, k), mAP, perr(preds), per_class)


# ---------------------------------------------------------------------------
# brute-force oracles


def oracle_ap(entries: Sequence[tuple], total_positives: int) -> float:
    """AP of a list of ``(score, is_hit)`` pairs.

    The list is sorted by score descending with a stable sort (equal scores
    keep their input order). Precision at each hit is recounted from the top of
    the list.
    """
    if total_positives < 1:
        raise MetricError("total_positives must be >= 1")
    ranked = [bool(hit) for _, hit in sorted(entries, key=lambda e: -e[0])]
    ap = 0.0
    for i, hit in enumerate(ranked):
        if hit:
            hits_so_far = ranked[: i + 1].count(True)
            ap += (hits_so_far / (i + 1)) / total_positives
    return ap


def oracle_gap(scores: np.ndarray, labels: Sequence, k: int = 20) -> float:
    entries = []
    for v, row in enumerate(np.asarray(scores).tolist()):
        truth = set(labels[v])
        best = sorted(range(len(row)), key=lambda c: (-row[c], c))[:k]
        entries.extend((row[c], c in truth) for c in best)
    return oracle_ap(entries, sum(len(l) for l in labels))


def oracle_map(scores: np.ndarray, labels: Sequence) -> float:
    rows = np.asarray(scores).tolist()
    aps = []
    for c in range(len(rows[0])):
        entries = [(rows[v][c], c in labels[v]) for v in range(len(rows))]
        positives = sum(1 for _, hit in entries if hit)
        if positives:
            aps.append(oracle_ap(entries, positives))
    return sum(aps) / len(aps)


def oracle_perr(scores: np.ndarray, labels: Sequence) -> float:
    values = []
    for row, truth in zip(np.asarray(scores).tolist(), labels):
        n = len(truth)
        if n:
            best = sorted(range(len(row)), key=lambda c: (-row[c], c))[:n]
            values.append(sum(1 for c in best if c in truth) / n)
    return sum(values) / len(values) if values else 0.0


# ---------------------------------------------------------------------------
# prediction files: CSV rows ``video_id,class_id,score``


def write_predictions(preds: PredictionSet, path, k: int = 20) -> Path:
    path = Path(path)
    ranked = _ranked_within_rows(preds.scores)[:, : min(k, preds.num_classes)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "class_id", "score"])
        for i, vid in enumerate(preds.ids):
            for c in ranked[i]:
                writer.writerow([vid, int(c), repr(float(preds.scores[i, c]))])
    return path


def read_predictions(path, ids: Sequence[str], labels: Sequence, num_classes: int) -> PredictionSet:
    """Load a prediction CSV aligned to ``ids``; unlisted (video, class) pairs score 0."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"prediction file not found: {path}")
    row_of = {vid: i for i, vid in enumerate(ids)}
    scores = np.zeros((len(ids), num_classes))
    seen = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != ["video_id", "class_id", "score"]:
            raise MetricError(f"{path}:1: expected header video_id,class_id,score")
        for lineno, rec in enumerate(reader, start=2):
            try:
                vid, c, s = rec[0], int(rec[1]), float(rec[2])
            except (ValueError, IndexError) as exc:
                raise MetricError(f"{path}:{lineno}: malformed row {rec}") from exc
            if vid not in row_of:
                raise MetricError(f"{path}:{lineno}: unknown video id {vid!r}")
            if not 0 <= c < num_classes:
                raise MetricError(f"{path}:{lineno}: class {c} outside [0, {num_classes})")
            scores[row_of[vid], c] = s
            seen.add(vid)
    missing = [v for v in ids if v not in seen]
    if missing:
        raise MetricError(f"{path}: no predictions for video {missing[0]!r}")
    return PredictionSet(list(ids), scores, [list(l) for l in labels])
