"""Weighted fusion of prediction sets, leave-one-out fusion weights, greedy
ensemble growth and segmented inference."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import global_pool, segment_pool
from .metrics import PredictionSet, evaluate, gap_at_k
from .parallel import map_ordered
from .rng import stream

logger = logging.getLogger(__name__)

Metric = Callable[[PredictionSet], float]


class AlignmentError(ValueError):
    pass


def _check_aligned(members: Sequence[PredictionSet]) -> None:
    if not members:
        raise AlignmentError("no members to fuse")
    first = members[0]
    for m, other in enumerate(members[1:], start=1):
        if other.num_classes != first.num_classes:
            raise AlignmentError(f"member {m} has {other.num_classes} classes, member 0 has {first.num_classes}")
        if len(other.ids) != len(first.ids):
            raise AlignmentError(f"member {m} has {len(other.ids)} videos, member 0 has {len(first.ids)}")
        for i, (a, b) in enumerate(zip(first.ids, other.ids)):
            if a != b:
                raise AlignmentError(f"member {m} row {i}: id {b!r} != {a!r}")


def _fingerprint(scores: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(scores).tobytes()).hexdigest()


def fuse(members: Sequence[PredictionSet], weights: Sequence[float]) -> PredictionSet:
    """Per-class weighted sum of member confidences.

    Evaluated as ``anchor + sum_m w_m (conf_m - anchor)`` with the
    highest-weight member as anchor, over members in a canonical order. The
    result therefore depends only on the multiset of (weight, member) pairs,
    is exact for identical members and exact for one-hot weights.
    """
    members = list(members)
    _check_aligned(members)
    weights = [float(w) for w in weights]
    if len(weights) != len(members):
        raise ValueError(f"{len(weights)} weights for {len(members)} members")
    if abs(sum(weights) - 1.0) > 1e-6:
        raise ValueError(f"fusion weights must sum to 1, got {sum(weights)}")
    order = sorted(range(len(members)), key=lambda m: (-weights[m], _fingerprint(members[m].scores)))
    anchor = members[order[0]].scores
    out = anchor.copy()
    for m in order[1:]:
        if weights[m] != 0.0:
            out += weights[m] * (members[m].scores - anchor)
    first = members[0]
    return PredictionSet(list(first.ids), out, [list(l) for l in first.labels])


def equal_fusion(members: Sequence[PredictionSet]) -> PredictionSet:
    return fuse(members, [1.0 / len(members)] * len(members))


def weights_from_gains(gains: Sequence[float]) -> tuple[list, bool]:
    """Clamp metric gains at zero and normalise; all-zero falls back to equal weights.

    Returns ``(weights, fell_back)``.
    """
    clamped = [max(float(g), 0.0) for g in gains]
    total = sum(clamped)
    if total <= 0.0:
        logger.warning("every member's leave-one-out gain is <= 0; using equal weights")
        return [1.0 / len(clamped)] * len(clamped), True
    return [g / total for g in clamped], False


@dataclass
class EnsembleReport:
    """Leave-one-out analysis of an ensemble.

    ``drops[m]`` is ``s_{M-m} - s_M`` (negative when removing ``m`` hurts);
    ``weights[m]`` is proportional to ``max(-drops[m], 0)``.
    """

    names: list
    baseline: float
    without: list
    drops: list
    weights: list
    fell_back: bool = False
    member_metrics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        rows = []
        for i, name in enumerate(self.names):
            row = {"name": name, "weight": self.weights[i], "drop": self.drops[i], "score_without": self.without[i]}
            if self.member_metrics:
                row.update({k.upper() if k != "map" else "mAP": v for k, v in self.member_metrics[i].items()})
            rows.append(row)
        return {"baseline": self.baseline, "fell_back": self.fell_back, "models": rows}


def leave_one_out_weights(
    members: Sequence[PredictionSet],
    names: Optional[Sequence[str]] = None,
    metric: Metric = gap_at_k,
    with_member_metrics: bool = False,
    workers: Optional[int] = None,
) -> EnsembleReport:
    """Fusion weights from the metric drop observed when each member is left out
    of an equal-weight fusion."""
    members = list(members)
    if len(members) < 2:
        raise ValueError("leave-one-out weighting needs at least two members")
    _check_aligned(members)
    names = list(names) if names is not None else [f"model{i}" for i in range(len(members))]
    # the |M| + 1 fusions are independent; results come back in member order
    subsets = [members] + [members[:m] + members[m + 1 :] for m in range(len(members))]
    scores = map_ordered(lambda sub: metric(equal_fusion(sub)), subsets, workers)
    baseline, without = scores[0], scores[1:]
    drops = [s - baseline for s in without]
    weights, fell_back = weights_from_gains([-d for d in drops])
    member_metrics = []
    if with_member_metrics:
        member_metrics = [evaluate(p).as_dict() for p in members]
    return EnsembleReport(names, baseline, without, drops, weights, fell_back, member_metrics)


@dataclass
class GrowResult:
    selected: list
    weights: list
    score: float
    trace: list


def greedy_grow(
    pool: dict,
    metric: Metric = gap_at_k,
    group_size: int = 2,
    max_rounds: int = 50,
    patience: int = 3,
    seed: int = 0,
) -> GrowResult:
    """Grow an ensemble by random groups, keeping a group only if the
    leave-one-out-weighted fusion improves ``metric``.

    Each round draws ``group_size`` untried models from ``pool`` (name ->
    PredictionSet), recomputes leave-one-out weights for the enlarged set,
    drops members whose weight clamps to zero and keeps the result if its
    score beats the best so far. Stops when the pool is exhausted, after
    ``max_rounds`` rounds, or after ``patience`` consecutive rounds without
    improvement. Tried groups are not redrawn.
    """
    if not pool:
        raise ValueError("empty model pool")
    rng = stream(seed, "greedy_grow")
    remaining = list(pool)
    selected: list = []
    weights: list = []
    best = -np.inf
    trace = []
    stale = 0
    for rnd in range(max_rounds):
        if not remaining or stale >= patience:
            break
        take = min(group_size, len(remaining))
        picks = sorted(rng.choice(len(remaining), size=take, replace=False).tolist())
        group = [remaining[i] for i in picks]
        remaining = [n for i, n in enumerate(remaining) if i not in picks]

        candidate = selected + group
        if len(candidate) == 1:
            kept, kept_w = candidate, [1.0]
        else:
            report = leave_one_out_weights([pool[n] for n in candidate], candidate, metric)
            kept = [n for n, w in zip(candidate, report.weights) if w > 0]
            kept_w = [w for w in report.weights if w > 0]
            total = sum(kept_w)
            kept_w = [w / total for w in kept_w]
        score = metric(fuse([pool[n] for n in kept], kept_w))
        accepted = score > best
        trace.append({"round": rnd, "added": group, "kept": kept, "score": score, "accepted": accepted})
        if accepted:
            selected, weights, best, stale = kept, kept_w, score, 0
        else:
            stale += 1
    return GrowResult(selected, weights, float(best), trace)


# ---------------------------------------------------------------------------
# segmented inference

DEFAULT_SEGMENT_WEIGHTS = (0.1, 0.1, 0.1, 0.7)


def segment_features(frames: np.ndarray, N: int = 3) -> np.ndarray:
    """Rows: the ``N`` l2-normalised segment means, then the global mean."""
    return np.vstack([segment_pool(frames, N), global_pool(frames)[None, :]])


def segmented_inference(
    model: Callable[[np.ndarray], np.ndarray],
    frames: np.ndarray,
    N: int = 3,
    weights: Sequence[float] = DEFAULT_SEGMENT_WEIGHTS,
) -> np.ndarray:
    """Weighted merge of a video-level model's predictions on segment means and
    on the global mean, in the order (seg1..segN, global).

    ``model`` maps a ``1 x d`` feature matrix to ``1 x C`` confidences. Each
    distinct feature row is evaluated once on its own, so coinciding features
    give bit-identical predictions and a constant-frame video returns exactly
    the plain prediction.
    """
    weights = [float(w) for w in weights]
    if len(weights) != N + 1:
        raise ValueError(f"need {N + 1} weights for {N} segments plus the global mean")
    if abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError(f"segment weights must sum to 1, got {sum(weights)}")
    feats = segment_features(frames, N)
    cache: dict = {}
    preds = []
    for row in feats:
        key = row.tobytes()
        if key not in cache:
            cache[key] = np.asarray(model(row[None, :]), dtype=np.float64)[0]
        preds.append(cache[key])
    anchor = int(np.argmax(weights[::-1]))
    anchor = len(weights) - 1 - anchor  # prefer the global row on ties
    out = preds[anchor].copy()
    for i, (w, p) in enumerate(zip(weights, preds)):
        if i != anchor and w != 0.0:
            out += w * (p - preds[anchor])
    return out


def segmented_predict(model, frame_examples, N: int = 3, weights=DEFAULT_SEGMENT_WEIGHTS) -> np.ndarray:
    return np.stack([segmented_inference(model, e.frames, N, weights) for e in frame_examples])

