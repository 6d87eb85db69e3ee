"""Threshold-based detection metrics: confusion counts, AP, ROC-AUC, Ano-AUC
and temporal mAP at IoU thresholds.

A prediction is positive when its score is greater than or equal to the
threshold. Scores that tie share a single threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError, UndefinedMetricError

DEFAULT_IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass(frozen=True)
class ScoredItem:
    score: float
    label: int
    class_name: str | None = None
    span: tuple | None = None
    video_label: int | None = None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores vs {y.size} labels")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y


def items_to_arrays(items: Sequence[ScoredItem]):
    return (
        np.array([it.score for it in items], dtype=np.float64),
        np.array([it.label for it in items], dtype=np.int64),
    )


def confusion_at(scores, labels, theta: float) -> ConfusionCounts:
    s, y = _arrays(scores, labels)
    pred = s >= theta
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pos & pred)),
        tn=int(np.sum(~pos & ~pred)),
        fp=int(np.sum(~pos & pred)),
        fn=int(np.sum(pos & ~pred)),
    )


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    """Precision and recall; an empty denominator gives precision 1, recall 0."""
    issued = counts.tp + counts.fp
    actual = counts.tp + counts.fn
    p = counts.tp / issued if issued else 1.0
    r = counts.tp / actual if actual else 0.0
    return p, r


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative (TP, FP) at each distinct score, thresholds descending."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    return s_sorted[last], tp[last], fp[last]


def average_precision(scores, labels, n_positives: int | None = None) -> float:
    """Step-sum of (recall increment) x precision over the distinct scores.

    ``n_positives`` overrides the recall denominator, which lets missed
    ground truth (never scored) count against recall.
    """
    s, y = _arrays(scores, labels)
    total = int(y.sum()) if n_positives is None else int(n_positives)
    if total <= 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    if s.size == 0:
        return 0.0
    _, tp, fp = _threshold_counts(s, y)
    terms = []
    prev_r = 0.0
    for t, f in zip(tp.tolist(), fp.tolist()):
        r = t / total
        p = t / (t + f)
        terms.append((r - prev_r) * p)
        prev_r = r
    return math.fsum(terms)


def _both_classes(y: np.ndarray, what: str):
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"{what} needs both positive and negative items")
    return n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve traced over the distinct scores."""
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _both_classes(y, "AUC")
    _, tp, fp = _threshold_counts(s, y)
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def rank_statistic(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties counting 1/2."""
    s, y = _arrays(scores, labels)
    n_pos, n_neg = _both_classes(y, "rank statistic")
    neg = np.sort(s[y == 0])
    pos = s[y == 1]
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    wins = int(below.sum()) * 2 + int(tied.sum())
    return wins / (2.0 * n_pos * n_neg)


def ano_auc(scores, labels, video_labels=None, restrict: bool = True) -> float:
    """Pairwise anomalous-vs-normal ranking restricted to anomalous videos.

    With ``restrict`` set and ``video_labels`` given, only frames belonging to
    videos labelled anomalous take part.
    """
    s, y = _arrays(scores, labels)
    if restrict and video_labels is not None:
        keep = np.asarray(video_labels).ravel() == 1
        if keep.shape != s.shape:
            raise ShapeError("video_labels must align with scores")
        s, y = s[keep], y[keep]
    return rank_statistic(s, y)


# ---------------------------------------------------------------------------
# temporal segments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TemporalSegment:
    start: int
    end: int  # exclusive
    class_name: str
    score: float = 1.0
    video: str = ""

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"segment start {self.start} must precede end {self.end}")


def segment_iou(a: TemporalSegment, b: TemporalSegment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def segments_from_scores(frame_scores, frame_classes, theta: float, video: str = "") -> list:
    """Maximal runs of frames scoring at least ``theta`` with one class."""
    scores = list(map(float, frame_scores))
    classes = list(frame_classes)
    if len(scores) != len(classes):
        raise ShapeError(f"{len(scores)} frame scores vs {len(classes)} frame classes")
    segs = []
    start = None
    for t in range(len(scores) + 1):
        active = t < len(scores) and scores[t] >= theta
        if start is not None and (not active or classes[t] != classes[start]):
            segs.append(
                TemporalSegment(start, t, classes[start], float(np.mean(scores[start:t])), video)
            )
            start = None
        if active and start is None:
            start = t
    return segs


def match_segments(pred: list, gt: list, iou_threshold: float) -> tuple:
    """Greedy one-to-one matching in score order; returns a hit flag per prediction
    (in the sorted order) together with that order.

    Predictions are visited by descending score, earlier start first on ties.
    Each claims the unmatched ground truth of the same video with the highest
    IoU, provided it reaches the threshold.
    """
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].score, pred[i].video, pred[i].start, i))
    used = [False] * len(gt)
    hits = []
    for i in order:
        p = pred[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(gt):
            if used[j] or g.video != p.video:
                continue
            iou = segment_iou(p, g)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[best] = True
        hits.append(best >= 0)
    return [pred[i] for i in order], hits




def map_at_iou(pred: list, gt: list, iou_thresholds=DEFAULT_IOU_THRESHOLDS) -> dict:
    """Class-averaged temporal AP per IoU threshold plus their mean under ``"avg"``.

    Classes are those present in the ground truth; a class without
    predictions scores 0.
    """
    classes = sorted({g.class_name for g in gt})
    result = {}
    for th in iou_thresholds:
        aps = []
        for c in classes:
            g_c = [g for g in gt if g.class_name == c]
            p_c = [p for p in pred if p.class_name == c]
            if not p_c:
                aps.append(0.0)
                continue
            ranked, hits = match_segments(p_c, g_c, th)
            aps.append(
                average_precision(
                    [p.score for p in ranked], np.array(hits, dtype=np.int64), n_positives=len(g_c)
                )
            )
        result[th] = float(np.mean(aps)) if aps else 0.0
    result["avg"] = float(np.mean([result[th] for th in iou_thresholds]))
    return result
