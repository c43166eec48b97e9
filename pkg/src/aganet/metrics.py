"""Frame-level cAP, trigger-based AP/P/R, confusion matrix and PCK."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .stream import NO_ACTION, assign_categories, accumulate

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))
EXTEND_FRAC = 0.2


@dataclass
class MatchResult:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    pairs: list = field(default_factory=list)  # (event, annotation)

    def __iadd__(self, other):
        self.true_positives += other.true_positives
        self.false_positives += other.false_positives
        self.false_negatives += other.false_negatives
        self.pairs.extend(other.pairs)
        return self

    @property
    def precision(self) -> float:
        n = self.true_positives + self.false_positives
        return 1.0 if n == 0 else self.true_positives / n

    @property
    def recall(self) -> float:
        n = self.true_positives + self.false_negatives
        return 0.0 if n == 0 else self.true_positives / n


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


def extended_end(ann, extend_frac: float = EXTEND_FRAC) -> float:
    return ann.end + extend_frac * (ann.end - ann.start)


def match_triggers(events, annotations, extend_frac: float = EXTEND_FRAC) -> MatchResult:
    """Greedy one-to-one matching of trigger events to annotated instances.

    Events are visited in trigger-time order; each takes the earliest
    unmatched annotation of its category whose extended span
    ``[start, end + extend_frac * length)`` contains the trigger frame.
    """
    events = sorted(events, key=lambda e: (e.frame, e.category))
    annotations = sorted(annotations, key=lambda a: (a.start, a.end, a.category))
    used = [False] * len(annotations)
    res = MatchResult()
    for ev in events:
        for i, ann in enumerate(annotations):
            if (not used[i] and ann.category == ev.category
                    and ann.start <= ev.frame < extended_end(ann, extend_frac)):
                used[i] = True
                res.pairs.append((ev, ann))
                res.true_positives += 1
                break
        else:
            res.false_positives += 1
    res.false_negatives = used.count(False)
    return res


def trigger_pr(stream_scores, annotations, threshold: float, params,
               extend_frac: float = EXTEND_FRAC) -> tuple:
    """Pool assign -> accumulate -> match over a dataset at one threshold.

    ``stream_scores`` is a list of stitched (n, C) score arrays and
    ``annotations`` the matching list of annotation lists. Returns
    ``(PRPoint, MatchResult)``.
    """
    if not stream_scores:
        raise ValueError("no streams to evaluate")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    total = MatchResult()
    for scores, anns in zip(stream_scores, annotations, strict=True):
        events = accumulate(assign_categories(scores, threshold), params)
        total += match_triggers(events, anns, extend_frac)
    return PRPoint(threshold, total.precision, total.recall), total


def interpolated_ap(points) -> float:
    """Area under the precision envelope of a set of PR points.

    Points are ordered by recall; precision at each recall level is replaced
    by the highest precision reached at that recall or beyond, and the area
    is the sum of recall increments (from 0) times that precision.
    """
    pts = sorted(((p.recall, p.precision) for p in points))
    if not pts:
        return 0.0
    rec = np.array([r for r, _ in pts])
    prec = np.array([p for _, p in pts])
    env = np.maximum.accumulate(prec[::-1])[::-1]
    widths = np.diff(np.concatenate([[0.0], rec]))
    return float(np.sum(widths * env))


def ap_trig(stream_scores, annotations, params, thresholds=DEFAULT_THRESHOLDS,
            extend_frac: float = EXTEND_FRAC):
    """Trigger-based AP over a threshold grid; returns ``(ap, [PRPoint])``."""
    points = [trigger_pr(stream_scores, annotations, th, params, extend_frac)[0]
              for th in thresholds]
    return interpolated_ap(points), points


def _ranked_hits(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    # stable sort: equal scores keep frame order
    order = np.argsort(-scores, kind="stable")
    return labels[order]


def calibrated_precision_mean(scores, labels, w: float) -> float:
    hits = _ranked_hits(scores, labels)
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    tp_at = tp[hits].astype(np.float64)
    fp_at = fp[hits].astype(np.float64)
    return math.fsum(tp_at / (tp_at + fp_at / w)) / len(tp_at)


def average_precision(scores, labels) -> float:
    """Mean precision at the rank of every positive frame."""
    labels = np.asarray(labels).astype(bool)
    if not labels.any():
        raise ValueError("average precision needs at least one positive")
    return calibrated_precision_mean(scores, labels, 1.0)


def calibrated_ap(scores, labels):
    """Per-category calibrated AP over frames, plus their mean.

    ``scores`` and ``labels`` are (n, C). False positives are divided by the
    category's negative/positive frame ratio. Categories without positive
    frames are skipped and listed in the third return value.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 2 or len(scores) == 0:
        raise ValueError(f"expected matching non-empty (n, C) arrays, got {scores.shape} "
                         f"and {labels.shape}")
    per_cat = {}
    skipped = []
    for c in range(scores.shape[1]):
        pos = int(labels[:, c].sum())
        neg = len(labels) - pos
        if pos == 0:
            skipped.append(c)
            continue
        w = neg / pos if neg > 0 else 1.0
        per_cat[c] = calibrated_precision_mean(scores[:, c], labels[:, c], w)
    mean = float(np.mean(list(per_cat.values()))) if per_cat else float("nan")
    return per_cat, mean, skipped


def frame_labels(annotations, n: int, num_categories: int) -> np.ndarray:
    labels = np.zeros((n, num_categories), dtype=bool)
    for a in annotations:
        labels[a.start:a.end, a.category] = True
    return labels


def confusion_matrix(pred, truth, num_categories: int) -> np.ndarray:
    """Frame counts; the last row/column is the undefined-action class.

    ``pred`` and ``truth`` are per-frame category indices with ``NO_ACTION``
    for frames without a defined action. Rows are ground truth.
    """
    ud = num_categories
    p = np.where(np.asarray(pred) == NO_ACTION, ud, pred)
    t = np.where(np.asarray(truth) == NO_ACTION, ud, truth)
    m = np.zeros((ud + 1, ud + 1), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def truth_per_frame(annotations, n: int) -> np.ndarray:
    out = np.full(n, NO_ACTION, dtype=np.int64)
    for a in annotations:
        out[a.start:a.end] = a.category
    return out


NECK, LHIP, RHIP = 1, 8, 9


def pck(predicted, ground_truth, alpha: float = 0.15, neck=NECK, hips=(LHIP, RHIP)) -> float:
    """Fraction of 2D joints within ``alpha`` x torso size of ground truth.

    Inputs are (N, K, 2) or a single (K, 2) pose. Torso size is the distance
    from the neck to the hip midpoint of the ground-truth pose; samples where
    it is zero are skipped with a warning.
    """
    pred = np.asarray(predicted, dtype=np.float64)
    gt = np.asarray(ground_truth, dtype=np.float64)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    hip_mid = 0.5 * (gt[:, hips[0]] + gt[:, hips[1]])
    scale = np.linalg.norm(gt[:, neck] - hip_mid, axis=-1)
    ok = scale > 0
    if not ok.all():
        warnings.warn(f"skipping {int((~ok).sum())} sample(s) with zero torso size")
    if not ok.any():
        return math.nan
    dist = np.linalg.norm(pred[ok] - gt[ok], axis=-1)
    return float(np.mean(dist <= alpha * scale[ok, None]))
