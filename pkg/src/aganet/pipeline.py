"""Dataset-level evaluation shared by the CLI and the acceptance runs."""

from __future__ import annotations

import numpy as np

from . import metrics
from .stream import assign_categories, predict_stream
from .synth import CATEGORIES

REPORT_FORMAT_VERSION = 1
CAP_FORMULA = ("cAP: frames ranked by score (ties by frame index); at each positive "
               "rank k, cPrec = TP(k) / (TP(k) + FP(k)/w), w = #negative / #positive "
               "frames of the category; cAP = mean cPrec over positive frames")


def stream_scores(store, records, stride: int = 20):
    return [predict_stream(store, r.frames, stride) for r in records]


def trigger_ap(store, records, params, stride=20, thresholds=metrics.DEFAULT_THRESHOLDS,
               extend_frac=metrics.EXTEND_FRAC):
    scores = stream_scores(store, records, stride)
    return metrics.ap_trig(scores, [r.annotations for r in records], params, thresholds,
                           extend_frac)[0]


def evaluate(store, records, params, stride=20, thresholds=metrics.DEFAULT_THRESHOLDS,
             headline=0.4, extend_frac=metrics.EXTEND_FRAC):
    """Full report dict and the PR points of the threshold sweep."""
    if not records:
        raise ValueError("no streams to evaluate")
    C = store.config.num_categories
    names = list(CATEGORIES[:C])
    scores = stream_scores(store, records, stride)
    anns = [r.annotations for r in records]

    all_scores = np.concatenate(scores)
    all_labels = np.concatenate([metrics.frame_labels(a, len(s), C) for s, a in zip(scores, anns)])
    per_cat, mean_cap, skipped = metrics.calibrated_ap(all_scores, all_labels)

    ap, points = metrics.ap_trig(scores, anns, params, thresholds, extend_frac)
    head, match = metrics.trigger_pr(scores, anns, headline, params, extend_frac)

    pred = np.concatenate([assign_categories(s, headline) for s in scores])
    truth = np.concatenate([metrics.truth_per_frame(a, len(s)) for s, a in zip(scores, anns)])
    conf = metrics.confusion_matrix(pred, truth, C)

    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "cap_formula": CAP_FORMULA,
        "num_streams": len(records),
        "num_frames": int(len(all_scores)),
        "cAP": {names[c]: v for c, v in per_cat.items()},
        "cAP_skipped": [names[c] for c in skipped],
        "mean_cAP": mean_cap if per_cat else None,
        "AP_trig": ap,
        "threshold": headline,
        "P_trig": head.precision,
        "R_trig": head.recall,
        "TP": match.true_positives,
        "FP": match.false_positives,
        "FN": match.false_negatives,
        "confusion_matrix": {"labels": names + ["UD"], "counts": conf.tolist()},
    }
    return report, points
