import math

import numpy as np
import pytest

from aganet import metrics as mt
from aganet.metrics import MatchResult, PRPoint
from aganet.stream import NO_ACTION, AccumulatorParams, TriggerEvent
from aganet.synth import ActionAnnotation as A


# ---- brute-force oracles ----------------------------------------------------

def cap_oracle(scores, labels, w):
    """O(n^2) calibrated precision averaged over positives (ties by index)."""
    n = len(scores)
    vals = []
    for i in range(n):
        if not labels[i]:
            continue
        tp = fp = 0
        for j in range(n):
            if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i):
                if labels[j]:
                    tp += 1
                else:
                    fp += 1
        vals.append(tp / (tp + fp / w))
    return sum(vals) / len(vals)


def events_oracle(scores, threshold, params):
    C = len(params)
    acc = [p.lower_limit for p in params]
    state = [0] * C
    out = []
    for t, row in enumerate(scores):
        best = 0
        for c in range(1, C):
            if row[c] > row[best]:
                best = c
        cat = best if row[best] > threshold else -1
        for c, p in enumerate(params):
            v = acc[c] + (p.increment if c == cat else -p.decrement)
            v = min(max(v, p.lower_limit), p.upper_limit)
            acc[c] = v
            if state[c] == 0 and v >= p.trigger_threshold:
                state[c] = 1
                out.append((c, t))
            elif state[c] == 1 and v < p.trigger_threshold:
                state[c] = 0
    return out


def match_oracle(events, anns, frac=0.2):
    used = set()
    tp = fp = 0
    for c, f in sorted(events, key=lambda e: (e[1], e[0])):
        hit = None
        for k in sorted(range(len(anns)), key=lambda k: (anns[k].start, anns[k].end)):
            a = anns[k]
            if k not in used and a.category == c and a.start <= f < a.end + frac * (a.end - a.start):
                hit = k
                break
        if hit is None:
            fp += 1
        else:
            used.add(hit)
            tp += 1
    return tp, fp, len(anns) - len(used)


def ap_oracle(points):
    """points: list of (precision, recall)."""
    recalls = sorted({r for _, r in points})
    area, prev = 0.0, 0.0
    for r in recalls:
        env = max(p for p, rr in points if rr >= r)
        area += (r - prev) * env
        prev = r
    return area


def ap_trig_oracle(streams, anns, params, thresholds):
    pts = []
    for th in thresholds:
        tp = fp = fn = 0
        for s, a in zip(streams, anns):
            x, y, z = match_oracle(events_oracle(s, th, params), a)
            tp, fp, fn = tp + x, fp + y, fn + z
        prec = 1.0 if tp + fp == 0 else tp / (tp + fp)
        rec = 0.0 if tp + fn == 0 else tp / (tp + fn)
        pts.append((prec, rec))
    return ap_oracle(pts)


def random_instance(rng, C=3, n_streams=2):
    streams, anns = [], []
    for _ in range(n_streams):
        n = int(rng.integers(30, 90))
        a, t = [], int(rng.integers(0, 8))
        while True:
            length = int(rng.integers(5, 20))
            if t + length > n:
                break
            a.append(A(int(rng.integers(C)), t, t + length))
            t += length + int(rng.integers(0, 10))
        s = rng.random((n, C)) * 0.5
        for x in a:  # make the annotated category likely
            s[x.start:x.end, x.category] += rng.random() * 0.6
        streams.append(np.clip(s, 0.001, 0.999))
        anns.append(a)
    thr = int(rng.integers(1, 6))
    params = [AccumulatorParams(1, float(rng.choice([0.5, 1, 2])), 0, thr + 4, thr)] * C
    return streams, anns, params


# ---- matching ---------------------------------------------------------------

def test_match_no_events():
    r = mt.match_triggers([], [A(0, 0, 10), A(1, 20, 30)])
    assert (r.true_positives, r.false_positives, r.false_negatives) == (0, 0, 2)


def test_match_extended_window():
    ann = [A(3, 100, 200)]
    r = mt.match_triggers([TriggerEvent(3, 219)], ann)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (1, 0, 0)
    r = mt.match_triggers([TriggerEvent(3, 221)], ann)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (0, 1, 1)
    r = mt.match_triggers([TriggerEvent(3, 220)], ann)
    assert r.true_positives == 0  # half-open
    r = mt.match_triggers([TriggerEvent(3, 99)], ann)
    assert r.false_positives == 1


def test_match_wrong_category_and_duplicates():
    ann = [A(0, 0, 50)]
    r = mt.match_triggers([TriggerEvent(1, 10), TriggerEvent(0, 10), TriggerEvent(0, 20)], ann)
    assert (r.true_positives, r.false_positives, r.false_negatives) == (1, 2, 0)
    assert r.pairs == [(TriggerEvent(0, 10), ann[0])]


def test_match_earliest_annotation_first():
    anns = [A(0, 0, 50), A(0, 40, 80)]
    r = mt.match_triggers([TriggerEvent(0, 45), TriggerEvent(0, 60)], anns)
    assert r.true_positives == 2
    assert [a for _, a in r.pairs] == anns


def test_match_order_independent():
    rng = np.random.default_rng(0)
    for _ in range(50):
        anns = [A(int(rng.integers(3)), s, s + int(rng.integers(5, 30)))
                for s in sorted(rng.integers(0, 200, size=6))]
        events = [TriggerEvent(int(rng.integers(3)), int(rng.integers(0, 240))) for _ in range(8)]
        base = mt.match_triggers(events, anns)
        perm = [events[i] for i in rng.permutation(len(events))]
        r = mt.match_triggers(perm, anns)
        key = lambda x: (x.true_positives, x.false_positives, x.false_negatives)
        assert key(r) == key(base)
        assert r.true_positives + r.false_negatives == len(anns)
        assert r.true_positives + r.false_positives == len(events)


def test_precision_recall_monotone():
    m = MatchResult(3, 2, 4)
    tp = MatchResult(4, 2, 3)  # one more TP (one fewer FN)
    fp = MatchResult(3, 3, 4)
    assert tp.precision >= m.precision and tp.recall >= m.recall
    assert fp.precision <= m.precision and fp.recall == m.recall
    assert MatchResult().precision == 1.0 and MatchResult().recall == 0.0


# ---- trigger PR / AP ----------------------------------------------------

def _perfect(anns, n, C=10):
    s = np.full((n, C), 0.01)
    for a in anns:
        s[a.start:a.end, a.category] = 0.99
    return s


P = [AccumulatorParams(1, 1, 0, 25, 15)] * 10


def test_perfect_detector():
    anns = [A(0, 10, 60), A(4, 100, 150), A(9, 200, 260)]
    s = _perfect(anns, 300)
    pt, res = mt.trigger_pr([s], [anns], 0.4, P)
    assert pt.precision == 1.0 and pt.recall == 1.0 and pt.threshold == 0.4
    ap, points = mt.ap_trig([s], [anns], P)
    assert ap == 1.0 and len(points) == 19


def test_silent_detector_zero_ap():
    anns = [A(0, 10, 60)]
    ap, points = mt.ap_trig([np.full((100, 10), 0.01)], [anns], P)
    assert ap == 0.0 and all(p.precision == 1.0 and p.recall == 0.0 for p in points)


def test_never_predicted_duplicates_halve_recall():
    anns = [A(0, 10, 60), A(4, 100, 150)]
    s = _perfect(anns, 200)
    doubled = anns + [A(7, a.start, a.end) for a in anns]
    base = mt.trigger_pr([s], [anns], 0.4, P)[0].recall
    half = mt.trigger_pr([s], [doubled], 0.4, P)[0].recall
    assert base == 1.0 and half == 0.5


def test_trigger_pr_errors():
    with pytest.raises(ValueError):
        mt.trigger_pr([], [], 0.4, P)
    with pytest.raises(ValueError):
        mt.trigger_pr([np.zeros((5, 10))], [[]], 0.0, P)


def test_interpolated_ap_hand_case():
    pts = [PRPoint(0.3, 1.0, 0.5), PRPoint(0.2, 0.8, 0.75), PRPoint(0.1, 0.6, 1.0)]
    # 0.5 * 1.0 + 0.25 * 0.8 + 0.25 * 0.6
    assert mt.interpolated_ap(pts) == pytest.approx(0.85, abs=1e-15)
    # a dip in precision is lifted by the envelope
    pts = [PRPoint(0.3, 0.5, 0.5), PRPoint(0.2, 0.9, 0.75)]
    assert mt.interpolated_ap(pts) == pytest.approx(0.75 * 0.9)
    assert mt.interpolated_ap([]) == 0.0


def test_ap_trig_matches_brute_force():
    rng = np.random.default_rng(7)
    th = (0.2, 0.35, 0.5, 0.65, 0.8)
    for _ in range(100):
        streams, anns, params = random_instance(rng)
        got, _ = mt.ap_trig(streams, anns, params, th)
        assert abs(got - ap_trig_oracle(streams, anns, params, th)) < 1e-9


# ---- cAP ----------------------------------------------------------------

def test_cap_perfect_ranking():
    scores = np.array([[0.9], [0.8], [0.2], [0.1]])
    labels = np.array([[1], [1], [0], [0]])
    per, mean, skipped = mt.calibrated_ap(scores, labels)
    assert per == {0: 1.0} and mean == 1.0 and skipped == []


def test_cap_six_frame_hand_case():
    s = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    y = np.array([1, 0, 1, 0, 0, 1])
    # w=1: precisions at positives 1/1, 2/3, 3/6
    expected = (1.0 + 2 / 3 + 0.5) / 3
    assert cap_oracle(s, y, 1.0) == pytest.approx(expected, abs=1e-15)
    assert mt.calibrated_precision_mean(s, y, 1.0) == pytest.approx(expected, abs=1e-15)
    # three of six are positive, so the dataset-level w is 1 as well
    per, _, _ = mt.calibrated_ap(s[:, None], y[:, None])
    assert per[0] == pytest.approx(expected, abs=1e-15)


def standard_ap(scores, labels):
    """Textbook AP: precision at each relevant rank, averaged over relevant items."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, precs = 0, []
    for k, i in enumerate(order, start=1):
        if labels[i]:
            hits += 1
            precs.append(hits / k)
    return math.fsum(precs) / len(precs)


def test_cap_w1_equals_standard_ap_exactly():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(2, 300))
        s = np.round(rng.random(n), 2)
        y = rng.random(n) < 0.5
        if not y.any():
            continue
        assert mt.calibrated_precision_mean(s, y, 1.0) == standard_ap(s, y)
    # balanced labels give w = 1 inside calibrated_ap
    s = rng.random(40)
    y = np.arange(40) % 2 == 0
    assert mt.calibrated_ap(s[:, None], y[:, None])[0][0] == standard_ap(s, y)


def test_cap_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n, C = int(rng.integers(2, 40)), int(rng.integers(1, 4))
        scores = np.round(rng.random((n, C)), 1)  # coarse values force ties
        labels = rng.random((n, C)) < rng.uniform(0.1, 0.6)
        per, mean, skipped = mt.calibrated_ap(scores, labels)
        for c in range(C):
            pos = labels[:, c].sum()
            if pos == 0:
                assert c in skipped
                continue
            w = (n - pos) / pos if n > pos else 1.0
            assert abs(per[c] - cap_oracle(scores[:, c], labels[:, c], w)) < 1e-9
        if per:
            assert mean == pytest.approx(np.mean(list(per.values())))


def test_cap_skips_and_validates():
    per, mean, skipped = mt.calibrated_ap(np.zeros((3, 2)), np.array([[0, 1], [0, 0], [0, 1]]))
    assert skipped == [0] and list(per) == [1]
    with pytest.raises(ValueError):
        mt.calibrated_ap(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mt.average_precision([0.1, 0.2], [0, 0])


# ---- frame labels / confusion ---------------------------------------------

def test_confusion_matrix_with_undefined():
    truth = np.array([0, 0, 1, NO_ACTION, NO_ACTION])
    pred = np.array([0, 1, 1, NO_ACTION, 0])
    m = mt.confusion_matrix(pred, truth, 2)
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert m.sum() == 5


def test_frame_labels_and_truth():
    anns = [A(1, 2, 4), A(0, 5, 6)]
    lab = mt.frame_labels(anns, 7, 3)
    assert lab[:, 1].tolist() == [0, 0, 1, 1, 0, 0, 0] and lab.sum() == 3
    assert mt.truth_per_frame(anns, 7).tolist() == [-1, -1, 1, 1, -1, 0, -1]


# ---- PCK ----------------------------------------------------------------

def _pose():
    gt = np.zeros((10, 2))
    gt[1] = [0, 0]            # neck
    gt[8], gt[9] = [-1, 10], [1, 10]  # hips: torso size 10
    gt[[0, 2, 3, 4, 5, 6, 7]] = np.arange(14).reshape(7, 2)
    return gt


def test_pck_examples():
    gt = _pose()
    assert mt.pck(gt, gt) == 1.0
    assert mt.pck(gt + 100.0, gt) == 0.0
    pred = gt.copy()
    pred[[0, 2, 3]] += [0, 1.6]  # beyond 0.15 * 10
    pred[[4, 5]] += [1.0, 1.0]   # sqrt(2) < 1.5, inside
    assert mt.pck(pred, gt) == pytest.approx(0.7)


def test_pck_boundary_and_degenerate():
    gt = _pose()
    pred = gt.copy()
    pred[0] += [1.5, 0]  # exactly on the radius counts
    assert mt.pck(pred, gt) == 1.0
    flat = np.zeros((10, 2))
    with pytest.warns(UserWarning, match="zero torso"):
        assert math.isnan(mt.pck(flat, flat))
    with pytest.warns(UserWarning):
        assert mt.pck(np.stack([gt, flat]), np.stack([gt, flat])) == 1.0
    with pytest.raises(ValueError):
        mt.pck(np.zeros((9, 2)), gt)
