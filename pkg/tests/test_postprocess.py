import itertools

import numpy as np
import pytest
from shapely.geometry import box as shapely_box

from detloss.geometry import Box, iou
from detloss.postprocess import (
    COCO_THRESHOLDS,
    Detection,
    GroundTruth,
    average_precision,
    evaluate_ap,
    match_detections,
    nms,
)


def poly_iou(a, b):
    pa = shapely_box(a.x1, a.y1, a.x2, a.y2)
    pb = shapely_box(b.x1, b.y1, b.x2, b.y2)
    return pa.intersection(pb).area / pa.union(pb).area


# -- brute-force oracles ---------------------------------------------------------


def nms_oracle(dets, thr):
    """The greedy result is the unique subset that is closed under its own rule."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    rank = {i: r for r, i in enumerate(order)}
    hits = []
    for size in range(len(dets) + 1):
        for subset in itertools.combinations(range(len(dets)), size):
            s = set(subset)
            ok = all(
                (i in s) == (not any(j in s and rank[j] < rank[i] and poly_iou(dets[i].box, dets[j].box) > thr
                                     for j in range(len(dets))))
                for i in range(len(dets))
            )
            if ok:
                hits.append(s)
    assert len(hits) == 1
    return sorted(hits[0], key=lambda i: rank[i])


def tp_flags_oracle(dets, gts, thr, k):
    """Greedy-match only the top-k detections from scratch."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))[:k]
    taken, flags = set(), {}
    for i in order:
        best, best_v = None, -1.0
        for j, g in enumerate(gts):
            if g.image_id != dets[i].image_id or j in taken:
                continue
            v = poly_iou(dets[i].box, g.box)
            if v >= thr - 1e-12 and v > best_v:
                best, best_v = j, v
        flags[i] = best
        if best is not None:
            taken.add(best)
    return order, flags


def ap_oracle(dets, gts, thr, lo=-np.inf, hi=np.inf):
    in_bin = [lo <= g.box.w < hi for g in gts]
    n_gt = sum(in_bin)
    if n_gt == 0:
        return None
    # precision/recall at every cutoff, counting only detections that belong in the bin
    points = []
    for k in range(1, len(dets) + 1):
        order, flags = tp_flags_oracle(dets, gts, thr, k)
        tp = fp = 0
        for i in order:
            j = flags[i]
            if j is None:
                fp += lo <= dets[i].box.w < hi
            elif in_bin[j]:
                tp += 1
        if tp + fp:
            points.append((tp / n_gt, tp / (tp + fp)))
    total = 0.0
    for level in range(1, n_gt + 1):
        ps = [p for r, p in points if r >= level / n_gt - 1e-12]
        total += max(ps) if ps else 0.0
    return total / n_gt


def random_instance(rng, n_det, n_gt, n_img=2):
    def rbox():
        w = float(rng.choice([rng.uniform(8, 30), rng.uniform(34, 90)]))
        h = float(rng.uniform(8, 60))
        return Box(float(rng.uniform(0, 60)), float(rng.uniform(0, 60)), w, h)

    gts = [GroundTruth(rbox(), str(rng.integers(n_img))) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            b = Box(g.box.cx + float(rng.normal(0, 4)), g.box.cy + float(rng.normal(0, 4)),
                    g.box.w * float(np.exp(rng.normal(0, 0.2))), g.box.h * float(np.exp(rng.normal(0, 0.2))))
            dets.append(Detection(b, float(rng.choice([0.3, 0.5, 0.7, rng.uniform()])), g.image_id))
        else:
            dets.append(Detection(rbox(), float(rng.uniform()), str(rng.integers(n_img))))
    return dets, gts


# -- NMS -------------------------------------------------------------------------


class TestNMS:
    def test_identical(self):
        b = Box(0, 0, 10, 10)
        kept = nms([Detection(b, 0.8), Detection(b, 0.9)])
        assert [d.score for d in kept] == [0.9]

    def test_disjoint(self):
        kept = nms([Detection(Box(0, 0, 2, 2), 0.5), Detection(Box(10, 0, 2, 2), 0.6)])
        assert [d.score for d in kept] == [0.6, 0.5]

    def test_chain(self):
        # A-B and B-C overlap at 0.6; A-C only at 1/3, so C survives once B is gone
        a, b, c = Box(0.0, 0, 10, 10), Box(2.5, 0, 10, 10), Box(5.0, 0, 10, 10)
        assert poly_iou(a, b) == pytest.approx(0.6)
        assert poly_iou(b, c) == pytest.approx(0.6)
        assert poly_iou(a, c) == pytest.approx(1 / 3)
        kept = nms([Detection(a, 0.9), Detection(b, 0.8), Detection(c, 0.7)], 0.5)
        assert [d.box for d in kept] == [a, c]

    def test_ties_prefer_lower_index(self):
        b = Box(0, 0, 10, 10)
        d0, d1 = Detection(b, 0.5, "x"), Detection(Box(0.1, 0, 10, 10), 0.5, "y")
        assert nms([d0, d1]) == [d0]
        assert nms([d1, d0]) == [d1]

    def test_empty(self):
        assert nms([]) == []

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            dets, _ = random_instance(rng, int(rng.integers(0, 6)), 2)
            thr = float(rng.choice([0.3, 0.5, 0.7]))
            got = nms(dets, thr)
            want = [dets[i] for i in nms_oracle(dets, thr)]
            assert got == want

    def test_survivors_pairwise_and_maximal(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            dets, _ = random_instance(rng, 8, 3)
            for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
                kept = nms(dets, thr)
                assert all(d in dets for d in kept)
                assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
                for x, y in itertools.combinations(kept, 2):
                    assert iou(x.box, y.box) <= thr
                # every dropped box is covered by a higher-ranked survivor
                for d in dets:
                    if d not in kept:
                        assert any(iou(d.box, k.box) > thr and k.score >= d.score for k in kept)
            assert len(nms(dets, 1.0)) == len(dets)


# -- AP --------------------------------------------------------------------------


class TestAP:
    def test_single_gt_iou_06(self):
        gt = GroundTruth(Box(5.0, 5.0, 10.0, 10.0))
        det = Detection(Box(7.5, 5.0, 10.0, 10.0), 0.9)
        assert iou(det.box, gt.box) == 0.6
        rep = evaluate_ap([det], [gt])
        assert rep.per_threshold[0.5] == 1.0
        assert rep.per_threshold[0.6] == 1.0
        assert rep.per_threshold[0.65] == 0.0
        assert rep.ap75 == 0.0
        assert rep.ap == pytest.approx(0.3, abs=1e-15)

    def test_perfect(self):
        gts = [GroundTruth(Box(10 * i, 0, 8, 8), str(i % 2)) for i in range(5)]
        dets = [Detection(g.box, 0.5 + 0.05 * i, g.image_id) for i, g in enumerate(gts)]
        rep = evaluate_ap(dets, gts)
        assert rep.ap == 1.0 and rep.ap75 == 1.0 and rep.ap_s == 1.0
        assert rep.ap_m is None and rep.ap_l is None

    def test_no_detections(self):
        rep = evaluate_ap([], [GroundTruth(Box(0, 0, 10, 10))])
        assert rep.ap == 0.0 and rep.ap75 == 0.0

    def test_hand_instance(self):
        # two gts; ranked dets: TP, FP, TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        g1, g2 = Box(0, 0, 10, 10), Box(50, 50, 10, 10)
        gts = [GroundTruth(g1), GroundTruth(g2)]
        dets = [Detection(g1, 0.9), Detection(Box(100, 100, 10, 10), 0.8), Detection(Box(50.5, 50, 10, 10), 0.7)]
        rep = evaluate_ap(dets, gts, thresholds=(0.5,))
        expected = 0.5 * 1.0 + 0.5 * (2 / 3)
        assert rep.ap == pytest.approx(expected)
        assert rep.ap == pytest.approx(ap_oracle(dets, gts, 0.5))

    def test_size_bins_use_width(self):
        small = GroundTruth(Box(0, 0, 20, 200))  # tall but narrow: small by width
        medium = GroundTruth(Box(500, 0, 50, 10))
        rep = evaluate_ap([Detection(small.box, 0.9)], [small, medium])
        assert rep.ap_s == 1.0 and rep.ap_m == 0.0 and rep.ap_l is None

    def test_average_precision_envelope(self):
        assert average_precision(np.array([0, 1]), 1) == pytest.approx(0.5)
        assert average_precision(np.array([1, 0, 1]), 2) == pytest.approx(0.5 + 0.5 * 2 / 3)
        with pytest.raises(ValueError):
            average_precision(np.array([1]), 0)

    def test_matches_oracle_exhaustively(self):
        rng = np.random.default_rng(7)
        bins = [(-np.inf, np.inf), (0, 32), (32, 96)]
        checked = 0
        for n_det in range(6):
            for n_gt in range(1, 4):
                for _ in range(25):
                    dets, gts = random_instance(rng, n_det, n_gt)
                    rep = evaluate_ap(dets, gts)
                    for t in COCO_THRESHOLDS:
                        assert rep.per_threshold[t] == pytest.approx(ap_oracle(dets, gts, t), abs=1e-12)
                    for (lo, hi), got in zip(bins[1:], (rep.ap_s, rep.ap_m)):
                        want = [ap_oracle(dets, gts, t, lo, hi) for t in COCO_THRESHOLDS]
                        if want[0] is None:
                            assert got is None
                        else:
                            assert got == pytest.approx(np.mean(want), abs=1e-12)
                    checked += 1
        assert checked == 6 * 3 * 25

    def test_monotonicity(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            dets, gts = random_instance(rng, 5, 3)
            rep = evaluate_ap(dets, gts)
            base = rep.per_threshold
            # dropping a detection that is a false positive at every threshold
            matched_any = set()
            for t in COCO_THRESHOLDS:
                m = match_detections(dets, gts, t)
                matched_any |= {i for i, j in enumerate(m) if j is not None}
            for i in range(len(dets)):
                if i in matched_any:
                    continue
                reduced = evaluate_ap(dets[:i] + dets[i + 1:], gts)
                for t in COCO_THRESHOLDS:
                    assert reduced.per_threshold[t] >= base[t] - 1e-12
            # a trailing false positive never helps
            far = Detection(Box(1e4, 1e4, 20, 20), 0.0, "0")
            more = evaluate_ap(dets + [far], gts)
            for t in COCO_THRESHOLDS:
                assert more.per_threshold[t] <= base[t] + 1e-12
