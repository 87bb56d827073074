from fractions import Fraction

import numpy as np
import pytest

from noiseseg.evaluation import (
    THRESHOLDS,
    MetricsReport,
    aggregate_folds,
    average_precision,
    evaluate,
    match,
    match_ious,
    summarize_well,
)
from noiseseg.geometry import BoundingBox, Detection
from noiseseg.masks import rle_encode, box_region


def _scalar_iou(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    w = min(ax2, bx2) - max(ax1, bx1)
    h = min(ay2, by2) - max(ay1, by1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / ((ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter)


def brute_force_ap(images, t):
    """Reference AP from explicit loops and exact fractions.

    images: list of (pred_boxes, pred_scores, gt_boxes).
    """
    ranked = []
    n_gt = 0
    for i, (pb, ps, gb) in enumerate(images):
        n_gt += len(gb)
        order = sorted(range(len(pb)), key=lambda j: (-ps[j], j))
        taken = set()
        for rank, j in enumerate(order):
            best, best_iou = None, None
            for g in range(len(gb)):
                if g in taken:
                    continue
                v = _scalar_iou(pb[j], gb[g])
                if v >= t and (best is None or v > best_iou):
                    best, best_iou = g, v
            if best is not None:
                taken.add(best)
            ranked.append((-ps[j], i, rank, best is not None))
    ranked.sort()
    if n_gt == 0 or not ranked:
        return 0.0, []
    flags = [r[3] for r in ranked]
    prec, rec = [], []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        prec.append(Fraction(tp, k))
        rec.append(Fraction(tp, n_gt))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        cands = [p for p, rr in zip(prec, rec) if rr >= r]
        total += max(cands) if cands else 0
    return float(total / 101), flags


def _dets(boxes, scores=None):
    scores = scores if scores is not None else [1.0] * len(boxes)
    return [Detection(BoundingBox(*b), 0, s) for b, s in zip(boxes, scores)]


def _random_instance(rng):
    images = []
    for _ in range(int(rng.integers(1, 4))):
        n_g = int(rng.integers(0, 9))
        gb = []
        for _ in range(n_g):
            x, y = rng.uniform(0, 60, 2)
            gb.append((x, y, x + rng.uniform(5, 25), y + rng.uniform(5, 25)))
        n_p = int(rng.integers(0, 9))
        pb, ps = [], []
        for _ in range(n_p):
            if gb and rng.uniform() < 0.7:
                g = gb[int(rng.integers(len(gb)))]
                pb.append(tuple(np.array(g) + rng.normal(0, 3, 4) * np.array([1, 1, 0, 0]) + np.r_[0, 0, rng.normal(0, 3, 2)]))
                pb[-1] = (pb[-1][0], pb[-1][1], max(pb[-1][2], pb[-1][0] + 1), max(pb[-1][3], pb[-1][1] + 1))
            else:
                x, y = rng.uniform(0, 60, 2)
                pb.append((x, y, x + rng.uniform(5, 25), y + rng.uniform(5, 25)))
            ps.append(float(rng.choice([0.3, 0.5, 0.7])) if rng.uniform() < 0.3 else float(rng.uniform()))
        images.append((pb, ps, gb))
    return images


class TestMatch:
    def test_exact_hit(self):
        r = match(_dets([(0, 0, 10, 10)]), _dets([(0, 0, 10, 10)]), 0.5, "box")
        assert r.matched_gt.tolist() == [0]

    def test_duplicate_is_false_positive(self):
        r = match(_dets([(0, 0, 10, 10), (0, 0, 10, 10)], [0.6, 0.9]), _dets([(0, 0, 10, 10)]), 0.5, "box")
        assert r.order.tolist() == [1, 0]
        assert r.matched_gt.tolist() == [0, -1]

    def test_highest_iou_gt_wins(self):
        gts = _dets([(0, 0, 10, 10), (1, 0, 11, 10)])
        r = match(_dets([(1, 0, 11, 10)]), gts, 0.5, "box")
        assert r.matched_gt.tolist() == [1]

    def test_gt_index_tie_break(self):
        r = match_ious(np.array([[0.7, 0.7]]), [0.5], 0.5)
        assert r.matched_gt.tolist() == [0]

    def test_each_gt_once(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ious = rng.uniform(size=(6, 4))
            r = match_ious(ious, rng.uniform(size=6), 0.3)
            m = r.matched_gt[r.matched_gt >= 0]
            assert len(set(m.tolist())) == len(m)
            assert np.all(r.ious[r.matched_gt >= 0] >= 0.3)


class TestAP:
    def test_perfect(self):
        res = [match(_dets([(0, 0, 10, 10), (20, 20, 30, 30)]), _dets([(0, 0, 10, 10), (20, 20, 30, 30)]), 0.5, "box")]
        assert average_precision(res) == 1.0

    def test_no_predictions(self):
        assert average_precision([match([], _dets([(0, 0, 1, 1)]), 0.5, "box")]) == 0.0

    def test_half_recall(self):
        # one hit of two gts: precision 1 up to recall 0.5 -> 51/101
        res = [match(_dets([(0, 0, 10, 10)]), _dets([(0, 0, 10, 10), (20, 20, 30, 30)]), 0.5, "box")]
        assert average_precision(res) == pytest.approx(51 / 101)

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(1234)
        for _ in range(300):
            images = _random_instance(rng)
            t = float(rng.choice(THRESHOLDS))
            expected, flags = brute_force_ap(images, t)
            results = [match(_dets(pb, ps), _dets(gb), t, "box") for pb, ps, gb in images]
            assert average_precision(results) == pytest.approx(expected, abs=1e-12)

    def test_monotone_score_transform_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            images = _random_instance(rng)
            a = [match(_dets(pb, ps), _dets(gb), 0.5, "box") for pb, ps, gb in images]
            b = [match(_dets(pb, [s**3 * 0.5 for s in ps]), _dets(gb), 0.5, "box") for pb, ps, gb in images]
            assert average_precision(a) == average_precision(b)


class TestEvaluate:
    def _masked(self, boxes, scores=None, size=64):
        out = []
        for i, b in enumerate(boxes):
            bb = BoundingBox(*b)
            out.append(Detection(bb, 0, 1.0 if scores is None else scores[i], rle_encode(box_region(bb, size, size))))
        return out

    def test_perfect_all_ones(self):
        g = self._masked([(0, 0, 10, 10), (20, 20, 40, 30)])
        rep = evaluate([g], [g])
        assert rep.row() == [1.0] * 15

    def test_empty_predictions(self):
        rep = evaluate([[]], [self._masked([(0, 0, 10, 10)])])
        assert rep.row() == [0.0] * 15

    def test_columns(self):
        rep = evaluate([[]], [[]])
        assert rep.thresholds == (0.10, 0.25, 0.50, 0.75, 0.90)
        assert set(rep.to_dict()) >= {"P", "R", "mAP"}

    def test_map_non_increasing_in_threshold(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            images = _random_instance(rng)
            rep = evaluate([_dets(pb, ps) for pb, ps, _ in images], [_dets(gb) for *_, gb in images], "box")
            maps = [rep.map[t] for t in rep.thresholds]
            assert all(a >= b - 1e-12 for a, b in zip(maps, maps[1:]))

    def test_mask_and_box_criteria_coincide_on_rectangles(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            gb = [tuple(map(float, (x, y, x + w, y + h))) for x, y, w, h in rng.integers(1, 30, (4, 4))]
            pb = [tuple(map(float, (x, y, x + w, y + h))) for x, y, w, h in rng.integers(1, 30, (5, 4))]
            ps = list(rng.uniform(size=5))
            a = evaluate([self._masked(pb, ps)], [self._masked(gb)], "mask")
            b = evaluate([self._masked(pb, ps)], [self._masked(gb)], "box")
            assert a.row() == pytest.approx(b.row(), abs=1e-12)

    def test_best_f1_operating_point(self):
        g = _dets([(0, 0, 10, 10), (20, 0, 30, 10)])
        p = _dets([(0, 0, 10, 10), (50, 50, 60, 60), (20, 0, 30, 10)], [0.9, 0.8, 0.7])
        rep = evaluate([p], [g], "box")
        # cut after rank 3: P=2/3, R=1, F1=0.8 beats cut after rank 1 (F1=2/3)
        assert rep.precision[0.5] == pytest.approx(2 / 3)
        assert rep.recall[0.5] == 1.0

    def test_round_trip_dict(self):
        rep = evaluate([_dets([(0, 0, 10, 10)], [0.4])], [_dets([(0, 0, 10, 12)])], "box", label="x", test="M1")
        assert MetricsReport.from_dict(rep.to_dict()) == rep


class TestAggregate:
    def _rep(self, v):
        return MetricsReport({t: v for t in THRESHOLDS}, {t: v for t in THRESHOLDS}, {t: v for t in THRESHOLDS})

    def test_identical_folds(self):
        mean, std = aggregate_folds([self._rep(0.4)] * 3)
        assert mean.row() == pytest.approx([0.4] * 15)
        assert std.row() == [0.0] * 15

    def test_two_folds(self):
        mean, std = aggregate_folds([self._rep(0.6), self._rep(0.8)])
        assert mean.map[0.5] == pytest.approx(0.7)
        assert std.map[0.5] == pytest.approx(0.1)

    def test_random_vs_manual(self):
        rng = np.random.default_rng(3)
        reps = []
        for _ in range(5):
            vals = rng.uniform(size=15).reshape(5, 3)
            reps.append(MetricsReport(*({t: vals[i, c] for i, t in enumerate(THRESHOLDS)} for c in range(3))))
        mean, std = aggregate_folds(reps)
        for i, t in enumerate(THRESHOLDS):
            col = [r.map[t] for r in reps]
            mu = sum(col) / 5
            sd = (sum((x - mu) ** 2 for x in col) / 5) ** 0.5
            assert mean.map[t] == pytest.approx(mu)
            assert std.map[t] == pytest.approx(sd)


class TestWell:
    def test_empty(self):
        s = summarize_well([])
        assert (s.count, s.total_area) == (0, 0)

    def test_known_masks(self):
        dets = []
        areas = []
        for i, (x, w) in enumerate([(0, 50), (60, 40), (110, 70)]):
            b = BoundingBox(x, 0, x + w, 60)
            dets.append(Detection(b, 0, 1.0, rle_encode(box_region(b, 100, 200))))
            areas.append(w * 60)
        s = summarize_well(dets)
        assert s.count == 3
        assert s.total_area == sum(areas)
        assert s.histogram.sum() == 3
