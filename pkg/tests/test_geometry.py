import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from noiseseg.geometry import (
    BoundingBox,
    Detection,
    box_iou_matrix,
    ciou_loss,
    ciou_loss_tensor,
    iou,
    nms,
)


def _ciou_reference(p, t):
    """Straight transcription of 1 - (IoU - rho^2/c^2 - alpha v), plain floats."""
    px1, py1, px2, py2 = p
    tx1, ty1, tx2, ty2 = t
    iw = max(0.0, min(px2, tx2) - max(px1, tx1))
    ih = max(0.0, min(py2, ty2) - max(py1, ty1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    i = inter / union
    rho2 = ((px1 + px2) / 2 - (tx1 + tx2) / 2) ** 2 + ((py1 + py2) / 2 - (ty1 + ty2) / 2) ** 2
    c2 = (max(px2, tx2) - min(px1, tx1)) ** 2 + (max(py2, ty2) - min(py1, ty1)) ** 2
    v = 4 / math.pi**2 * (math.atan((tx2 - tx1) / (ty2 - ty1)) - math.atan((px2 - px1) / (py2 - py1))) ** 2
    alpha = v / ((1 - i) + v) if v > 0 else 0.0
    return 1 - (i - rho2 / c2 - alpha * v)


def _brute_nms(dets, thr):
    remaining = list(range(len(dets)))
    kept = []
    while remaining:
        best = remaining[0]
        for j in remaining:
            if dets[j].score > dets[best].score:
                best = j
        kept.append(best)
        remaining.remove(best)
        remaining = [j for j in remaining
                     if not (dets[j].class_id == dets[best].class_id and iou(dets[j].box, dets[best].box) > thr)]
    return kept


def _random_dets(rng, n, n_classes=2, score_levels=None):
    dets = []
    for _ in range(n):
        x, y = rng.uniform(0, 100, 2)
        w, h = rng.uniform(5, 40, 2)
        score = rng.uniform() if score_levels is None else rng.choice(score_levels)
        dets.append(Detection(BoundingBox(x, y, x + w, y + h), int(rng.integers(n_classes)), float(score)))
    return dets


class TestIoU:
    def test_identity(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(0, 0, 10, 10)) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30)) == 0.0

    def test_half_shift(self):
        # inter 50, union 150
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_degenerate_is_zero(self):
        z = BoundingBox(3, 3, 3, 8)
        assert iou(z, z) == 0.0
        assert iou(z, BoundingBox(0, 0, 10, 10)) == 0.0

    def test_invalid_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(5, 0, 1, 1)

    @given(st.lists(st.floats(0, 100), min_size=8, max_size=8))
    def test_symmetric_bounded(self, v):
        a = BoundingBox(min(v[0], v[1]), min(v[2], v[3]), max(v[0], v[1]), max(v[2], v[3]))
        b = BoundingBox(min(v[4], v[5]), min(v[6], v[7]), max(v[4], v[5]), max(v[6], v[7]))
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert 0.0 <= iou(a, b) <= 1.0
        if a.area > 0:
            assert iou(a, a) == pytest.approx(1.0)

    def test_matrix_agrees_with_scalar(self):
        rng = np.random.default_rng(0)
        dets = _random_dets(rng, 30)
        boxes = np.array([d.box.as_tuple() for d in dets])
        m = box_iou_matrix(boxes, boxes)
        for i in range(30):
            for j in range(30):
                assert m[i, j] == pytest.approx(iou(dets[i].box, dets[j].box), abs=1e-12)


class TestCIoU:
    def test_identical_is_zero(self):
        b = BoundingBox(1, 2, 11, 7)
        assert ciou_loss(b, b) == pytest.approx(0.0, abs=1e-6)

    def test_concentric_same_aspect(self):
        assert ciou_loss(BoundingBox(0, 0, 10, 10), BoundingBox(2.5, 2.5, 7.5, 7.5)) == pytest.approx(0.75, abs=1e-6)

    def test_corner_touching_against_reference(self):
        a, b = (0, 0, 10, 10), (10, 10, 20, 20)
        expected = _ciou_reference(a, b)
        assert expected == pytest.approx(1.25)
        assert ciou_loss(BoundingBox(*a), BoundingBox(*b)) == pytest.approx(expected, abs=1e-6)

    def test_random_against_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = _random_dets(rng, 1)[0].box
            t = _random_dets(rng, 1)[0].box
            assert ciou_loss(p, t) == pytest.approx(_ciou_reference(p.as_tuple(), t.as_tuple()), abs=1e-6)

    def test_bounds_below_by_one_minus_iou(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            p = _random_dets(rng, 1)[0].box
            t = _random_dets(rng, 1)[0].box
            assert ciou_loss(p, t) >= 1 - iou(p, t) - 1e-9 >= -1e-9

    def test_zero_area_prediction_finite(self):
        val = ciou_loss(BoundingBox(5, 5, 5, 5), BoundingBox(0, 0, 10, 10))
        assert math.isfinite(val)

    def test_zero_area_target_rejected(self):
        with pytest.raises(ValueError):
            ciou_loss(BoundingBox(0, 0, 1, 1), BoundingBox(0, 0, 0, 1))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        checked = 0
        while checked < 100:
            p = np.concatenate([rng.uniform(0, 50, 2), rng.uniform(0, 50, 2)])
            p[2:] += p[:2] + 2
            t = np.concatenate([rng.uniform(0, 50, 2), rng.uniform(0, 50, 2)])
            t[2:] += t[:2] + 2
            # keep away from max/min switch points
            coords = np.concatenate([p, t])
            if np.min(np.abs(coords[:, None] - coords[None, :]) + np.eye(8)) < 1e-2:
                continue
            tp = torch.tensor(p, dtype=torch.float64, requires_grad=True)
            tt = torch.tensor(t, dtype=torch.float64)
            ciou_loss_tensor(tp, tt, detach_alpha=False).backward()
            grad = tp.grad.numpy()
            h = 1e-4
            fd = np.zeros(4)
            for k in range(4):
                e = np.zeros(4)
                e[k] = h
                f = lambda q: float(ciou_loss_tensor(torch.tensor(q, dtype=torch.float64), tt, detach_alpha=False))
                fd[k] = (f(p + e) - f(p - e)) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-6)
            assert np.all(np.abs(grad - fd) / denom < 1e-3), (p, t, grad, fd)
            checked += 1


class TestNMS:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_single(self):
        d = Detection(BoundingBox(0, 0, 5, 5), 0, 0.3)
        assert nms([d], 0.5) == [d]

    def test_duplicate_suppressed(self):
        a = Detection(BoundingBox(0, 0, 10, 10), 0, 0.8)
        b = Detection(BoundingBox(0, 0, 10, 10), 0, 0.9)
        assert nms([a, b], 0.5) == [b]

    def test_per_class(self):
        a = Detection(BoundingBox(0, 0, 10, 10), 0, 0.8)
        b = Detection(BoundingBox(0, 0, 10, 10), 1, 0.9)
        assert nms([a, b], 0.5) == [b, a]

    def test_tie_break_by_index(self):
        a = Detection(BoundingBox(0, 0, 10, 10), 0, 0.5)
        b = Detection(BoundingBox(1, 0, 11, 10), 0, 0.5)
        assert nms([a, b], 0.5) == [a]
        assert nms([b, a], 0.5) == [b]

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], 1.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 201)) if seed else 50
        levels = [0.2, 0.5, 0.9] if seed % 3 == 0 else None
        dets = _random_dets(rng, n, score_levels=levels)
        thr = float(rng.uniform(0.1, 0.9))
        kept = nms(dets, thr)
        expected = [dets[i] for i in _brute_nms(dets, thr)]
        assert [id(d) for d in kept] == [id(d) for d in expected]
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        # every discarded detection overlaps some kept, higher-ranked, same-class one
        kept_ids = {id(d) for d in kept}
        for d in dets:
            if id(d) not in kept_ids:
                assert any(k.class_id == d.class_id and iou(k.box, d.box) > thr and k.score >= d.score for k in kept)
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                if a.class_id == b.class_id:
                    assert iou(a.box, b.box) <= thr

    def test_custom_overlap_matches_box_path(self):
        rng = np.random.default_rng(99)
        dets = _random_dets(rng, 60)
        a = nms(dets, 0.4)
        b = nms(dets, 0.4, overlap=lambda x, y: iou(x.box, y.box))
        assert [id(d) for d in a] == [id(d) for d in b]
