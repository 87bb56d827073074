import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from noiseseg.geometry import BoundingBox, ciou_loss
from noiseseg.losses import (
    LossWeights,
    Targets,
    assign_batch,
    box_loss,
    cls_loss,
    compute_loss,
    dfl_loss,
    seg_loss,
    seg_loss_from_probs,
    total_loss,
)
from noiseseg.model import ModelConfig, build_model

LN2 = math.log(2.0)


class TestClassification:
    def test_zero_logits_give_ln2(self):
        t = torch.randint(0, 2, (2, 50, 3)).float()
        assert float(cls_loss(torch.zeros(2, 50, 3), t)) == pytest.approx(LN2)

    def test_normalizer_divides_sum(self):
        logits = torch.randn(4, 7)
        t = (torch.rand(4, 7) > 0.5).float()
        full = torch.nn.functional.binary_cross_entropy_with_logits(logits, t, reduction="sum")
        assert float(cls_loss(logits, t, normalizer=5)) == pytest.approx(float(full) / 5)
        assert float(cls_loss(logits, t, normalizer=0)) == pytest.approx(float(full))

    def test_confident_correct_is_near_zero(self):
        t = torch.tensor([[1.0, 0.0]])
        assert float(cls_loss(torch.tensor([[30.0, -30.0]]), t)) < 1e-12


class TestBox:
    def test_identical_boxes_zero(self):
        b = torch.tensor([[1.0, 2.0, 5.0, 9.0], [0.0, 0.0, 3.0, 3.0]])
        assert float(box_loss(b, b)) == pytest.approx(0.0, abs=1e-6)

    def test_no_positives(self):
        assert float(box_loss(torch.zeros(0, 4), torch.zeros(0, 4))) == 0.0

    def test_single_pair_matches_scalar_ciou(self):
        p, t = (1.0, 2.0, 6.0, 5.0), (2.0, 1.0, 7.0, 8.0)
        got = float(box_loss(torch.tensor([p], dtype=torch.float64), torch.tensor([t], dtype=torch.float64)))
        assert got == pytest.approx(ciou_loss(BoundingBox(*p), BoundingBox(*t)), abs=1e-9)

    def test_mean_over_pairs(self):
        rng = np.random.default_rng(0)
        xy = rng.uniform(0, 50, (6, 2))
        p = np.concatenate([xy, xy + rng.uniform(2, 20, (6, 2))], 1)
        t = np.concatenate([xy + 1, xy + rng.uniform(2, 20, (6, 2))], 1)
        each = [ciou_loss(BoundingBox(*a), BoundingBox(*b)) for a, b in zip(p, t)]
        got = float(box_loss(torch.tensor(p), torch.tensor(t)))
        assert got == pytest.approx(np.mean(each), abs=1e-9)


class TestDFL:
    def test_midpoint_uniform_is_ln2(self):
        logits = torch.full((1, 4, 16), -1e4, dtype=torch.float64)
        logits[..., 2] = logits[..., 3] = 0.0
        assert float(dfl_loss(logits, torch.full((1, 4), 2.5, dtype=torch.float64))) == pytest.approx(LN2)

    @pytest.mark.parametrize("j", [0, 4, 14])
    def test_integer_target_is_neg_log_softmax(self, j):
        g = torch.Generator().manual_seed(j)
        logits = torch.randn(3, 4, 16, generator=g, dtype=torch.float64)
        got = float(dfl_loss(logits, torch.full((3, 4), float(j), dtype=torch.float64)))
        want = float(-torch.log_softmax(logits, -1)[..., j].mean())
        assert got == pytest.approx(want, abs=1e-12)

    def test_targets_clamped_to_last_bin(self):
        logits = torch.zeros(1, 4, 16, dtype=torch.float64)
        a = dfl_loss(logits, torch.full((1, 4), 40.0, dtype=torch.float64))
        b = dfl_loss(logits, torch.full((1, 4), 15.0 - 1e-6, dtype=torch.float64))
        assert float(a) == pytest.approx(float(b))

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 14.99), st.integers(0, 2**16))
    def test_minimized_by_matching_two_bin_distribution(self, y, seed):
        # the split two-bin distribution is the optimum: any perturbation increases the loss
        r = 16
        left = int(math.floor(y))
        w = y - left
        p = torch.full((r,), 1e-12, dtype=torch.float64)
        p[left] += 1 - w
        p[min(left + 1, r - 1)] += w
        opt = torch.log(p)[None, None].repeat(1, 4, 1)
        target = torch.full((1, 4), y, dtype=torch.float64)
        base = float(dfl_loss(opt, target))
        g = torch.Generator().manual_seed(seed)
        noisy = opt + 0.1 * torch.randn(opt.shape, generator=g, dtype=torch.float64)
        assert float(dfl_loss(noisy, target)) >= base - 1e-9

    def test_gradient_matches_finite_difference(self):
        g = torch.Generator().manual_seed(3)
        logits = torch.randn(5, 4, 16, generator=g, dtype=torch.float64, requires_grad=True)
        y = torch.rand(5, 4, generator=g, dtype=torch.float64) * 14.5
        dfl_loss(logits, y).backward()
        eps = 1e-6
        flat = logits.detach().clone().flatten()
        for i in range(0, flat.numel(), 37):
            plus, minus = flat.clone(), flat.clone()
            plus[i] += eps
            minus[i] -= eps
            fd = (float(dfl_loss(plus.view_as(logits), y)) - float(dfl_loss(minus.view_as(logits), y))) / (2 * eps)
            assert logits.grad.flatten()[i].item() == pytest.approx(fd, rel=1e-4, abs=1e-9)


class TestSeg:
    def test_three_by_three_oracle(self):
        logits = torch.tensor([[[0.0, 1.0, -1.0], [2.0, 0.0, 0.5], [-3.0, 0.0, 1.0]]], dtype=torch.float64)
        target = torch.tensor([[[1, 0, 0], [1, 1, 0], [0, 0, 0]]], dtype=torch.float64)
        box = torch.tensor([[0.0, 0.0, 2.0, 2.0]])  # covers the top-left 2x2 pixel centres

        def bce(x, t):
            p = 1 / (1 + math.exp(-x))
            return -(t * math.log(p) + (1 - t) * math.log(1 - p))

        want = (bce(0.0, 1) + bce(1.0, 0) + bce(2.0, 1) + bce(0.0, 1)) / 4
        assert float(seg_loss(logits, target, box)) == pytest.approx(want, abs=1e-12)

    def test_pixels_outside_box_ignored(self):
        logits = torch.zeros(1, 4, 4)
        target = torch.zeros(1, 4, 4)
        box = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
        other = logits.clone()
        other[0, 3, 3] = 50.0
        assert float(seg_loss(logits, target, box)) == float(seg_loss(other, target, box))

    def test_probs_variant_agrees(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
        target = (torch.rand(3, 8, 8, generator=g) > 0.5).double()
        boxes = torch.tensor([[0.0, 0.0, 8.0, 8.0], [1.0, 2.0, 5.0, 7.0], [3.0, 3.0, 4.0, 4.0]])
        a = seg_loss(logits, target, boxes)
        b = seg_loss_from_probs(logits.sigmoid(), target, boxes)
        assert float(a) == pytest.approx(float(b), abs=1e-9)

    def test_sub_pixel_box_uses_centre_pixel(self):
        logits = torch.zeros(1, 4, 4)
        logits[0, 1, 2] = 3.0
        target = torch.ones(1, 4, 4)
        box = torch.tensor([[2.1, 1.2, 2.3, 1.4]])
        want = -math.log(1 / (1 + math.exp(-3.0)))
        assert float(seg_loss(logits, target, box)) == pytest.approx(want, rel=1e-6)


class TestTotal:
    def test_default_weights(self):
        w = LossWeights()
        assert (w.box, w.cls, w.dfl, w.seg) == (7.5, 0.5, 1.5, 1.0)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(box=-1)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=4, max_size=4),
           st.floats(0.0, 5.0))
    def test_linear(self, comps, ws, k):
        w = LossWeights(*ws)
        t = float(total_loss(*comps, w).total)
        assert t == pytest.approx(sum(a * b for a, b in zip(comps, ws)), rel=1e-9, abs=1e-9)
        scaled = float(total_loss(*[k * c for c in comps], w).total)
        assert scaled == pytest.approx(k * t, rel=1e-9, abs=1e-9)

    def test_detection_only_drops_seg(self):
        br = total_loss(1.0, 2.0, 3.0, 100.0, LossWeights(), detection_only=True)
        assert float(br.l_seg) == 0.0
        assert float(br.total) == pytest.approx(7.5 + 1.0 + 4.5)


TOY = ModelConfig(input_size=32, base_channels=8)


class TestComputeLoss:
    def test_zero_positive_batch(self):
        m = build_model(TOY, 0)
        raw = m(torch.rand(2, 3, 32, 32))
        empty = Targets(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), torch.zeros(0, 8, 8))
        br = compute_loss(raw, [empty, empty], TOY)
        assert br.as_floats()["l_box"] == br.as_floats()["l_dfl"] == br.as_floats()["l_seg"] == 0.0
        assert math.isfinite(br.as_floats()["l_cls"]) and br.as_floats()["l_cls"] > 0
        br.total.backward()

    def test_detection_only_has_zero_seg(self):
        m = build_model(TOY.replace(with_masks=False), 0)
        raw = m(torch.rand(1, 3, 32, 32))
        t = Targets(torch.tensor([[4.0, 4.0, 20.0, 24.0]]), torch.tensor([0]))
        br = compute_loss(raw, [t], m.config, detection_only=True)
        assert float(br.l_seg) == 0.0 and float(br.l_box) > 0

    def test_end_to_end_gradient(self):
        torch.manual_seed(0)
        m = build_model(TOY, 1).double()
        x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
        mask = torch.zeros(1, 8, 8, dtype=torch.float64)
        mask[0, 1:6, 2:7] = 1
        t = Targets(torch.tensor([[8.0, 4.0, 28.0, 24.0]], dtype=torch.float64), torch.tensor([0]), mask)
        assignments = assign_batch(m(x), [t], TOY)

        def loss():
            return compute_loss(m(x), [t], TOY, assignments=assignments, detach_alpha=False).total

        m.zero_grad()
        loss().backward()
        params = dict(m.named_parameters())
        probes = [("cls_heads.0.1.bias", 0), ("box_heads.0.1.bias", 5), ("box_heads.1.1.weight", 17),
                  ("coeff_heads.0.1.bias", 3), ("proto.out.weight", 11), ("backbone.stages.0.0.0.weight", 4),
                  ("neck.lateral.0.weight", 9)]
        eps = 1e-6
        checked = 0
        for name, i in probes:
            p = params[name]
            flat = p.data.view(-1)
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = float(loss())
                flat[i] = old - eps
                down = float(loss())
                flat[i] = old
            fd = (up - down) / (2 * eps)
            an = p.grad.view(-1)[i].item()
            assert an == pytest.approx(fd, rel=1e-2, abs=1e-6), name
            checked += abs(fd) > 1e-6
        assert checked >= 4
