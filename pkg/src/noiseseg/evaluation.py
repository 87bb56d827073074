"""COCO-style matching, precision/recall and average precision.

Predictions are matched greedily in descending score order (ties by input
order) to the unmatched ground truth with the highest IoU at or above the
threshold (ties by ground-truth index). AP uses 101-point interpolated
precision. Reported P/R come from the ranked-list cut that maximizes F1.
"""

from __future__ import annotations

import statistics
from fractions import Fraction
from itertools import accumulate
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Detection, box_iou_matrix
from .masks import mask_iou_matrix

THRESHOLDS = (0.10, 0.25, 0.50, 0.75, 0.90)
RECALL_POINTS = 101
OPERATING_POINT_NOTE = "P/R at the score cut maximizing F1; AP = 101-point interpolated precision"


@dataclass
class MatchResult:
    """Greedy matching of one image's predictions at one IoU threshold.

    ``order`` lists prediction indices by descending score; ``matched_gt`` and
    ``ious`` are aligned with ``order`` (``-1`` / ``0.0`` for false positives).
    """

    order: np.ndarray
    scores: np.ndarray
    matched_gt: np.ndarray
    ious: np.ndarray
    gt_matched: np.ndarray

    @property
    def tp(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def n_gt(self) -> int:
        return len(self.gt_matched)


def score_order(scores: Sequence[float]) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(len(scores)), -scores))


def iou_table(preds: Sequence[Detection], gts: Sequence[Detection], criterion: str = "mask") -> np.ndarray:
    if criterion == "box":
        pb = np.array([d.box.as_tuple() for d in preds]).reshape(-1, 4)
        gb = np.array([d.box.as_tuple() for d in gts]).reshape(-1, 4)
        return box_iou_matrix(pb, gb)
    if criterion != "mask":
        raise ValueError(f"unknown criterion {criterion!r}")
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    if any(d.mask is None for d in list(preds) + list(gts)):
        raise ValueError("mask criterion needs masks on every prediction and ground truth")
    return mask_iou_matrix(np.stack([d.mask.decode() for d in preds]),
                           np.stack([d.mask.decode() for d in gts]))


def match_ious(ious: np.ndarray, scores: Sequence[float], t: float) -> MatchResult:
    """Greedy matching from a precomputed ``(n_pred, n_gt)`` IoU table."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.ndim != 2:
        ious = ious.reshape(len(scores), -1)
    n_pred, n_gt = ious.shape
    order = score_order(scores)
    matched = np.full(n_pred, -1, dtype=np.int64)
    got = np.zeros(n_pred)
    used = np.zeros(n_gt, dtype=bool)
    for r, p in enumerate(order):
        if n_gt == 0:
            break
        cand = np.where(used | (ious[p] < t), -1.0, ious[p])
        g = int(np.argmax(cand))  # first index wins ties
        if cand[g] >= 0 and ious[p, g] >= t:
            matched[r] = g
            got[r] = ious[p, g]
            used[g] = True
    return MatchResult(order, np.asarray(scores, dtype=np.float64)[order], matched, got, used)


def match(preds: Sequence[Detection], gts: Sequence[Detection], t: float, criterion: str = "mask") -> MatchResult:
    return match_ious(iou_table(preds, gts, criterion), [d.score for d in preds], t)


def _pool(results: Sequence[MatchResult]) -> tuple[np.ndarray, int, np.ndarray]:
    """Concatenate ranked TP flags across images, re-ranked by score."""
    scores, tps, img, rank = [], [], [], []
    n_gt = 0
    for i, r in enumerate(results):
        scores.append(r.scores)
        tps.append(r.tp)
        img.append(np.full(len(r.scores), i))
        rank.append(np.arange(len(r.scores)))
        n_gt += r.n_gt
    if not scores:
        return np.zeros(0, dtype=bool), 0, np.zeros(0)
    s = np.concatenate(scores)
    key = np.lexsort((np.concatenate(rank), np.concatenate(img), -s))
    return np.concatenate(tps)[key], n_gt, s[key]


def average_precision(results: Sequence[MatchResult]) -> float:
    """101-point interpolated AP over a test set. No ground truth gives 0."""
    tp, n_gt, _ = _pool(results)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    # exact rationals so the 101-term sum has a single rounding
    precision = [Fraction(int(c), k) for k, c in enumerate(ctp, 1)]
    envelope = list(accumulate(reversed(precision), max))[::-1]
    total = Fraction(0)
    j = 0
    for k in range(RECALL_POINTS):
        # recall >= k/100, compared in integers
        while j < len(ctp) and ctp[j] * (RECALL_POINTS - 1) < k * n_gt:
            j += 1
        if j == len(ctp):
            break
        total += envelope[j]
    return float(total / RECALL_POINTS)


def best_f1_point(results: Sequence[MatchResult]) -> tuple[float, float]:
    """Precision and recall at the score cut with maximal F1.

    Cuts are only placed between distinct scores; ties keep the higher cut.
    Empty predictions give ``(0, 0)``.
    """
    tp, n_gt, s = _pool(results)
    if len(tp) == 0 or n_gt == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    k = np.arange(1, len(tp) + 1)
    valid = np.append(s[1:] != s[:-1], True)
    f1 = np.where(valid, 2 * ctp / (k + n_gt), -1.0)
    best = int(np.argmax(f1))
    if f1[best] <= 0:
        return 0.0, 0.0
    return float(ctp[best] / k[best]), float(ctp[best] / n_gt)


@dataclass
class MetricsReport:
    """P, R and mAP per IoU threshold for one test set (or one fold)."""

    precision: dict[float, float]
    recall: dict[float, float]
    map: dict[float, float]
    criterion: str = "mask"
    label: str = ""
    test: str = ""
    thresholds: tuple[float, ...] = THRESHOLDS
    n_pred: int = 0
    n_gt: int = 0
    note: str = OPERATING_POINT_NOTE

    def row(self) -> list[float]:
        out = []
        for t in self.thresholds:
            out += [self.precision[t], self.recall[t], self.map[t]]
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "test": self.test,
            "criterion": self.criterion,
            "thresholds": list(self.thresholds),
            "P": [self.precision[t] for t in self.thresholds],
            "R": [self.recall[t] for t in self.thresholds],
            "mAP": [self.map[t] for t in self.thresholds],
            "n_pred": self.n_pred,
            "n_gt": self.n_gt,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        ts = tuple(float(t) for t in d["thresholds"])
        return cls(dict(zip(ts, map(float, d["P"]))), dict(zip(ts, map(float, d["R"]))),
                   dict(zip(ts, map(float, d["mAP"]))), d.get("criterion", "mask"), d.get("label", ""),
                   d.get("test", ""), ts, int(d.get("n_pred", 0)), int(d.get("n_gt", 0)),
                   d.get("note", OPERATING_POINT_NOTE))

    def rounded(self, ndigits: int = 4) -> list[float]:
        return [round(v, ndigits) for v in self.row()]


def evaluate(preds: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Detection]],
             criterion: str = "mask", thresholds: Sequence[float] = THRESHOLDS,
             classes: Optional[Sequence[int]] = None, label: str = "", test: str = "") -> MetricsReport:
    """Score a test set given per-image prediction and ground-truth lists.

    With several classes, AP and P/R are averaged over classes that have
    ground truth in the test set.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction lists for {len(gts)} images")
    if classes is None:
        classes = sorted({d.class_id for img in gts for d in img}) or [0]
    thresholds = tuple(float(t) for t in thresholds)
    per_class_tables = {}
    for c in classes:
        tables = []
        for p, g in zip(preds, gts):
            pc = [d for d in p if d.class_id == c]
            gc = [d for d in g if d.class_id == c]
            tables.append((iou_table(pc, gc, criterion), [d.score for d in pc], len(gc)))
        per_class_tables[c] = tables
    counted = [c for c in classes if sum(n for _, _, n in per_class_tables[c]) > 0] or list(classes)
    P, R, M = {}, {}, {}
    for t in thresholds:
        ps, rs, aps = [], [], []
        for c in counted:
            results = [match_ious(tab, sc, t) for tab, sc, _ in per_class_tables[c]]
            p, r = best_f1_point(results)
            ps.append(p)
            rs.append(r)
            aps.append(average_precision(results))
        P[t], R[t], M[t] = float(np.mean(ps)), float(np.mean(rs)), float(np.mean(aps))
    n_pred = sum(1 for img in preds for d in img if d.class_id in counted)
    n_gt = sum(1 for img in gts for d in img if d.class_id in counted)
    return MetricsReport(P, R, M, criterion, label, test, thresholds, n_pred, n_gt)


def aggregate_folds(reports: Sequence[MetricsReport]) -> tuple[MetricsReport, MetricsReport]:
    """Per-cell arithmetic mean and population standard deviation."""
    if not reports:
        raise ValueError("no reports to aggregate")
    ts = reports[0].thresholds
    if any(r.thresholds != ts for r in reports):
        raise ValueError("reports use different threshold sets")
    cols = list(zip(*(r.row() for r in reports)))
    # exact rational arithmetic: identical folds give a std of exactly 0
    mean = np.array([statistics.mean(c) for c in cols])
    std = np.array([statistics.pstdev(c) for c in cols])

    def build(vals, label):
        v = vals.reshape(len(ts), 3)
        return MetricsReport({t: float(v[i, 0]) for i, t in enumerate(ts)},
                             {t: float(v[i, 1]) for i, t in enumerate(ts)},
                             {t: float(v[i, 2]) for i, t in enumerate(ts)},
                             reports[0].criterion, label, "", ts)

    return build(mean, "Average"), build(std, "Standard Deviation")


@dataclass
class WellSummary:
    count: int
    total_area: int
    histogram: np.ndarray = field(repr=False)
    bin_edges: np.ndarray = field(repr=False)


AREA_BINS = (0, 2000, 4000, 8000, 16000, 32000, np.inf)


def summarize_well(dets: Sequence[Detection], bins: Sequence[float] = AREA_BINS) -> WellSummary:
    """Cell count, summed mask area and an area histogram for one slide."""
    areas = np.array([d.mask.area if d.mask is not None else d.box.area for d in dets], dtype=np.float64)
    hist, edges = np.histogram(areas, bins=np.asarray(bins, dtype=np.float64))
    return WellSummary(len(dets), int(areas.sum()), hist, edges)
