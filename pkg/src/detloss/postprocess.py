"""Greedy NMS and COCO-style average precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# Size bins keyed on ground-truth width in pixels.
SIZE_BINS = {
    "small": (0.0, 32.0),
    "medium": (32.0, 96.0),
    "large": (96.0, float("inf")),
}


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    image_id: str = "0"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    image_id: str = "0"


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression; survivors come back by descending score."""
    if not dets:
        return []
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    order = np.lexsort((np.arange(len(dets)), -scores))
    ious = iou_matrix(boxes, boxes)
    keep = []
    alive = np.ones(len(dets), dtype=bool)
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ious[i] <= iou_threshold
    return [dets[i] for i in keep]


@dataclass
class ApReport:
    ap: float
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_threshold: dict[float, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_s": self.ap_s,
            "ap_m": self.ap_m,
            "ap_l": self.ap_l,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
        }


def _ranked(dets):
    scores = np.array([d.score for d in dets])
    return [int(i) for i in np.lexsort((np.arange(len(dets)), -scores))]


def match_detections(dets: list[Detection], gts: list[GroundTruth], threshold: float,
                     order: list[int] | None = None) -> list[int | None]:
    """Greedy matching in descending score order.

    Each detection takes the still-unmatched ground truth of the same image
    with the highest IoU, provided that IoU is at least ``threshold``.
    Returns, per detection, the matched ground-truth index or None.
    """
    order = _ranked(dets) if order is None else order
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    taken = set()
    matched: list[int | None] = [None] * len(dets)
    for i in order:
        cands = by_image.get(dets[i].image_id, [])
        if not cands:
            continue
        ious = iou_matrix(np.array([dets[i].box.as_tuple()]), boxes_to_array([gts[j].box for j in cands]))[0]
        best, best_iou = None, -1.0
        for j, v in zip(cands, ious):
            if j not in taken and v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken.add(best)
            matched[i] = best
    return matched


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision envelope for a ranked TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("average precision undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # envelope: running max from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev) * envelope))


def _bin_ap(dets, gts, order, matched, lo, hi):
    in_bin = [lo <= g.box.w < hi for g in gts]
    n_gt = sum(in_bin)
    if n_gt == 0:
        return None
    tp = []
    for i in order:
        j = matched[i]
        if j is None:
            # unmatched detections only count against bins they fall into
            if lo <= dets[i].box.w < hi:
                tp.append(0.0)
        elif in_bin[j]:
            tp.append(1.0)
    return average_precision(np.array(tp), n_gt)


def evaluate_ap(dets: list[Detection], gts: list[GroundTruth],
                thresholds=COCO_THRESHOLDS) -> ApReport:
    """COCO-style AP averaged over IoU thresholds, plus size-binned summaries.

    Size bins use ground-truth width. A bin without ground truth reports None
    and is left out of the summaries.
    """
    thresholds = tuple(float(t) for t in thresholds)
    order = _ranked(dets)
    overall = {}
    bins = {name: {} for name in SIZE_BINS}
    for t in thresholds:
        matched = match_detections(dets, gts, t, order)
        for name, (lo, hi) in SIZE_BINS.items():
            bins[name][t] = _bin_ap(dets, gts, order, matched, lo, hi)
        overall[t] = _bin_ap(dets, gts, order, matched, -np.inf, np.inf)

    def mean(values):
        vals = [v for v in values if v is not None]
        return float(np.mean(vals)) if vals else None

    def at(t):
        for key in overall:
            if abs(key - t) < 1e-9:
                return overall[key]
        return None

    ap = mean(overall.values())
    return ApReport(
        ap=0.0 if ap is None else ap,
        ap50=at(0.5),
        ap75=at(0.75),
        ap_s=mean(bins["small"].values()),
        ap_m=mean(bins["medium"].values()),
        ap_l=mean(bins["large"].values()),
        per_threshold={t: (0.0 if v is None else v) for t, v in overall.items()},
    )
