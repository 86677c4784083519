"""Anchor matching, hard negative mining and k-means anchor clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix
from .losses import SampleKind


@dataclass(frozen=True)
class AnchorRecord:
    kind: SampleKind
    best_iou: float
    target_index: int | None = None
    forced: bool = False


@dataclass(frozen=True)
class AnchorMatch:
    records: tuple[AnchorRecord, ...]

    @property
    def n_positive(self) -> int:
        return sum(r.kind is SampleKind.Positive for r in self.records)

    @property
    def positives(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.kind is SampleKind.Positive]

    @property
    def negatives(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.kind is SampleKind.Negative]

    def __len__(self):
        return len(self.records)


def match_anchors(anchors: list[Box], gts: list[Box], pos_threshold: float = 0.5) -> AnchorMatch:
    """Assign each anchor to its best-overlap ground truth.

    An anchor is positive when its best IoU reaches ``pos_threshold``. On top of
    that, the single best anchor of every ground truth is promoted to positive
    (lowest anchor index wins ties) so no object is left without a positive.
    """
    n = len(anchors)
    if len(gts) == 0:
        return AnchorMatch(tuple(AnchorRecord(SampleKind.Negative, 0.0) for _ in range(n)))

    ious = iou_matrix(boxes_to_array(anchors), boxes_to_array(gts))
    best_gt = ious.argmax(axis=1) if n else np.zeros(0, dtype=int)
    best_iou = ious.max(axis=1) if n else np.zeros(0)

    target = {i: int(best_gt[i]) for i in range(n) if best_iou[i] >= pos_threshold}
    forced = set()
    if n:
        for j in range(len(gts)):
            # argmax returns the first maximum, i.e. the lowest anchor index
            i = int(ious[:, j].argmax())
            if i not in target or target[i] != j:
                forced.add(i)
            target[i] = j

    records = []
    for i in range(n):
        if i in target:
            j = target[i]
            records.append(AnchorRecord(SampleKind.Positive, float(ious[i, j]), j, i in forced))
        else:
            records.append(AnchorRecord(SampleKind.Negative, float(best_iou[i])))
    return AnchorMatch(tuple(records))


def mine_hard_negatives(weighted_losses, match: AnchorMatch, ratio: int = 3) -> list[int]:
    """Pick the highest-loss negatives, ``ratio`` per positive.

    With no positives at all, ``ratio`` negatives are still kept so an empty
    image contributes some background signal. Ties go to the lower index.
    Returns the selected anchor indices in selection order.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    losses = np.asarray(weighted_losses, dtype=float)
    if losses.shape != (len(match),):
        raise ValueError(f"expected {len(match)} losses, got shape {losses.shape}")
    neg = np.array(match.negatives, dtype=int)
    budget = ratio * max(match.n_positive, 1)
    k = min(budget, len(neg))
    # lexsort: last key is primary -> descending loss, then ascending index
    order = np.lexsort((neg, -losses[neg]))
    return [int(i) for i in neg[order[:k]]]


# -- k-means on box sizes --------------------------------------------------------


@dataclass(frozen=True)
class SizeCluster:
    w: float
    h: float
    member_count: int


def size_iou(sizes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of (w, h) pairs anchored at a common center, shape (n, k)."""
    inter = np.minimum(sizes[:, None, 0], centroids[None, :, 0]) * np.minimum(sizes[:, None, 1], centroids[None, :, 1])
    area_s = sizes[:, 0] * sizes[:, 1]
    area_c = centroids[:, 0] * centroids[:, 1]
    return inter / (area_s[:, None] + area_c[None, :] - inter)


def size_distance(sizes: np.ndarray, centroids: np.ndarray, metric: str = "iou") -> np.ndarray:
    if metric == "iou":
        return 1.0 - size_iou(sizes, centroids)
    if metric == "euclidean":
        return np.linalg.norm(sizes[:, None, :] - centroids[None, :, :], axis=2)
    raise ValueError(f"unknown metric {metric!r}")


def kmeans_distortion(sizes, centroids, metric: str = "iou") -> float:
    d = size_distance(np.asarray(sizes, float), np.asarray(centroids, float), metric)
    return float(d.min(axis=1).sum())


def _seed_centroids(sizes, k, rng, metric):
    n = len(sizes)
    idx = [int(rng.integers(n))]
    for _ in range(1, k):
        d = size_distance(sizes, sizes[idx], metric).min(axis=1)
        total = d.sum()
        if total <= 0:
            # all remaining points coincide with a centroid
            rest = [i for i in range(n) if i not in idx]
            idx.append(rest[int(rng.integers(len(rest)))])
            continue
        idx.append(int(rng.choice(n, p=d / total)))
    return sizes[idx].copy()


def kmeans_anchors(gt_sizes, k: int, seed: int = 0, max_iters: int = 300,
                   metric: str = "iou", history: list | None = None) -> list[SizeCluster]:
    """Lloyd's k-means on ``(w, h)`` pairs with ``1 - IoU`` distance.

    Seeding is k-means++ over the same distance, drawn from
    ``numpy.random.default_rng(seed)``. Centroids are member means; an update
    that would raise the total distortion is rejected and iteration stops
    there. Clusters come back sorted by area. If ``history`` is given, the
    distortion of every accepted state is appended to it.
    """
    sizes = np.asarray(gt_sizes, dtype=float).reshape(-1, 2)
    n = len(sizes)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise ValueError(f"k={k} exceeds number of sizes ({n})")
    if (sizes <= 0).any():
        raise ValueError("sizes must be positive")

    rng = np.random.default_rng(seed)
    centroids = _seed_centroids(sizes, k, rng, metric)
    dist = size_distance(sizes, centroids, metric)
    assign = dist.argmin(axis=1)
    current = float(dist[np.arange(n), assign].sum())
    if history is not None:
        history.append(current)
    for _ in range(max_iters):
        nearest = dist[np.arange(n), assign]
        proposal = centroids.copy()
        for c in range(k):
            members = sizes[assign == c]
            if len(members):
                proposal[c] = members.mean(axis=0)
            else:
                far = int(nearest.argmax())
                proposal[c] = sizes[far]
                nearest[far] = 0.0
        new_dist = size_distance(sizes, proposal, metric)
        new_assign = new_dist.argmin(axis=1)
        candidate = float(new_dist[np.arange(n), new_assign].sum())
        # the mean does not minimize 1 - IoU, so a step can make things worse
        if candidate > current:
            break
        centroids, dist, current = proposal, new_dist, candidate
        if history is not None:
            history.append(current)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    dist = size_distance(sizes, centroids, metric)
    assign = dist.argmin(axis=1)
    counts = np.bincount(assign, minlength=k)
    order = np.lexsort((centroids[:, 1], centroids[:, 0], centroids[:, 0] * centroids[:, 1]))
    return [SizeCluster(float(centroids[c, 0]), float(centroids[c, 1]), int(counts[c])) for c in order]
