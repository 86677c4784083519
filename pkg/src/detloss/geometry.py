"""Box algebra and the IoU family of localization penalties.

Boxes are stored in center/size form ``(cx, cy, w, h)``. Every penalty has a
closed-form gradient with respect to the predicted box; these are what the
regression benchmark and the toy detector descend on.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Floor applied to every denominator (union, enclosing diagonal, W^2, H^2).
EPS = 1e-12


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2

    @property
    def area(self) -> float:
        # corner form, so a box intersected with itself gives exactly its area
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def scaled(self, s: float) -> "Box":
        return Box(self.cx * s, self.cy * s, self.w * s, self.h * s)


@dataclass(frozen=True)
class Grad4:
    """Gradient of a scalar with respect to ``(cx, cy, w, h)``."""

    d_cx: float
    d_cy: float
    d_w: float
    d_h: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError(f"non-finite gradient {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.d_cx, self.d_cy, self.d_w, self.d_h)

    def __add__(self, other: "Grad4") -> "Grad4":
        return Grad4(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def __neg__(self) -> "Grad4":
        return Grad4(*(-a for a in self.as_tuple()))


class PenaltyKind(str, enum.Enum):
    L1Norm = "l1"
    IoULoss = "iou"
    GIoULoss = "giou"
    DIoULoss = "diou"
    MIoULoss = "miou"

    @classmethod
    def parse(cls, name: "str | PenaltyKind") -> "PenaltyKind":
        if isinstance(name, cls):
            return name
        key = str(name).lower()
        for kind in cls:
            if key in (kind.value, kind.name.lower()):
                return kind
        raise ValueError(f"unknown penalty kind {name!r}")


ZERO_GRAD = Grad4(0.0, 0.0, 0.0, 0.0)


# -- 1-D interval helpers ------------------------------------------------------
#
# Each returns a length and its derivative with respect to the predicted
# interval's (center, size). Ties take the branch belonging to the predicted
# box, which is the overlapping side for the intersection.


def _overlap_1d(pc, ps, tc, ts):
    lo_p, hi_p = pc - ps / 2, pc + ps / 2
    lo_t, hi_t = tc - ts / 2, tc + ts / 2
    length = min(hi_p, hi_t) - max(lo_p, lo_t)
    if length <= 0:
        return 0.0, 0.0, 0.0
    # d(hi)/d(c, s) and d(lo)/d(c, s) when the predicted edge is active
    d_hi = (1.0, 0.5) if hi_p <= hi_t else (0.0, 0.0)
    d_lo = (1.0, -0.5) if lo_p >= lo_t else (0.0, 0.0)
    return length, d_hi[0] - d_lo[0], d_hi[1] - d_lo[1]


def _span_1d(pc, ps, tc, ts):
    lo_p, hi_p = pc - ps / 2, pc + ps / 2
    lo_t, hi_t = tc - ts / 2, tc + ts / 2
    length = max(hi_p, hi_t) - min(lo_p, lo_t)
    d_hi = (1.0, 0.5) if hi_p >= hi_t else (0.0, 0.0)
    d_lo = (1.0, -0.5) if lo_p <= lo_t else (0.0, 0.0)
    return length, d_hi[0] - d_lo[0], d_hi[1] - d_lo[1]


# -- values ----------------------------------------------------------------------


def intersection_area(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return min(1.0, inter / max(union, EPS))


def giou(a: Box, b: Box) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    return inter / max(union, EPS) - 1.0 + union / max(cw * ch, EPS)


def enclosing_diagonal_sq(a: Box, b: Box) -> float:
    cw = max(a.x2, b.x2) - min(a.x1, b.x1)
    ch = max(a.y2, b.y2) - min(a.y1, b.y1)
    return cw * cw + ch * ch


def center_distance_sq(a: Box, b: Box) -> float:
    return (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2


def r_diou(pred: Box, target: Box) -> float:
    """Squared center distance over the squared enclosing-box diagonal."""
    return center_distance_sq(pred, target) / max(enclosing_diagonal_sq(pred, target), EPS)


def miou_scale(pred: Box, target: Box) -> tuple[float, float]:
    """Mean width and mean height of the two boxes."""
    return (pred.w + target.w) / 2, (pred.h + target.h) / 2


def r_miou(pred: Box, target: Box, scale: tuple[float, float] | None = None) -> float:
    """Per-axis normalized center distance.

    ``scale`` overrides the ``(W, H)`` normalizers; gradient checks pass the
    values computed at the expansion point so they stay frozen.
    """
    W, H = miou_scale(pred, target) if scale is None else scale
    dx, dy = pred.cx - target.cx, pred.cy - target.cy
    return dx * dx / max(W * W, EPS) + dy * dy / max(H * H, EPS)


def loc_penalty(kind: PenaltyKind | str, pred: Box, target: Box) -> float:
    kind = PenaltyKind.parse(kind)
    if kind is PenaltyKind.IoULoss:
        return 1.0 - iou(pred, target)
    if kind is PenaltyKind.GIoULoss:
        return 1.0 - giou(pred, target)
    if kind is PenaltyKind.DIoULoss:
        return 1.0 - iou(pred, target) + r_diou(pred, target)
    if kind is PenaltyKind.MIoULoss:
        return 1.0 - iou(pred, target) + r_miou(pred, target)
    raise ValueError("l1 penalty works on encoded offsets, not boxes; use losses.l1_loc_loss")


# -- gradients -------------------------------------------------------------------


def _iou_parts(pred: Box, target: Box):
    """IoU pieces plus derivatives of inter and union w.r.t. pred."""
    iw, diw_c, diw_s = _overlap_1d(pred.cx, pred.w, target.cx, target.w)
    ih, dih_c, dih_s = _overlap_1d(pred.cy, pred.h, target.cy, target.h)
    inter = iw * ih
    if inter > 0:
        d_inter = np.array([diw_c * ih, dih_c * iw, diw_s * ih, dih_s * iw])
    else:
        d_inter = np.zeros(4)
    union = pred.area + target.area - inter
    d_area = np.array([0.0, 0.0, pred.h, pred.w])
    return inter, union, d_inter, d_area - d_inter


def iou_grad(pred: Box, target: Box) -> np.ndarray:
    inter, union, d_inter, d_union = _iou_parts(pred, target)
    if inter == 0:
        return np.zeros(4)
    u = max(union, EPS)
    return (d_inter * u - inter * d_union) / (u * u)


def giou_grad(pred: Box, target: Box) -> np.ndarray:
    inter, union, d_inter, d_union = _iou_parts(pred, target)
    cw, dcw_c, dcw_s = _span_1d(pred.cx, pred.w, target.cx, target.w)
    ch, dch_c, dch_s = _span_1d(pred.cy, pred.h, target.cy, target.h)
    c = max(cw * ch, EPS)
    d_c = np.array([dcw_c * ch, dch_c * cw, dcw_s * ch, dch_s * cw])
    g = iou_grad(pred, target) if inter > 0 else np.zeros(4)
    return g + (d_union * c - union * d_c) / (c * c)


def r_diou_grad(pred: Box, target: Box) -> np.ndarray:
    cw, dcw_c, dcw_s = _span_1d(pred.cx, pred.w, target.cx, target.w)
    ch, dch_c, dch_s = _span_1d(pred.cy, pred.h, target.cy, target.h)
    lam2 = max(cw * cw + ch * ch, EPS)
    d_lam2 = 2 * np.array([cw * dcw_c, ch * dch_c, cw * dcw_s, ch * dch_s])
    dx, dy = pred.cx - target.cx, pred.cy - target.cy
    rho2 = dx * dx + dy * dy
    d_rho2 = np.array([2 * dx, 2 * dy, 0.0, 0.0])
    return (d_rho2 * lam2 - rho2 * d_lam2) / (lam2 * lam2)


def r_miou_grad(pred: Box, target: Box) -> np.ndarray:
    # W and H are constants under differentiation, so size gets nothing here.
    W, H = miou_scale(pred, target)
    dx, dy = pred.cx - target.cx, pred.cy - target.cy
    return np.array([2 * dx / max(W * W, EPS), 2 * dy / max(H * H, EPS), 0.0, 0.0])


def loc_penalty_grad(kind: PenaltyKind | str, pred: Box, target: Box) -> Grad4:
    """Analytic gradient of :func:`loc_penalty` with respect to ``pred``."""
    kind = PenaltyKind.parse(kind)
    if kind is PenaltyKind.IoULoss:
        g = -iou_grad(pred, target)
    elif kind is PenaltyKind.GIoULoss:
        g = -giou_grad(pred, target)
    elif kind is PenaltyKind.DIoULoss:
        g = r_diou_grad(pred, target) - iou_grad(pred, target)
    elif kind is PenaltyKind.MIoULoss:
        g = r_miou_grad(pred, target) - iou_grad(pred, target)
    else:
        raise ValueError("l1 penalty works on encoded offsets, not boxes; use losses.l1_loc_loss")
    return Grad4(*(float(v) for v in g))


# -- vectorized helpers ----------------------------------------------------------


def boxes_to_array(boxes) -> np.ndarray:
    """Stack boxes into an ``(n, 4)`` array of ``(cx, cy, w, h)``."""
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between center/size arrays of shape (m, 4) and (n, 4)."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    ax1, ax2 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay1, ay2 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx1, bx2 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by1, by2 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = ((ax2 - ax1) * (ay2 - ay1))[:, None] + ((bx2 - bx1) * (by2 - by1))[None, :] - inter
    return np.minimum(1.0, inter / np.maximum(union, EPS))
