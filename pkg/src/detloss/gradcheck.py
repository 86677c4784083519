"""Central-difference checks of the analytic penalty gradients.

The finite-difference side only ever evaluates penalty values, so it stays
independent of the closed-form derivatives it is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .geometry import Box, PenaltyKind

REGIMES = ("disjoint", "partial", "contained")


def penalty_function(kind: PenaltyKind | str, pred: Box, target: Box):
    """Penalty as a function of pred's four parameters.

    Quantities under stop-gradient (the MIoU normalizers) are frozen at their
    values for ``pred``, which is what the analytic gradient differentiates.
    """
    kind = PenaltyKind.parse(kind)
    scale = geo.miou_scale(pred, target)

    def f(p):
        b = Box(*(float(v) for v in p))
        if kind is PenaltyKind.MIoULoss:
            return 1.0 - geo.iou(b, target) + geo.r_miou(b, target, scale=scale)
        return geo.loc_penalty(kind, b, target)

    return f


def central_difference(f, x, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        up, dn = x.copy(), x.copy()
        up[i] += step
        dn[i] -= step
        g[i] = (f(up) - f(dn)) / (2 * step)
    return g


def near_kink(a: Box, b: Box, margin: float = 1e-4) -> bool:
    """True when any pair of parallel edges is within ``margin``."""
    for ea, eb in (((a.x1, a.x2), (b.x1, b.x2)), ((a.y1, a.y2), (b.y1, b.y2))):
        for u in ea:
            for v in eb:
                if abs(u - v) < margin:
                    return True
    return False


def overlap_state(pred: Box, target: Box) -> str:
    inter = geo.intersection_area(pred, target)
    if inter == 0:
        return "disjoint"
    if abs(inter - min(pred.area, target.area)) <= 1e-12 * max(pred.area, target.area):
        return "contained"
    return "partial"


def random_pair(rng: np.random.Generator, regime: str) -> tuple[Box, Box]:
    """Random (pred, target) in the given overlap regime; side ratios in [0.2, 5]."""
    tw, th = np.exp(rng.uniform(np.log(0.5), np.log(4.0), 2))
    tx, ty = rng.uniform(-5, 5, 2)
    rw, rh = np.exp(rng.uniform(np.log(0.2), np.log(5.0), 2))
    pw, ph = tw * rw, th * rh
    half_w, half_h = (pw + tw) / 2, (ph + th) / 2
    if regime == "contained":
        if rng.random() < 0.5:
            pw, ph = min(pw, 0.9 * tw), min(ph, 0.9 * th)
        else:
            pw, ph = max(pw, 1.1 * tw), max(ph, 1.1 * th)
        cx = tx + rng.uniform(-0.9, 0.9) * abs(pw - tw) / 2
        cy = ty + rng.uniform(-0.9, 0.9) * abs(ph - th) / 2
    elif regime == "partial":
        cx = tx + rng.uniform(-0.95, 0.95) * half_w
        cy = ty + rng.uniform(-0.95, 0.95) * half_h
    elif regime == "disjoint":
        sep = rng.uniform(1.05, 3.0) * rng.choice((-1.0, 1.0))
        if rng.random() < 0.5:
            cx, cy = tx + sep * half_w, ty + rng.uniform(-2, 2) * half_h
        else:
            cx, cy = tx + rng.uniform(-2, 2) * half_w, ty + sep * half_h
    else:
        raise ValueError(f"unknown regime {regime!r}")
    return Box(float(cx), float(cy), float(pw), float(ph)), Box(float(tx), float(ty), float(tw), float(th))


def sample_box_pairs(n: int, seed: int = 0, margin: float = 1e-4) -> list[tuple[Box, Box]]:
    """``n`` pairs cycling through the overlap regimes.

    Pairs with coincident centers or edges within ``margin`` of each other are
    redrawn: those sit on a kink of the IoU, where the central difference
    straddles two branches.
    """
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        pred, target = random_pair(rng, REGIMES[len(out) % len(REGIMES)])
        if near_kink(pred, target, margin) or (pred.cx == target.cx and pred.cy == target.cy):
            continue
        out.append((pred, target))
    return out


@dataclass
class GradcheckResult:
    kind: PenaltyKind
    n: int
    max_rel_err: float
    worst: tuple[Box, Box] | None

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def check_gradients(kind: PenaltyKind | str, pairs, step: float = 1e-6) -> GradcheckResult:
    kind = PenaltyKind.parse(kind)
    worst_err, worst = 0.0, None
    for pred, target in pairs:
        analytic = geo.loc_penalty_grad(kind, pred, target).as_tuple()
        numeric = central_difference(penalty_function(kind, pred, target), pred.as_tuple(), step)
        err = float(relative_error(analytic, numeric).max())
        if err > worst_err or worst is None:
            worst_err, worst = err, (pred, target)
    return GradcheckResult(kind, len(pairs), worst_err, worst)
