"""Classification and localization losses.

The classification term is softmax cross entropy scaled by an IoU-based
coefficient. The coefficient is always a plain float here, which is how the
stop-gradient is realized: nothing downstream can differentiate through it.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, PenaltyKind

BACKGROUND = 0


class SampleKind(str, enum.Enum):
    Positive = "positive"
    Negative = "negative"


class NegativeBranch(str, enum.Enum):
    OneMinusIoUPow = "one_minus_iou_pow"
    # Kept for auditing: increases with IoU, which inverts the intended ranking.
    IoUPowAsPrinted = "iou_pow_as_printed"


class CoeffMode(str, enum.Enum):
    None_ = "none"
    PosOnly = "pos"
    NegOnly = "neg"
    Both = "both"

    @classmethod
    def parse(cls, name: "str | CoeffMode") -> "CoeffMode":
        if isinstance(name, cls):
            return name
        for mode in cls:
            if str(name).lower() in (mode.value, mode.name.lower().rstrip("_")):
                return mode
        raise ValueError(f"unknown coefficient mode {name!r}")

    def covers(self, kind: SampleKind) -> bool:
        if self is CoeffMode.Both:
            return True
        if self is CoeffMode.PosOnly:
            return kind is SampleKind.Positive
        if self is CoeffMode.NegOnly:
            return kind is SampleKind.Negative
        return False


@dataclass(frozen=True)
class CoeffConfig:
    gamma: float = 2.0
    negative_branch: NegativeBranch = NegativeBranch.OneMinusIoUPow

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be finite and positive, got {self.gamma}")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    loc_kind: PenaltyKind = PenaltyKind.MIoULoss
    coeff_mode: CoeffMode = CoeffMode.None_
    coeff: CoeffConfig = field(default_factory=CoeffConfig)
    mining_ratio: int = 3

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if int(self.mining_ratio) != self.mining_ratio or self.mining_ratio < 1:
            raise ValueError(f"mining_ratio must be an integer >= 1, got {self.mining_ratio}")


@dataclass(frozen=True)
class ClassificationSample:
    logits: tuple[float, ...]
    label: int
    sample_kind: SampleKind
    coeff_iou: float | None = None

    def __post_init__(self):
        if len(self.logits) < 2:
            raise ValueError("need at least two class logits")
        if not 0 <= self.label < len(self.logits):
            raise ValueError(f"label {self.label} out of range")
        if self.sample_kind is SampleKind.Negative and self.label != BACKGROUND:
            raise ValueError("negative samples must carry the background label")
        if self.coeff_iou is not None and not 0.0 <= self.coeff_iou <= 1.0:
            raise ValueError(f"coeff_iou must lie in [0, 1], got {self.coeff_iou}")


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_ce(logits, label: int) -> float:
    return float(-log_softmax(logits)[label])


def softmax_ce_grad(logits, label: int) -> np.ndarray:
    """d CE / d logits = softmax - onehot."""
    g = softmax(logits)
    g[label] -= 1.0
    return g


def iou_coefficient(kind: SampleKind, iou: float, cfg: CoeffConfig = CoeffConfig()) -> float:
    """IoU-based weight for a positive or negative anchor's CE term.

    Positives: ``1 - (1 - iou)**gamma``, rising with IoU.
    Negatives: ``(1 - iou)**gamma``, falling with IoU, so negatives whose
    predicted box misses every object keep the full CE weight.
    """
    if not 0.0 <= iou <= 1.0:
        raise ValueError(f"iou must lie in [0, 1], got {iou}")
    if kind is SampleKind.Positive:
        return 1.0 - (1.0 - iou) ** cfg.gamma
    if cfg.negative_branch is NegativeBranch.IoUPowAsPrinted:
        return iou ** cfg.gamma
    return (1.0 - iou) ** cfg.gamma


def sample_coefficient(sample: ClassificationSample, cfg: LossConfig) -> float:
    if not cfg.coeff_mode.covers(sample.sample_kind):
        return 1.0
    if sample.coeff_iou is None:
        raise ValueError(f"coeff_iou required for {sample.sample_kind.value} sample under {cfg.coeff_mode.value}")
    return iou_coefficient(sample.sample_kind, float(sample.coeff_iou), cfg.coeff)


def weighted_cls_loss(sample: ClassificationSample, cfg: LossConfig) -> float:
    return sample_coefficient(sample, cfg) * softmax_ce(sample.logits, sample.label)


def weighted_cls_loss_grad(sample: ClassificationSample, cfg: LossConfig) -> np.ndarray:
    """Gradient w.r.t. logits; the coefficient enters as a constant factor."""
    return sample_coefficient(sample, cfg) * softmax_ce_grad(sample.logits, sample.label)


# -- anchor offsets --------------------------------------------------------------


def encode_offsets(anchor: Box, target: Box) -> np.ndarray:
    return np.array([
        (target.cx - anchor.cx) / anchor.w,
        (target.cy - anchor.cy) / anchor.h,
        math.log(target.w / anchor.w),
        math.log(target.h / anchor.h),
    ])


def decode_offsets(anchor: Box, offsets) -> Box:
    tx, ty, tw, th = (float(v) for v in offsets)
    return Box(
        anchor.cx + tx * anchor.w,
        anchor.cy + ty * anchor.h,
        anchor.w * math.exp(tw),
        anchor.h * math.exp(th),
    )


def decode_jacobian_t(anchor: Box, offsets) -> np.ndarray:
    """Diagonal of d(decoded box)/d(offsets); decoding is separable per field."""
    tw, th = float(offsets[2]), float(offsets[3])
    return np.array([anchor.w, anchor.h, anchor.w * math.exp(tw), anchor.h * math.exp(th)])


def l1_loc_loss(pred_offsets, target_offsets) -> float:
    return float(np.abs(np.asarray(pred_offsets, float) - np.asarray(target_offsets, float)).sum())


def l1_loc_loss_grad(pred_offsets, target_offsets) -> np.ndarray:
    return np.sign(np.asarray(pred_offsets, float) - np.asarray(target_offsets, float))


# -- combined objective ----------------------------------------------------------


class EmptyPositivesWarning(UserWarning):
    pass


def total_loss(cls_sum: float, loc_sum: float, n_positive: int, cfg: LossConfig = LossConfig()) -> float:
    """``(cls_sum + alpha * loc_sum) / n_positive``; zero (with a warning) when no positives."""
    if n_positive <= 0:
        warnings.warn("no positive anchors; total loss defined as 0", EmptyPositivesWarning, stacklevel=2)
        return 0.0
    return (cls_sum + cfg.alpha * loc_sum) / n_positive
