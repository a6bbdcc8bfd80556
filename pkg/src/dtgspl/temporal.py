"""Interval geometry on normalized [0, 1] video time.

Every label, proposal and prediction in the package is an :class:`Interval`.
Scalar helpers operate on ``Interval`` values; the ``*_array`` variants work on
``(..., 2)`` numpy arrays of ``[start, end]`` rows and are what the training
loop uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class Interval:
    start: float
    end: float

    def __post_init__(self):
        s, e = float(self.start), float(self.end)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValueError(f"non-finite interval [{s}, {e}]")
        if not (0.0 <= s < e <= 1.0):
            raise ValueError(f"invalid interval [{s}, {e}]: need 0 <= start < end <= 1")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return 0.5 * (self.start + self.end)

    def as_list(self) -> list[float]:
        return [self.start, self.end]

    @classmethod
    def coerce(cls, value) -> "Interval":
        if isinstance(value, Interval):
            return value
        start, end = value
        return cls(start, end)


@dataclass(frozen=True)
class CenterWidth:
    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"width must be positive, got {self.width}")


def iou(a: Interval, b: Interval) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (M, 2) and ``b`` (K, 2), returns (M, K)."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    inter = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.clip(inter, 0.0, None)
    union = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms(items: Iterable[tuple[Interval, float]], iou_thresh: float) -> list[tuple[Interval, float]]:
    """Greedy non-maximum suppression over scored intervals.

    Candidates are visited by descending score (ties: earlier start, then
    narrower). A candidate is kept when its IoU with every already-kept
    interval is at most ``iou_thresh``.
    """
    ordered = sorted(items, key=lambda it: (-float(it[1]), it[0].start, it[0].width))
    kept: list[tuple[Interval, float]] = []
    for interval, score in ordered:
        if not math.isfinite(score):
            raise ValueError("nms scores must be finite")
        if all(iou(interval, k) <= iou_thresh for k, _ in kept):
            kept.append((interval, float(score)))
    return kept


def se_to_cw(a: Interval) -> CenterWidth:
    return CenterWidth(0.5 * (a.start + a.end), a.end - a.start)


def cw_to_se(c: CenterWidth) -> Interval:
    if not c.width > 0:
        raise ValueError(f"width must be positive, got {c.width}")
    start = min(max(c.center - 0.5 * c.width, 0.0), 1.0)
    end = min(max(c.center + 0.5 * c.width, 0.0), 1.0)
    return Interval(start, end)


def se_to_cw_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([0.5 * (x[..., 0] + x[..., 1]), x[..., 1] - x[..., 0]], axis=-1)


def interval_mask(a: Interval, t_v: int) -> np.ndarray:
    """Boolean clip mask: clip ``j`` is in ``a`` iff its center lies in ``a``.

    Intervals that cover no clip center fall back to the clip holding the
    interval midpoint, so the mask is never empty.
    """
    if t_v < 1:
        raise ValueError("t_v must be >= 1")
    centers = (np.arange(t_v) + 0.5) / t_v
    mask = (centers >= a.start) & (centers <= a.end)
    if not mask.any():
        mask[min(int(a.center * t_v), t_v - 1)] = True
    return mask


def interval_mask_array(x: np.ndarray, t_v: int) -> np.ndarray:
    """Vectorised :func:`interval_mask` for (..., 2) arrays; returns (..., t_v) bools."""
    x = np.asarray(x, dtype=float)
    centers = (np.arange(t_v) + 0.5) / t_v
    mask = (centers >= x[..., 0:1]) & (centers <= x[..., 1:2])
    empty = ~mask.any(axis=-1)
    if empty.any():
        mid = np.minimum((0.5 * (x[..., 0] + x[..., 1]) * t_v).astype(int), t_v - 1)
        idx = np.nonzero(empty)
        mask[idx + (mid[idx],)] = True
    return mask


def to_array(intervals: Sequence[Interval]) -> np.ndarray:
    return np.array([[iv.start, iv.end] for iv in intervals], dtype=float).reshape(-1, 2)
