"""Multi-scale sparse proposal lattice and single-positive proposal labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .temporal import Interval, interval_mask, interval_mask_array, iou_array


def stride_for_length(length: int, base: int = 16) -> int:
    """Sampling stride for proposals spanning ``length`` grid cells."""
    return 2 ** max(0, math.ceil(math.log2(length / base)))


@dataclass(frozen=True)
class ProposalSet:
    n: int
    base: int
    index_pairs: np.ndarray = field(repr=False)  # (C, 2) inclusive grid cells (a, b)
    bounds: np.ndarray = field(repr=False)  # (C, 2) normalized [start, end]

    def __len__(self) -> int:
        return len(self.index_pairs)

    @property
    def min_frac(self) -> float:
        return 1.0 / self.n

    def interval(self, i: int) -> Interval:
        s, e = self.bounds[i]
        return Interval(s, e)

    def intervals(self) -> list[Interval]:
        return [Interval(s, e) for s, e in self.bounds]

    def clip_masks(self, t_v: int) -> np.ndarray:
        """(C, t_v) boolean membership of clips in each proposal."""
        return _clip_masks(self.n, self.base, t_v)

    def pooling_matrix(self, t_v: int) -> np.ndarray:
        """(C, t_v) row-normalized mean-pooling weights."""
        m = self.clip_masks(t_v).astype(float)
        return m / m.sum(axis=1, keepdims=True)

    def context_matrices(self, t_v: int) -> tuple[np.ndarray, np.ndarray]:
        """Mean-pooling weights over the clips just left and right of each proposal.

        Each flank is half the proposal's clip width (at least one clip) and is
        truncated at the video edges; an empty flank yields a zero row.
        """
        return _context_matrices(self.n, self.base, t_v)


def build_lattice(n: int, base: int = 16) -> ProposalSet:
    """Enumerate the sparse multi-scale proposals on an ``n``-cell grid.

    Cell span ``(a, b)`` (inclusive) is kept when both ``a`` and ``b + 1`` are
    multiples of the stride for its length; short spans (up to ``base`` cells)
    are dense.
    """
    if n < 1:
        raise ValueError(f"lattice granularity must be >= 1, got {n}")
    return _build_lattice(int(n), int(base))


@lru_cache(maxsize=None)
def _build_lattice(n: int, base: int) -> ProposalSet:
    pairs = []
    for a in range(n):
        for b in range(a, n):
            s = stride_for_length(b - a + 1, base)
            if a % s == 0 and (b + 1) % s == 0:
                pairs.append((a, b))
    idx = np.array(pairs, dtype=int).reshape(-1, 2)
    bounds = np.stack([idx[:, 0] / n, (idx[:, 1] + 1) / n], axis=1)
    idx.setflags(write=False)
    bounds.setflags(write=False)
    return ProposalSet(n=n, base=base, index_pairs=idx, bounds=bounds)


@lru_cache(maxsize=None)
def _clip_masks(n: int, base: int, t_v: int) -> np.ndarray:
    m = interval_mask_array(_build_lattice(n, base).bounds, t_v)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _context_matrices(n: int, base: int, t_v: int) -> tuple[np.ndarray, np.ndarray]:
    masks = _clip_masks(n, base, t_v)
    left = np.zeros(masks.shape)
    right = np.zeros(masks.shape)
    for i, row in enumerate(masks):
        on = np.nonzero(row)[0]
        lo, hi = on[0], on[-1]
        w = max(1, (len(on) + 1) // 2)
        l0, r1 = max(0, lo - w), min(t_v, hi + 1 + w)
        if l0 < lo:
            left[i, l0:lo] = 1.0 / (lo - l0)
        if hi + 1 < r1:
            right[i, hi + 1 : r1] = 1.0 / (r1 - hi - 1)
    left.setflags(write=False)
    right.setflags(write=False)
    return left, right


TIE_TOL = 1e-12


def assign_single_positive(proposals: ProposalSet, z: Interval) -> int:
    """Index of the proposal closest (max IoU) to the observed positive ``z``.

    Ties (within ``TIE_TOL``, to absorb rounding) go to the earliest start,
    then the shortest width.
    """
    ious = iou_array(proposals.bounds, [[z.start, z.end]])[:, 0]
    best = ious.max()
    cand = np.nonzero(ious >= best - TIE_TOL)[0]
    order = np.lexsort((proposals.bounds[cand, 1] - proposals.bounds[cand, 0], proposals.bounds[cand, 0]))
    return int(cand[order[0]])


def proposal_labels(proposals: ProposalSet, z: Interval) -> np.ndarray:
    """Single-positive label vector: 1 at the closest proposal, NaN (unobserved) elsewhere."""
    labels = np.full(len(proposals), np.nan)
    labels[assign_single_positive(proposals, z)] = 1.0
    return labels


def pool_features(clips: np.ndarray, p: Interval) -> np.ndarray:
    clips = np.asarray(clips, dtype=float)
    mask = interval_mask(p, clips.shape[0])
    return clips[mask].mean(axis=0)
