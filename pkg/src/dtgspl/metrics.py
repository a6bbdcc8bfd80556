"""Single- and multi-label recall metrics for temporal grounding.

``R@N, IoU=a``          share of samples whose one label is hit by a top-N prediction.
``R@(N,G), IoU=a``      share of (up to G per sample) annotations hit by a top-N prediction.
``R_b@(N,G), IoU=a``    the same after dropping samples whose annotations agree
                        (mean pairwise IoU) less than ``b``.

A hit is IoU >= alpha. Values are percentages.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .temporal import Interval, iou, iou_array, to_array
from .validation import check_interval


@dataclass(frozen=True)
class EvalRecord:
    id: str
    predictions: tuple[Interval, ...]
    annotations: tuple[Interval, ...]

    @classmethod
    def build(cls, id, predictions, annotations) -> "EvalRecord":
        preds = tuple(check_interval(p, f"{id} prediction") for p in predictions)
        anns = tuple(check_interval(a, f"{id} annotation") for a in annotations)
        if not anns:
            raise ValueError(f"{id}: record without annotations")
        return cls(str(id), preds, anns)

    @classmethod
    def from_json(cls, d: dict) -> "EvalRecord":
        return cls.build(d["id"], d["predictions"], d["annotations"])


@dataclass(frozen=True)
class MetricReport:
    metric: str
    n: int
    g: int | None
    alpha: float
    beta: float | None
    value: float
    samples: int
    filtered: int = 0

    def row(self) -> dict:
        d = asdict(self)
        d.pop("filtered")
        return d


def _hits(rec: EvalRecord, n: int, g: int, alpha: float) -> np.ndarray:
    anns = to_array(rec.annotations[:g])
    preds = to_array(rec.predictions[:n])
    if len(preds) == 0:
        return np.zeros(len(anns), dtype=bool)
    return (iou_array(anns, preds) >= alpha).any(axis=1)


def recall_single(records: Sequence[EvalRecord], n: int, alpha: float) -> float:
    if not records:
        raise ValueError("empty evaluation set")
    hit = 0
    for r in records:
        if len(r.annotations) != 1:
            raise ValueError(f"{r.id}: single-label recall needs exactly one annotation, got {len(r.annotations)}")
        hit += bool(_hits(r, n, 1, alpha)[0])
    return 100.0 * hit / len(records)


def recall_multi(records: Sequence[EvalRecord], n: int, g: int, alpha: float, aggregate: str = "pooled") -> float:
    """Multi-label recall; ``aggregate`` is ``"pooled"`` (over annotations) or ``"sample"`` (per-sample mean)."""
    if not records:
        raise ValueError("empty evaluation set")
    hits = [_hits(r, n, g, alpha) for r in records]
    if aggregate == "pooled":
        return 100.0 * float(np.concatenate(hits).mean())
    if aggregate == "sample":
        return 100.0 * float(np.mean([h.mean() for h in hits]))
    raise ValueError(f"unknown aggregate {aggregate!r}")


def avg_pairwise_iou(annotations: Sequence[Interval]) -> float:
    if len(annotations) < 2:
        raise ValueError("need at least two annotations")
    pairs = list(combinations(annotations, 2))
    return sum(iou(a, b) for a, b in pairs) / len(pairs)


def agreement(rec: EvalRecord, g: int) -> float:
    """Mean pairwise IoU of the first ``g`` annotations; a lone annotation agrees with itself."""
    anns = rec.annotations[:g]
    return 1.0 if len(anns) < 2 else avg_pairwise_iou(anns)


def filter_by_agreement(records: Sequence[EvalRecord], g: int, beta: float) -> list[EvalRecord]:
    return [r for r in records if agreement(r, g) >= beta]


def recall_multi_filtered(
    records: Sequence[EvalRecord], n: int, g: int, alpha: float, beta: float, aggregate: str = "pooled"
) -> float:
    kept = filter_by_agreement(records, g, beta)
    if not kept:
        raise ValueError("empty evaluation set")
    return recall_multi(kept, n, g, alpha, aggregate)


def standard_report(
    multi: Sequence[EvalRecord],
    single: Sequence[EvalRecord] | None = None,
    n_values=(1, 5),
    alphas=(0.3, 0.5, 0.7),
    g: int = 5,
    betas=(0.5, 0.4),
    aggregate: str = "pooled",
) -> list[MetricReport]:
    """The metric table used by ``evaluate`` and the ``eval`` command."""
    out: list[MetricReport] = []
    if single:
        for n in n_values:
            for a in alphas:
                out.append(MetricReport("R@N", n, None, a, None, recall_single(single, n, a), len(single)))
    n_max = max(n_values)
    for a in alphas:
        out.append(MetricReport("R@(N,G)", n_max, g, a, None, recall_multi(multi, n_max, g, a, aggregate), len(multi)))
    for b in betas:
        kept = filter_by_agreement(multi, g, b)
        value = recall_multi(kept, n_max, g, 0.5, aggregate) if kept else float("nan")
        out.append(MetricReport("R_beta@(N,G)", n_max, g, 0.5, b, value, len(kept), len(multi) - len(kept)))
    return out


def report_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "n", "g", "alpha", "beta", "value", "samples"])
    for r in reports:
        w.writerow([r.metric, r.n, "" if r.g is None else r.g, r.alpha, "" if r.beta is None else r.beta, f"{r.value:.4f}", r.samples])
    return buf.getvalue()
