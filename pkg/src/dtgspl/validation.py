"""Input validation helpers shared by the estimator, harness and CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .synth import Sample
from .temporal import Interval


def check_interval(value, name: str = "interval") -> Interval:
    try:
        return Interval.coerce(value)
    except (TypeError, ValueError) as err:
        raise ValueError(f"{name}: {err}") from None


def check_samples(X: Sequence[Sample], require_uniform: bool = True) -> list[Sample]:
    """Validate a list of samples; returns it as a list.

    All samples must share clip-array shape and query length so batches stack.
    """
    samples = list(X)
    if not samples:
        raise ValueError("expected at least one sample")
    shape, t_l = None, None
    for s in samples:
        if not isinstance(s, Sample):
            raise TypeError(f"expected Sample, got {type(s).__name__}")
        clips = np.asarray(s.clips)
        if clips.ndim != 2 or clips.shape[0] < 1:
            raise ValueError(f"{s.id}: clips must be a nonempty (T_v, d_v) array")
        if not np.all(np.isfinite(clips)):
            raise ValueError(f"{s.id}: non-finite clip features")
        if not s.query:
            raise ValueError(f"{s.id}: empty query")
        if require_uniform:
            if shape is None:
                shape, t_l = clips.shape, len(s.query)
            elif clips.shape != shape or len(s.query) != t_l:
                raise ValueError(f"{s.id}: clip shape/query length differ from the first sample")
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    return samples
