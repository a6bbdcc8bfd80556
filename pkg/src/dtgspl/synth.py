"""Synthetic multi-positive grounding benchmark.

Each sample plants one or more instances of a single event (a verb/noun pair)
in a clip feature sequence. The complete set of instances is the oracle label
set; the learner only ever receives one of them, drawn uniformly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lattice import ProposalSet
from .temporal import Interval, iou_array, to_array

VERBS = ("open", "close", "pour", "hold", "throw", "wash")
NOUNS = ("door", "cup", "book", "towel", "bag", "window")
FILLERS = ("person", "the", "a", "then", "again", "quickly")


@dataclass(frozen=True)
class Vocabulary:
    nouns: tuple[str, ...]
    verbs: tuple[str, ...]
    fillers: tuple[str, ...]
    event_templates: tuple[tuple[str, str], ...]

    def __post_init__(self):
        toks = self.tokens
        if len(set(toks)) != len(toks):
            raise ValueError("vocabulary tokens must be unique")

    @property
    def tokens(self) -> tuple[str, ...]:
        return self.verbs + self.nouns + self.fillers

    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}


def default_vocabulary(n_templates: int = 8) -> Vocabulary:
    # Pairs share words across templates, so BLEU-1 between different events can be 0.5.
    templates = [(VERBS[i % len(VERBS)], NOUNS[(i + i // len(VERBS)) % len(NOUNS)]) for i in range(n_templates)]
    if len(set(templates)) != len(templates):
        raise ValueError(f"cannot build {n_templates} distinct templates")
    return Vocabulary(NOUNS, VERBS, FILLERS, tuple(templates))


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 500
    t_v: int = 32
    d_v: int = 16
    n_templates: int = 8
    positives: tuple[int, ...] = (1, 2, 3, 4, 5)
    min_width: int = 3
    max_width: int = 6
    min_gap: int = 2
    noise: float = 0.6
    jitter: float = 1.0
    n_fillers: int = 2
    world_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(int(p) for p in np.atleast_1d(self.positives)))
        if self.n_samples < 1 or self.t_v < 1 or self.d_v < 1:
            raise ValueError("n_samples, t_v and d_v must be positive")
        if min(self.positives) < 1:
            raise ValueError("every sample needs at least one positive")
        if not 1 <= self.min_width <= self.max_width:
            raise ValueError("need 1 <= min_width <= max_width")
        g = max(self.positives)
        if g * self.min_width + (g - 1) * self.min_gap > self.t_v:
            raise ValueError(f"cannot pack {g} instances of width >= {self.min_width} into {self.t_v} clips")
        if self.jitter < 0 or 2 * self.jitter > self.min_gap and g > 1:
            raise ValueError("jitter must be in [0, min_gap / 2] to keep positives disjoint")

    @property
    def g_max(self) -> int:
        return max(self.positives)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["positives"] = list(self.positives)
        return d


@dataclass(frozen=True, eq=False)
class Sample:
    """What a learner may see: features, query, and one observed positive."""

    id: str
    clips: np.ndarray = field(repr=False)
    query: tuple[tuple[str, str], ...]
    observed: Interval
    template: int = -1

    @property
    def tokens(self) -> list[str]:
        return [t for t, _ in self.query]

    @property
    def targets(self) -> list[str]:
        """Verb and noun tokens of the query, in query order."""
        return [t for t, pos in self.query if pos in ("VERB", "NOUN")]

    def view(self) -> "Sample":
        return self


@dataclass(frozen=True, eq=False)
class OracleSample(Sample):
    full_positives: tuple[Interval, ...] = ()

    def __post_init__(self):
        if not self.full_positives:
            raise ValueError(f"{self.id}: oracle sample without positives")
        if self.observed not in self.full_positives:
            raise ValueError(f"{self.id}: observed label is not one of the full positives")

    def view(self) -> Sample:
        """Training view with the hidden positives stripped."""
        return Sample(self.id, self.clips, self.query, self.observed, self.template)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    config: SynthConfig
    seed: int

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def training_view(self) -> list[Sample]:
        return [s.view() for s in self.samples]


def _prototypes(cfg: SynthConfig, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(cfg.world_seed)
    word = {t: rng.normal(size=cfg.d_v) for t in vocab.verbs + vocab.nouns}
    events = np.stack([word[v] + word[n] for v, n in vocab.event_templates]) / np.sqrt(2.0)
    background = rng.normal(size=cfg.d_v)
    return events, background


def _place(rng: np.random.Generator, cfg: SynthConfig, g: int) -> list[tuple[int, int]]:
    for _ in range(1000):
        widths = rng.integers(cfg.min_width, cfg.max_width + 1, size=g)
        free = cfg.t_v - widths.sum() - (g - 1) * cfg.min_gap
        if free >= 0:
            break
    else:
        widths = np.full(g, cfg.min_width)
        free = cfg.t_v - widths.sum() - (g - 1) * cfg.min_gap
    # random composition of the free clips into g + 1 slack slots
    cuts = np.sort(rng.integers(0, free + 1, size=g))
    slack = np.diff(np.concatenate([[0], cuts, [free]]))
    spans, t = [], 0
    for i in range(g):
        t += slack[i] + (cfg.min_gap if i else 0)
        spans.append((int(t), int(t + widths[i])))
        t += widths[i]
    return spans


def expose_single_positive(sample: OracleSample, seed) -> Interval:
    if not getattr(sample, "full_positives", ()):
        raise ValueError("sample has no positives to expose")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample.full_positives[int(rng.integers(len(sample.full_positives)))]


def gen_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    vocab = default_vocabulary(cfg.n_templates)
    events, background = _prototypes(cfg, vocab)
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(cfg.n_samples):
        tpl = int(rng.integers(len(vocab.event_templates)))
        g = int(rng.choice(cfg.positives))
        spans = _place(rng, cfg, g)
        member = np.zeros(cfg.t_v, dtype=bool)
        for s, e in spans:
            member[s:e] = True
        clips = np.where(member[:, None], events[tpl], background) + cfg.noise * rng.normal(size=(cfg.t_v, cfg.d_v))
        clips = np.round(clips, 5)

        positives = []
        for s, e in spans:
            js, je = rng.uniform(-cfg.jitter, cfg.jitter, size=2)
            lo = min(max(s + js, 0.0), cfg.t_v - 0.5)
            hi = max(min(e + je, float(cfg.t_v)), lo + 0.5)
            positives.append(Interval(round(lo / cfg.t_v, 6), round(hi / cfg.t_v, 6)))

        verb, noun = vocab.event_templates[tpl]
        query = [(verb, "VERB"), (noun, "NOUN")]
        for _ in range(cfg.n_fillers):
            pos = int(rng.integers(len(query) + 1))
            query.insert(pos, (str(rng.choice(vocab.fillers)), "X"))

        proto = OracleSample(f"s{k:05d}", clips, tuple(query), positives[0], tpl, tuple(positives))
        observed = expose_single_positive(proto, rng)
        samples.append(replace(proto, observed=observed))
    return Dataset(tuple(samples), cfg, seed)


def oracle_labels(sample: OracleSample, proposals: ProposalSet, iou_pos: float = 0.7) -> np.ndarray:
    """Full proposal labels: 1 where a proposal reaches ``iou_pos`` with any hidden positive."""
    ious = iou_array(proposals.bounds, to_array(sample.full_positives))
    return (ious.max(axis=1) >= iou_pos).astype(int)


# --- line-delimited JSON io -------------------------------------------------------------


def sample_to_json(sample: Sample, with_oracle: bool = True) -> dict:
    d = {
        "id": sample.id,
        "clips": sample.clips.tolist(),
        "query": [{"tok": t, "pos": p} for t, p in sample.query],
        "observed": sample.observed.as_list(),
    }
    if with_oracle and isinstance(sample, OracleSample):
        d["full_positives"] = [iv.as_list() for iv in sample.full_positives]
    d["meta"] = {"template": sample.template}
    return d


def sample_from_json(d: dict, with_oracle: bool = True) -> Sample:
    clips = np.asarray(d["clips"], dtype=float)
    query = tuple((q["tok"], q["pos"]) for q in d["query"])
    observed = Interval.coerce(d["observed"])
    tpl = int(d.get("meta", {}).get("template", -1))
    if with_oracle and "full_positives" in d:
        return OracleSample(d["id"], clips, query, observed, tpl, tuple(Interval.coerce(p) for p in d["full_positives"]))
    return Sample(d["id"], clips, query, observed, tpl)


def write_jsonl(path, samples: Iterable[Sample], with_oracle: bool = True) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s, with_oracle), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path, with_oracle: bool = True) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(sample_from_json(json.loads(line), with_oracle))
    return out


def require_oracle(samples: Sequence[Sample]) -> list[OracleSample]:
    missing = [s.id for s in samples if not isinstance(s, OracleSample)]
    if missing:
        raise ValueError(f"{len(missing)} samples lack full_positives (first: {missing[0]})")
    return list(samples)


def write_dataset(out_dir, ds: Dataset, split: bool = False) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "oracle.jsonl"]
    write_jsonl(written[0], ds.samples, with_oracle=True)
    if split:
        written.append(out / "train.jsonl")
        write_jsonl(written[1], ds.samples, with_oracle=False)
    meta = {"config": ds.config.to_dict(), "seed": ds.seed, "n_samples": len(ds)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(out / "dataset.json")
    return written
