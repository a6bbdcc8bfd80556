"""Experiment orchestration: run configs, training, ablations, evaluation and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
import yaml

from .estimator import ABLATIONS, DTGSPL
from .metrics import EvalRecord, MetricReport, recall_multi, report_csv, standard_report
from .pme import PseudoLabelSet
from .synth import OracleSample, Sample, SynthConfig, gen_dataset, read_jsonl, require_oracle
from .temporal import iou_array, to_array

log = logging.getLogger(__name__)

_MODEL_KEYS = frozenset(DTGSPL().get_params())


@dataclass
class RunConfig:
    """Everything a run needs. ``model`` holds :class:`DTGSPL` parameters."""

    seed: int = 7
    data: SynthConfig = field(default_factory=SynthConfig)
    dataset: str | None = None  # directory written by ``gen`` or a training jsonl
    test: str | None = None  # oracle jsonl used for monitoring and final metrics
    test_samples: int = 200
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        unknown = set(self.model) - _MODEL_KEYS
        if unknown:
            raise ValueError(f"unknown model parameters: {sorted(unknown)}")
        if self.test_samples < 1:
            raise ValueError("test_samples must be >= 1")
        # k equals the number of predictions unless set explicitly
        if "k" not in self.model:
            self.model = {**self.model, "k": float(self.model.get("n_outputs", 5))}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data" in d:
            d["data"] = SynthConfig.from_dict(d["data"] or {})
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = self.data.to_dict()
        return d

    def estimator(self, **overrides) -> DTGSPL:
        return DTGSPL(**{"seed": self.seed, **self.model, **overrides})


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read a YAML config (``None`` gives the defaults); ``seed`` overrides the file."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
    cfg = RunConfig.from_dict(raw)
    return cfg if seed is None else replace(cfg, seed=seed)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_lines(path, rows) -> None:
    with open(path, "w") as fh:
        for r in rows:
            fh.write(dump_json(r) + "\n")


def read_lines(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- data ----------------------------------------------------------------------------------


def load_training(cfg: RunConfig) -> list[Sample]:
    """Training views only; oracle positives never cross this boundary."""
    if cfg.dataset is None:
        return gen_dataset(cfg.data, cfg.seed).training_view()
    p = Path(cfg.dataset)
    if p.is_dir():
        p = p / "train.jsonl" if (p / "train.jsonl").exists() else p / "oracle.jsonl"
    return read_jsonl(p, with_oracle=False)


def load_oracle(cfg: RunConfig) -> dict[str, OracleSample] | None:
    """Oracle samples of the training set, for monitoring only."""
    if cfg.dataset is None:
        return {s.id: s for s in gen_dataset(cfg.data, cfg.seed)}
    p = Path(cfg.dataset)
    p = p / "oracle.jsonl" if p.is_dir() else p
    if not p.exists():
        return None
    got = [s for s in read_jsonl(p) if isinstance(s, OracleSample)]
    return {s.id: s for s in got} or None


def load_test(cfg: RunConfig) -> list[OracleSample]:
    if cfg.test is not None:
        return require_oracle(read_jsonl(cfg.test))
    return list(gen_dataset(replace(cfg.data, n_samples=cfg.test_samples), cfg.seed + 1000).samples)


# --- training ------------------------------------------------------------------------------


def pseudo_quality(pseudo: dict[str, PseudoLabelSet], oracle: dict[str, OracleSample], alpha: float = 0.5):
    """(precision, recall) of pseudo-labels against oracle positives at IoU >= ``alpha``."""
    tp = n_pred = found = n_true = 0
    for sid, p in pseudo.items():
        gt = to_array(oracle[sid].full_positives)
        pa = p.as_array()
        n_true += len(gt)
        n_pred += len(pa)
        if len(pa):
            hit = iou_array(pa, gt) >= alpha
            tp += int(hit.any(axis=1).sum())
            found += int(hit.any(axis=0).sum())
    precision = tp / n_pred if n_pred else 0.0
    return precision, found / n_true if n_true else 0.0


def multi_records(est: DTGSPL, samples: Sequence[OracleSample]) -> list[EvalRecord]:
    preds = est.predict(samples)
    return [EvalRecord.build(s.id, p, s.full_positives) for s, p in zip(samples, preds)]


def make_monitor(oracle: dict[str, OracleSample] | None, test: Sequence[OracleSample] | None):
    def monitor(epoch, pseudo, est):
        out = {}
        if oracle is not None:
            out["precision"], out["recall"] = pseudo_quality(pseudo, oracle)
        if test:
            out["metrics"] = {"R@(5,G),IoU=0.5": recall_multi(multi_records(est, test), est.n_outputs, 5, 0.5)}
        return out

    return monitor


@dataclass
class RunResult:
    estimator: DTGSPL
    metrics: list[MetricReport]

    @property
    def history(self):
        return self.estimator.history_

    def metric(self, name: str = "R@(N,G)", alpha: float = 0.5, beta=None) -> float:
        for r in self.metrics:
            if r.metric == name and r.alpha == alpha and r.beta == beta:
                return r.value
        raise KeyError(name)


def train(cfg: RunConfig, out_dir=None, **overrides) -> RunResult:
    """Fit one model; with ``out_dir`` write checkpoint, logs, pseudo-labels and metrics."""
    samples = load_training(cfg)
    oracle = load_oracle(cfg)
    test = load_test(cfg)
    est = cfg.estimator(**overrides)
    est.fit(samples, monitor=make_monitor(oracle, test))
    metrics = evaluate(est, test)
    if out_dir is not None:
        write_run(Path(out_dir), cfg, est, metrics)
    return RunResult(est, metrics)


def write_run(out: Path, cfg: RunConfig, est: DTGSPL, metrics: list[MetricReport]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    est.save(out / "checkpoint.json")
    write_lines(out / "history.jsonl", [h.to_dict() for h in est.history_])
    write_lines(out / "pseudo.jsonl", [est.pseudo_labels_[k].to_json(k) for k in sorted(est.pseudo_labels_)])
    (out / "metrics.csv").write_text(report_csv(metrics))


# --- ablation ------------------------------------------------------------------------------


def ablate(cfg: RunConfig, modes: Sequence[str] = ABLATIONS, out_dir=None) -> list[dict]:
    """Train the full model and each variant under the same seed; paired metric rows."""
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise ValueError(f"unknown ablation mode(s) {bad}; expected {list(ABLATIONS)}")
    runs = {"full": train(cfg, None if out_dir is None else Path(out_dir) / "full")}
    for m in modes:
        runs[m] = train(cfg, None if out_dir is None else Path(out_dir) / m, **{m: True})
    rows = []
    for m in modes:
        for ref, var in zip(runs["full"].metrics, runs[m].metrics):
            rows.append({
                "mode": m, "metric": ref.metric, "n": ref.n, "g": ref.g, "alpha": ref.alpha, "beta": ref.beta,
                "full": ref.value, "variant": var.value, "delta": ref.value - var.value,
            })
    if out_dir is not None:
        Path(out_dir, "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["mode", "metric", "n", "g", "alpha", "beta", "full", "variant", "delta"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else f"{r[k]:.4f}" if k in ("full", "variant", "delta") else r[k]) for k in cols})
    return buf.getvalue()


# --- evaluation ----------------------------------------------------------------------------


def evaluate(est_or_predictions, oracle: Sequence[Sample]) -> list[MetricReport]:
    """Score a fitted estimator (or ``{id: predictions}``) against oracle samples.

    Single-label recall uses the observed interval, multi-label recall the
    hidden positives.
    """
    oracle = require_oracle(oracle)
    if isinstance(est_or_predictions, DTGSPL):
        preds = dict(zip((s.id for s in oracle), est_or_predictions.predict(oracle)))
    else:
        preds = dict(est_or_predictions)
        missing = sorted(set(s.id for s in oracle) - set(preds))
        extra = sorted(set(preds) - set(s.id for s in oracle))
        if missing or extra:
            raise ValueError(f"prediction ids do not match the oracle: {len(missing)} missing, {len(extra)} unknown "
                             f"(e.g. {(missing or extra)[0]})")
    single = [EvalRecord.build(s.id, preds[s.id], [s.observed]) for s in oracle]
    multi = [EvalRecord.build(s.id, preds[s.id], s.full_positives) for s in oracle]
    return standard_report(multi, single)


# --- report --------------------------------------------------------------------------------

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["epochs", "final", "metrics", "pseudo_recall_gain"],
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "final": {
            "type": "object",
            "required": ["l_total", "l_pme", "l_dmr", "pseudo_count"],
            "properties": {
                "l_total": {"type": "number"},
                "l_pme": {"type": "number"},
                "l_dmr": {"type": "number"},
                "pseudo_count": {"type": "number", "minimum": 0},
                "precision": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                "recall": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
            },
        },
        "metrics": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["metric", "n", "g", "alpha", "beta", "value", "samples"],
                "properties": {
                    "metric": {"type": "string"},
                    "n": {"type": "integer"},
                    "g": {"type": ["integer", "null"]},
                    "alpha": {"type": "number"},
                    "beta": {"type": ["number", "null"]},
                    "value": {"type": ["number", "null"]},
                    "samples": {"type": "integer"},
                },
            },
        },
        "pseudo_recall_gain": {"type": ["number", "null"]},
    },
}

CURVE_COLUMNS = ("epoch", "l_total", "l_pme", "l_match", "l_semantic", "l_dmr", "pseudo_used", "pseudo_count",
                 "sum_match", "precision", "recall")
RUN_FILES = ("history.jsonl", "metrics.csv")


def report(run_dir, out_dir=None) -> dict:
    """Write ``curves.csv`` and ``summary.json`` for a finished run; returns the summary."""
    run = Path(run_dir)
    absent = [f for f in RUN_FILES if not (run / f).is_file()]
    if absent:
        raise FileNotFoundError(f"{run}: missing run artifacts {absent}")
    history = read_lines(run / "history.jsonl")
    with open(run / "metrics.csv") as fh:
        metric_rows = list(csv.DictReader(fh))

    metric_names = sorted({k for h in history for k in h.get("metrics", {})})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(CURVE_COLUMNS) + metric_names)
    for h in history:
        w.writerow([_cell(h.get(c)) for c in CURVE_COLUMNS] + [_cell(h.get("metrics", {}).get(m)) for m in metric_names])

    def num(v, cast=float):
        return None if v in ("", None) or v == "nan" else cast(float(v))

    metrics = [
        {"metric": r["metric"], "n": int(r["n"]), "g": num(r["g"], int), "alpha": float(r["alpha"]),
         "beta": num(r["beta"]), "value": num(r["value"]), "samples": int(r["samples"])}
        for r in metric_rows
    ]
    last = history[-1] if history else {}
    rec = [h.get("recall") for h in history]
    gain = rec[-1] - rec[1] if len(rec) > 1 and rec[-1] is not None and rec[1] is not None else None
    summary = {
        "epochs": len(history),
        "final": {k: last.get(k) for k in ("l_total", "l_pme", "l_dmr", "pseudo_count", "precision", "recall")} if last
        else {"l_total": 0.0, "l_pme": 0.0, "l_dmr": 0.0, "pseudo_count": 0.0},
        "metrics": metrics,
        "pseudo_recall_gain": gain,
    }
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    out = Path(out_dir) if out_dir is not None else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "curves.csv").write_text(buf.getvalue())
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def oracle_predictions(samples: Sequence[OracleSample], n: int = 5) -> dict[str, np.ndarray]:
    """Stub predictor returning the observed label first, then the other hidden positives."""
    out = {}
    for s in require_oracle(samples):
        pos = to_array([s.observed] + [p for p in s.full_positives if p != s.observed])
        out[s.id] = pos[np.arange(n) % len(pos)]
    return out
