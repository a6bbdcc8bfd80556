"""Scikit-learn style estimator wrapping the joint grounding network."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import kernel as K
from .model import UNK, GroundingNet, NetConfig
from .pme import PseudoLabelSet, estimate_positives
from .synth import Sample
from .validation import check_samples

log = logging.getLogger(__name__)

ABLATIONS = ("no_epr", "no_matching", "no_reconstruction", "no_augmenting")


@dataclass
class EpochLog:
    epoch: int
    l_total: float
    l_pme: float
    l_match: float
    l_semantic: float
    l_dmr: float
    pseudo_used: int
    pseudo_count: float
    sum_match: float
    order_digest: str = ""
    precision: float | None = None
    recall: float | None = None
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


class DTGSPL(BaseEstimator):
    """Diverse temporal grounding from single positive labels.

    ``fit`` takes a list of :class:`~dtgspl.synth.Sample` training views (one
    observed interval each). ``predict`` returns an ``(n_samples, n_outputs,
    2)`` array of ranked ``[start, end]`` moments; slot 0 is the
    single-positive head.

    After every epoch the PME scorers re-estimate pseudo-positives for every
    training sample; those feed the regression loss of the next epoch. The
    first epoch trains on observed labels only.
    """

    def __init__(
        self,
        d_m: int = 32,
        d_l: int = 16,
        layers: int = 1,
        dec_layers: int = 1,
        n_outputs: int = 5,
        lattice_n: int = 16,
        k: float = 5.0,
        gamma1: float = 0.1,
        gamma2: float = 0.05,
        lam: float = 0.5,
        t_thresh: float = 0.5,
        s_thresh: float | None = None,
        nms_thresh: float = 0.5,
        n_s: int = 5,
        t_s: int = 2,
        semantic_reference: str = "generated",
        optimizer: str = "adam",
        lr: float = 1e-2,
        lr_schedule: str = "cosine",
        beta1: float = 0.9,
        beta2: float = 0.999,
        batch_size: int = 16,
        epochs: int = 30,
        seed: int = 0,
        no_epr: bool = False,
        no_matching: bool = False,
        no_reconstruction: bool = False,
        no_augmenting: bool = False,
    ):
        self.d_m = d_m
        self.d_l = d_l
        self.layers = layers
        self.dec_layers = dec_layers
        self.n_outputs = n_outputs
        self.lattice_n = lattice_n
        self.k = k
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.lam = lam
        self.t_thresh = t_thresh
        self.s_thresh = s_thresh
        self.nms_thresh = nms_thresh
        self.n_s = n_s
        self.t_s = t_s
        self.semantic_reference = semantic_reference
        self.optimizer = optimizer
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.no_epr = no_epr
        self.no_matching = no_matching
        self.no_reconstruction = no_reconstruction
        self.no_augmenting = no_augmenting

    # --- helpers -------------------------------------------------------------------------

    def _validate_params(self) -> None:
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")
        if self.no_matching and self.no_reconstruction:
            raise ValueError("cannot drop both the matching and the reconstruction scorer")
        if self.semantic_reference not in ("generated", "query"):
            raise ValueError("semantic_reference must be 'generated' or 'query'")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def _net_config(self, samples: Sequence[Sample]) -> NetConfig:
        t_v, d_v = samples[0].clips.shape
        return NetConfig(
            d_v=d_v, t_v=t_v, d_l=self.d_l, d_m=self.d_m, layers=self.layers, dec_layers=self.dec_layers, n_outputs=self.n_outputs,
            lattice_n=self.lattice_n, t_s=self.t_s, n_s=self.n_s, k=self.k, gamma1=self.gamma1,
            gamma2=self.gamma2, lam=self.lam, no_epr=self.no_epr, no_matching=self.no_matching,
            no_reconstruction=self.no_reconstruction, no_augmenting=self.no_augmenting,
        )

    def _batches(self, samples: Sequence[Sample], size: int):
        for i in range(0, len(samples), size):
            yield samples[i : i + size]

    def _lr(self, progress: float) -> float:
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + np.cos(np.pi * progress))
        return self.lr

    def _step(self, lr: float) -> None:
        if self.optimizer == "adam":
            K.adamlike_step(self.net_.store, lr, self.beta1, self.beta2)
        else:
            K.sgd_step(self.net_.store, lr)

    # --- public API ----------------------------------------------------------------------

    def fit(self, X: Sequence[Sample], y=None, monitor: Callable | None = None):
        """Train on training views ``X``.

        ``monitor(epoch, pseudo_by_id, estimator)`` may return a dict with
        ``precision``/``recall``/``metrics`` entries that are merged into that
        epoch's log; it is the only place hidden labels can be consulted.
        """
        self._validate_params()
        samples = [s.view() for s in check_samples(X)]
        vocab = sorted({t for s in samples for t in s.tokens}) + [UNK]
        self.net_ = GroundingNet(self._net_config(samples), vocab, self.seed)
        self.history_: list[EpochLog] = []
        self.pseudo_labels_: dict[str, PseudoLabelSet] = {}
        # separate streams keep the data order identical across ablation variants
        order_rng, aug_rng = (np.random.default_rng(c) for c in np.random.SeedSequence(self.seed).spawn(2))
        pseudo: dict[str, PseudoLabelSet] = {}
        n_steps = self.epochs * -(-len(samples) // self.batch_size)
        step = 0

        for epoch in range(1, self.epochs + 1):
            order = order_rng.permutation(len(samples))
            acc = np.zeros(6)
            sum_match, seen = 0.0, 0
            for chunk in self._batches(order, self.batch_size):
                group = [samples[i] for i in chunk]
                b = self.net_.batch(group)
                pl = [pseudo[s.id].as_array() for s in group] if epoch > 1 else None
                out = self.net_.loss_and_grad(b, pl, aug_rng)
                if not np.isfinite(out.total):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch starting with sample {b.ids[0]}")
                self._step(self._lr(step / n_steps))
                step += 1
                n = len(group)
                acc += n * np.array([out.total, out.pme, out.match, out.semantic, out.dmr, 0.0])
                acc[5] += out.pseudo_used
                sum_match += n * out.sum_match
                seen += n
            pseudo = self._estimate(samples, epoch)
            entry = EpochLog(
                epoch, *(acc[:5] / seen), int(acc[5]),
                float(np.mean([len(p) for p in pseudo.values()])), sum_match / seen,
                hashlib.sha1(",".join(samples[i].id for i in order).encode()).hexdigest()[:12],
            )
            if monitor is not None:
                extra = monitor(epoch, pseudo, self) or {}
                entry.precision = extra.get("precision")
                entry.recall = extra.get("recall")
                entry.metrics = extra.get("metrics", {})
            self.history_.append(entry)
            log.info("epoch %d loss %.4f pseudo %.2f P %s R %s", epoch, entry.l_total, entry.pseudo_count, entry.precision, entry.recall)
        self.pseudo_labels_ = pseudo
        return self

    def _estimate(self, samples: Sequence[Sample], epoch: int) -> dict[str, PseudoLabelSet]:
        out = {}
        for group in self._batches(list(samples), 64):
            b = self.net_.batch(group)
            m, s = self.net_.scores(b, self.semantic_reference)
            for i, sid in enumerate(b.ids):
                out[sid] = estimate_positives(
                    None if m is None else m[i], None if s is None else s[i], self.net_.lattice,
                    self.t_thresh, self.nms_thresh, self.n_outputs, epoch, self.s_thresh,
                )
        return out

    def estimate_positives(self, X: Sequence[Sample]) -> dict[str, PseudoLabelSet]:
        """Pseudo-positive labels for ``X`` under the current parameters."""
        check_is_fitted(self, "net_")
        samples = [s.view() for s in check_samples(X)]
        return self._estimate(samples, len(getattr(self, "history_", [])))

    def predict_moments(self, X: Sequence[Sample]):
        """Raw ``(se, cw)`` arrays, each (n_samples, n_outputs, 2)."""
        check_is_fitted(self, "net_")
        samples = check_samples(X)
        se, cw = [], []
        for group in self._batches(list(samples), 64):
            p = self.net_.predict(self.net_.batch(group))
            se.append(np.stack([[iv.as_list() for iv in p.intervals(b)] for b in range(len(group))]))
            cw.append(p.cw)
        return np.concatenate(se), np.concatenate(cw)

    def predict(self, X: Sequence[Sample]) -> np.ndarray:
        return self.predict_moments(X)[0]

    def score(self, X: Sequence[Sample], y=None) -> float:
        """R@(N, G) at IoU 0.5 against hidden positives when present, else R@1 vs observed."""
        from .metrics import EvalRecord, recall_multi, recall_single

        preds = self.predict(X)
        if all(hasattr(s, "full_positives") for s in X):
            recs = [EvalRecord.build(s.id, p, s.full_positives) for s, p in zip(X, preds)]
            return recall_multi(recs, self.n_outputs, 5, 0.5) / 100.0
        recs = [EvalRecord.build(s.id, p, [s.observed]) for s, p in zip(X, preds)]
        return recall_single(recs, 1, 0.5) / 100.0

    # --- persistence ---------------------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        meta = {"estimator": self.get_params()}
        with open(path, "w") as fh:
            fh.write(self.net_.to_json(meta))

    @classmethod
    def load(cls, path) -> "DTGSPL":
        with open(path) as fh:
            net, meta = GroundingNet.from_json(fh.read())
        est = cls(**meta.get("estimator", {}))
        est.net_ = net
        est.history_ = []
        return est
