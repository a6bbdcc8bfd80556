"""Positive moment estimation.

Two lightweight scorers look at every lattice proposal: a matching head trained
only on the observed positive plus an expected-positive-count penalty, and a
word generator trained to reconstruct the query's verb and noun from features
of the observed moment. Proposals that either scorer accepts are de-duplicated
with NMS and become pseudo-positives for the regression module.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernel as K
from .lattice import ProposalSet
from .temporal import Interval, interval_mask

LOG_EPS = 1e-12


# --- proposal matching -------------------------------------------------------------------


def add_match_head(store: K.ParamStore, d_in: int, d_hidden: int) -> None:
    store.add_affine("match.hidden", d_in, d_hidden)
    store.add_affine("match.out", d_hidden, 1)


def match_scores(store: K.ParamStore, features: np.ndarray):
    """Sigmoid matching score per proposal from its ``(..., C, d)`` features."""
    h, b1 = K.affine(store, "match.hidden", features)
    h, b2 = K.relu(h)
    logit, b3 = K.affine(store, "match.out", h)
    s, b4 = K.sigmoid(logit[..., 0])

    def back(ds):
        return b1(b2(b3(b4(ds)[..., None])))

    return s, back


def epr_loss(scores: np.ndarray, positive: np.ndarray | int, k: float, gamma1: float) -> tuple[float, np.ndarray]:
    """Observed-positive log loss plus the expected positive count penalty.

    ``scores`` is (C,) or (B, C); ``positive`` holds the index of the observed
    proposal per row. Unobserved proposals enter only through the count
    penalty. Returns the batch-mean loss and its gradient wrt ``scores``.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    pos = np.atleast_1d(np.asarray(positive, dtype=int))
    if pos.shape[0] != s.shape[0]:
        raise ValueError("need exactly one positive index per score row")
    rows = np.arange(s.shape[0])
    sj = np.maximum(s[rows, pos], LOG_EPS)
    excess = s.sum(axis=1) - k
    per = -np.log(sj) + gamma1 * excess**2
    grad = np.broadcast_to((2.0 * gamma1 * excess)[:, None], s.shape).copy()
    grad[rows, pos] -= np.where(s[rows, pos] > LOG_EPS, 1.0 / sj, 0.0)
    grad /= s.shape[0]
    return float(per.mean()), grad.reshape(np.shape(scores))


def assume_negative_bce(scores: np.ndarray, positive: np.ndarray | int) -> tuple[float, np.ndarray]:
    """Binary cross-entropy with every unobserved proposal treated as negative.

    Summed over proposals so the observed positive keeps the same unit weight
    as in :func:`epr_loss`; averaged over the batch.
    """
    s = np.atleast_2d(np.asarray(scores, dtype=float))
    pos = np.atleast_1d(np.asarray(positive, dtype=int))
    rows = np.arange(s.shape[0])
    y = np.zeros_like(s)
    y[rows, pos] = 1.0
    p = np.clip(s, LOG_EPS, 1.0 - 1e-12)
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum(axis=1)
    grad = (-(y / p) + (1.0 - y) / (1.0 - p)) / s.shape[0]
    return float(per.mean()), grad.reshape(np.shape(scores))


# --- semantic reconstruction -------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorConfig:
    vocab: tuple[str, ...]
    t_s: int = 2
    n_s: int = 5

    def __post_init__(self):
        if self.t_s < 1 or self.n_s < 1:
            raise ValueError("t_s and n_s must be >= 1")

    @property
    def bos(self) -> int:
        return len(self.vocab)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        index = {t: i for i, t in enumerate(self.vocab)}
        try:
            return np.array([index[t] for t in tokens], dtype=int)
        except KeyError as err:
            raise KeyError(f"token {err.args[0]!r} not in generator vocabulary") from None


def add_generator(store: K.ParamStore, cfg: GeneratorConfig, d_in: int, d_hidden: int, d_emb: int = 16) -> None:
    store.add_affine("gen.init", d_in, d_hidden)
    store.add("gen.emb", (len(cfg.vocab) + 1, d_emb), "normal", 0.5)
    store.add_affine("gen.step", d_hidden + d_emb, d_hidden)
    store.add_affine("gen.out", d_hidden, len(cfg.vocab))


def augment_interval_features(clips: np.ndarray, z: Interval, n_s: int, rng) -> np.ndarray:
    """Random convex-combination weights over the clips inside ``z``.

    Returns an ``(n_s, T_v)`` weight matrix ``W`` (rows on the flat simplex,
    zero outside the mask); the augmented features are ``W @ clips``.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    t_v = np.shape(clips)[0]
    mask = interval_mask(z, t_v)
    w = np.zeros((n_s, t_v))
    w[:, mask] = rng.dirichlet(np.ones(mask.sum()), size=n_s)
    return w


def generator_nll(store: K.ParamStore, features: np.ndarray, targets: np.ndarray, bos: int):
    """Teacher-forced negative log-likelihood of ``targets`` (M, T_s) given features (M, d).

    Returns ``(loss, back)`` where the loss is the mean over all M * T_s steps
    and ``back(1.0)`` yields the gradient wrt ``features``.
    """
    targets = np.asarray(targets, dtype=int)
    m, t_s = targets.shape
    h, b_init = K.affine(store, "gen.init", features)
    prev = np.concatenate([np.full((m, 1), bos), targets[:, :-1]], axis=1)
    emb, b_emb = K.embedding(store, "gen.emb", prev)
    steps = []
    total = 0.0
    for t in range(t_s):
        pre, b_step = K.affine(store, "gen.step", np.concatenate([h, emb[:, t]], axis=-1))
        h, b_tanh = K.tanh(pre)
        logits, b_out = K.affine(store, "gen.out", h)
        loss_t, _, d_logits = K.softmax_xent(logits, targets[:, t])
        total += loss_t
        steps.append((b_step, b_tanh, b_out, d_logits))
    norm = 1.0 / (m * t_s)

    def back(dloss=1.0):
        dh = np.zeros_like(h)
        d_emb = np.zeros_like(emb)
        d_in = h.shape[-1]
        for t in reversed(range(t_s)):
            b_step, b_tanh, b_out, d_logits = steps[t]
            dh = dh + b_out(d_logits * (dloss * norm))
            dcat = b_step(b_tanh(dh))
            dh, d_emb[:, t] = dcat[:, :d_in], dcat[:, d_in:]
        b_emb(d_emb)
        return b_init(dh)

    return total * norm, back


def reconstruct_loss(store: K.ParamStore, cfg: GeneratorConfig, features: np.ndarray, targets: Sequence[str]) -> float:
    """Normalized captioning loss of one query's verb/noun targets over N_s features."""
    if len(targets) == 0:
        raise ValueError("reconstruction targets must be nonempty")
    ids = cfg.encode(targets)
    feats = np.atleast_2d(features)
    loss, _ = generator_nll(store, feats, np.tile(ids, (feats.shape[0], 1)), cfg.bos)
    return loss


def greedy_decode(store: K.ParamStore, features: np.ndarray, t_s: int, bos: int) -> np.ndarray:
    """Argmax word sequence (M, t_s) for each feature row."""
    feats = np.atleast_2d(features)
    m = feats.shape[0]
    h = feats @ store["gen.init.W"] + store["gen.init.b"]
    prev = np.full(m, bos)
    out = np.empty((m, t_s), dtype=int)
    emb = store["gen.emb"]
    for t in range(t_s):
        h = np.tanh(np.concatenate([h, emb[prev]], axis=-1) @ store["gen.step.W"] + store["gen.step.b"])
        prev = np.argmax(h @ store["gen.out.W"] + store["gen.out.b"], axis=-1)
        out[:, t] = prev
    return out


def bleu1(candidate: Sequence, reference: Sequence) -> float:
    """Clipped unigram precision times the brevity penalty."""
    if len(reference) == 0:
        raise ValueError("reference must be nonempty")
    if len(candidate) == 0:
        return 0.0
    ref = Counter(reference)
    hits = sum(min(c, ref[tok]) for tok, c in Counter(candidate).items())
    bp = np.exp(min(0.0, 1.0 - len(reference) / len(candidate)))
    return float(bp * hits / len(candidate))


def bleu1_batch(candidates: np.ndarray, references: np.ndarray, n_tokens: int) -> np.ndarray:
    """Row-wise :func:`bleu1` for integer token matrices (M, Lc) and (M, Lr)."""
    cand = np.atleast_2d(candidates)
    ref = np.atleast_2d(references)
    m = cand.shape[0]
    cc = np.zeros((m, n_tokens))
    rc = np.zeros((m, n_tokens))
    np.add.at(cc, (np.repeat(np.arange(m), cand.shape[1]), cand.ravel()), 1.0)
    np.add.at(rc, (np.repeat(np.arange(ref.shape[0]), ref.shape[1]), ref.ravel()), 1.0)
    hits = np.minimum(cc, rc).sum(axis=1)
    bp = np.exp(min(0.0, 1.0 - ref.shape[1] / cand.shape[1]))
    return bp * hits / cand.shape[1]


def semantic_scores(
    store: K.ParamStore,
    cfg: GeneratorConfig,
    proposals: ProposalSet,
    clips: np.ndarray,
    z: Interval,
    reference: Sequence[str] | None = None,
) -> np.ndarray:
    """BLEU-1 between words decoded from each proposal and from the labeled moment.

    ``clips`` are the (T_v, d) content embeddings fed to the generator. If
    ``reference`` tokens are given they replace the labeled moment's decode.
    """
    t_v = clips.shape[0]
    words = greedy_decode(store, proposals.pooling_matrix(t_v) @ clips, cfg.t_s, cfg.bos)
    if reference is None:
        zfeat = clips[interval_mask(z, t_v)].mean(axis=0)
        ref = greedy_decode(store, zfeat, cfg.t_s, cfg.bos)
    else:
        ref = cfg.encode(reference)[None]
    return bleu1_batch(words, np.repeat(ref, len(words), axis=0), len(cfg.vocab))


def pme_loss(match_loss: float, semantic_loss: float, gamma2: float) -> float:
    return match_loss + gamma2 * semantic_loss


# --- label estimation --------------------------------------------------------------------


@dataclass
class PseudoLabelSet:
    intervals: list[Interval]
    match: list[float] = field(default_factory=list)
    semantic: list[float] = field(default_factory=list)
    epoch: int = 0

    def __len__(self):
        return len(self.intervals)

    def as_array(self) -> np.ndarray:
        return np.array([[iv.start, iv.end] for iv in self.intervals], dtype=float).reshape(-1, 2)

    def to_json(self, sample_id: str) -> dict:
        return {
            "id": sample_id,
            "pseudo": [iv.as_list() for iv in self.intervals],
            "scores": [[m, s] for m, s in zip(self.match, self.semantic)],
            "epoch": self.epoch,
        }


def estimate_positives(
    mscores: np.ndarray | None,
    sscores: np.ndarray | None,
    proposals: ProposalSet,
    t_thresh: float = 0.5,
    nms_thresh: float = 0.5,
    n_outputs: int = 5,
    epoch: int = 0,
    s_thresh: float | None = None,
) -> PseudoLabelSet:
    """Pick up to ``n_outputs - 1`` pseudo-positive proposals.

    A proposal is discarded only when every available score is below its
    threshold (``s_thresh`` defaults to ``t_thresh``). Survivors are ranked by
    matching score (semantic score when matching is absent), suppressed with
    NMS and truncated.
    """
    if mscores is None and sscores is None:
        raise ValueError("need at least one score vector")
    c = len(proposals)
    s_thresh = t_thresh if s_thresh is None else s_thresh
    m = np.zeros(c) if mscores is None else np.asarray(mscores, dtype=float)
    s = np.zeros(c) if sscores is None else np.asarray(sscores, dtype=float)
    keep = np.zeros(c, dtype=bool)
    if mscores is not None:
        keep |= m >= t_thresh
    if sscores is not None:
        keep |= s >= s_thresh
    rank = m if mscores is not None else s
    bounds = proposals.bounds
    cand = np.nonzero(keep)[0]
    order = cand[np.lexsort((bounds[cand, 1] - bounds[cand, 0], bounds[cand, 0], -rank[cand]))]

    picked: list[int] = []
    limit = n_outputs - 1
    for i in order:
        if len(picked) >= limit:
            break
        if picked:
            kb = bounds[picked]
            inter = np.clip(np.minimum(kb[:, 1], bounds[i, 1]) - np.maximum(kb[:, 0], bounds[i, 0]), 0.0, None)
            union = np.maximum(kb[:, 1], bounds[i, 1]) - np.minimum(kb[:, 0], bounds[i, 0])
            if np.any(inter / union > nms_thresh):
                continue
        picked.append(int(i))
    return PseudoLabelSet(
        [Interval(*bounds[i]) for i in picked],
        [float(m[i]) for i in picked],
        [float(s[i]) for i in picked],
        epoch,
    )
