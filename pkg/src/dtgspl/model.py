"""Joint network: shared encoder, PME scorers and the DMR decoder under one loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dmr, pme
from . import kernel as K
from .lattice import ProposalSet, assign_single_positive, build_lattice
from .synth import Sample
from .temporal import Interval, interval_mask

UNK = "<unk>"


@dataclass(frozen=True)
class NetConfig:
    d_v: int
    t_v: int
    d_l: int = 16
    d_m: int = 32
    layers: int = 1
    dec_layers: int = 1
    n_outputs: int = 5
    lattice_n: int = 16
    lattice_base: int = 16
    t_s: int = 2
    n_s: int = 5
    k: float = 5.0
    gamma1: float = 0.1
    gamma2: float = 0.05
    lam: float = 0.5
    no_epr: bool = False
    no_matching: bool = False
    no_reconstruction: bool = False
    no_augmenting: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    ids: list[str]
    clips: np.ndarray  # (B, T_v, d_v)
    tokens: np.ndarray  # (B, T_l)
    targets: np.ndarray  # (B, T_s)
    observed: np.ndarray  # (B, 2)
    positive: np.ndarray  # (B,) lattice index of the observed label


@dataclass
class StepLosses:
    total: float
    pme: float
    match: float
    semantic: float
    dmr: float
    pseudo_used: int
    sum_match: float


class GroundingNet:
    def __init__(self, cfg: NetConfig, vocab: list[str], seed: int = 0):
        self.cfg = cfg
        self.vocab = list(vocab)
        self._index = {t: i for i, t in enumerate(self.vocab)}
        self.gen_cfg = pme.GeneratorConfig(tuple(self.vocab), cfg.t_s, 1 if cfg.no_augmenting else cfg.n_s)
        self.lattice: ProposalSet = build_lattice(cfg.lattice_n, cfg.lattice_base)
        self.store = K.ParamStore(seed)
        s = self.store
        dmr.add_encoder(s, cfg.d_v, len(self.vocab), cfg.d_l, cfg.d_m, cfg.layers)
        pme.add_match_head(s, 3 * cfg.d_m, cfg.d_m)
        pme.add_generator(s, self.gen_cfg, cfg.d_m, cfg.d_m)
        dmr.add_decoder(s, cfg.d_m, cfg.n_outputs, cfg.dec_layers)
        self.pool = self.lattice.pooling_matrix(cfg.t_v)
        self.ctx_left, self.ctx_right = self.lattice.context_matrices(cfg.t_v)

    # --- batching ------------------------------------------------------------------------

    def token_ids(self, tokens) -> np.ndarray:
        unk = self._index[UNK]
        return np.array([self._index.get(t, unk) for t in tokens], dtype=int)

    def batch(self, samples: list[Sample]) -> Batch:
        clips = np.stack([s.clips for s in samples]).astype(float)
        if clips.shape[1:] != (self.cfg.t_v, self.cfg.d_v):
            raise ValueError(f"clip array shape {clips.shape[1:]} does not match ({self.cfg.t_v}, {self.cfg.d_v})")
        tokens = np.stack([self.token_ids(s.tokens) for s in samples])
        known = self._index
        targets = np.stack([self.gen_cfg.encode([t if t in known else UNK for t in s.targets[: self.cfg.t_s]]) for s in samples])
        if targets.shape[1] != self.cfg.t_s:
            raise ValueError(f"every query needs {self.cfg.t_s} verb/noun targets")
        observed = np.array([s.observed.as_list() for s in samples])
        positive = np.array([assign_single_positive(self.lattice, s.observed) for s in samples])
        return Batch([s.id for s in samples], clips, tokens, targets, observed, positive)

    # --- pieces --------------------------------------------------------------------------

    def proposal_features(self, video: np.ndarray):
        """(B, C, 3 d_m) proposal features: inside mean and left/right context means."""
        mats = (self.pool, self.ctx_left, self.ctx_right)
        feats = np.concatenate([np.einsum("ct,btd->bcd", m, video) for m in mats], axis=-1)
        d = video.shape[-1]

        def back(df):
            return sum(np.einsum("ct,bcd->btd", m, df[..., i * d : (i + 1) * d]) for i, m in enumerate(mats))

        return feats, back

    def augment_weights(self, observed: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """(B, N_s, T_v) weights of the augmented labeled-moment features."""
        t_v = self.cfg.t_v
        out = []
        for s, e in observed:
            z = Interval(s, e)
            if self.cfg.no_augmenting:
                m = interval_mask(z, t_v).astype(float)
                out.append((m / m.sum())[None])
            else:
                out.append(pme.augment_interval_features(np.empty((t_v, 0)), z, self.cfg.n_s, rng))
        return np.stack(out)

    # --- training step -------------------------------------------------------------------

    def loss_and_grad(self, b: Batch, pseudo: list | None, rng: np.random.Generator, backward: bool = True) -> StepLosses:
        """Joint loss on one batch; gradients accumulate into ``self.store``.

        ``pseudo`` holds one (P, 2) array per sample, or ``None`` to switch the
        pseudo-label branch of the regression loss off.
        """
        cfg = self.cfg
        enc, enc_back = dmr.encode_interact(self.store, b.clips, b.tokens, cfg.layers)
        bsz = len(b.ids)

        d_video = np.zeros_like(enc.video)
        d_content = np.zeros_like(enc.content)
        l_match = 0.0
        sum_match = float("nan")
        if not cfg.no_matching:
            feats, feat_back = self.proposal_features(enc.video)
            s, s_back = pme.match_scores(self.store, feats)
            sum_match = float(s.sum(axis=1).mean())
            if cfg.no_epr:
                l_match, ds = pme.assume_negative_bce(s, b.positive)
            else:
                l_match, ds = pme.epr_loss(s, b.positive, cfg.k, cfg.gamma1)
            if backward:
                d_video += feat_back(s_back(ds))

        l_sem = 0.0
        if not cfg.no_reconstruction:
            w = self.augment_weights(b.observed, rng)
            feats = w @ enc.content
            n_s = w.shape[1]
            tgt = np.repeat(b.targets, n_s, axis=0)
            l_sem, g_back = pme.generator_nll(self.store, feats.reshape(bsz * n_s, -1), tgt, self.gen_cfg.bos)
            if backward:
                dfeat = g_back(cfg.gamma2).reshape(feats.shape)
                d_content += np.swapaxes(w, -1, -2) @ dfeat

        preds, dec_back = dmr.decode_moments(self.store, enc.video, enc.query, self.cfg.dec_layers)
        dl = dmr.dmr_loss(preds, b.observed, pseudo, cfg.lam if pseudo is not None else 0.0)
        if backward:
            dv, dq = dec_back(dl.d_se, dl.d_cw, dl.d_attention)
            enc_back(d_video + dv, dq, d_content)

        l_pme = pme.pme_loss(l_match, l_sem, cfg.gamma2)
        used = sum(len(a) for a in dl.assignments)
        return StepLosses(l_pme + dl.total, l_pme, l_match, l_sem, dl.total, used, sum_match)

    # --- inference -----------------------------------------------------------------------

    def predict(self, b: Batch) -> dmr.PredictionSet:
        enc, _ = dmr.encode_interact(self.store, b.clips, b.tokens, self.cfg.layers)
        preds, _ = dmr.decode_moments(self.store, enc.video, enc.query, self.cfg.dec_layers)
        return preds

    def scores(self, b: Batch, reference: str = "generated") -> tuple[np.ndarray | None, np.ndarray | None]:
        """Matching and semantic scores (B, C) for every lattice proposal."""
        enc, _ = dmr.encode_interact(self.store, b.clips, b.tokens, self.cfg.layers)
        m = s = None
        if not self.cfg.no_matching:
            feats, _ = self.proposal_features(enc.video)
            m, _ = pme.match_scores(self.store, feats)
        if not self.cfg.no_reconstruction:
            g = self.gen_cfg
            bsz, c = len(b.ids), len(self.lattice)
            words = pme.greedy_decode(self.store, (self.pool @ enc.content).reshape(bsz * c, -1), g.t_s, g.bos)
            if reference == "query":
                ref = b.targets
            else:
                masks = np.stack([interval_mask(Interval(*z), self.cfg.t_v) for z in b.observed]).astype(float)
                zfeat = (masks / masks.sum(axis=1, keepdims=True))[:, None, :] @ enc.content
                ref = pme.greedy_decode(self.store, zfeat[:, 0], g.t_s, g.bos)
            s = pme.bleu1_batch(words, np.repeat(ref, c, axis=0), len(g.vocab)).reshape(bsz, c)
        return m, s

    def to_json(self, meta: dict | None = None) -> str:
        info = {"net": self.cfg.to_dict(), "vocab": self.vocab}
        info.update(meta or {})
        return self.store.to_json(info)

    @classmethod
    def from_json(cls, text: str) -> tuple["GroundingNet", dict]:
        store, meta = K.ParamStore.from_json(text)
        net = cls(NetConfig.from_dict(meta["net"]), meta["vocab"], store.seed)
        if set(store.params) != set(net.store.params):
            raise ValueError("checkpoint tensors do not match the network layout")
        for k, v in store.params.items():
            if v.shape != net.store.params[k].shape:
                raise ValueError(f"checkpoint tensor {k} has shape {v.shape}")
        net.store = store
        return net, meta
