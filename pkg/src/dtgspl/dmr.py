"""Multi-modal encoder and diverse moment regression decoder.

The encoder projects clips (with a width-3 temporal convolution) and query
tokens to ``d_m`` and runs ``L`` rounds of video self-attention,
bidirectional cross-attention and residual feed-forward blocks. The decoder turns ``N`` learnable slots,
conditioned on the pooled query, into ``N`` moments with a start/end head and a
center/width head; both heads also see the mean and spread of clip positions
under the slot's attention. Slot 1 is supervised by the observed label; slots 2..N by
Hungarian-matched pseudo-positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernel as K
from .temporal import Interval, interval_mask_array, se_to_cw_array

LOG_EPS = 1e-12
MIN_WIDTH = 1e-3


def positional_encoding(t: int, d: int) -> np.ndarray:
    """Fixed sinusoidal code of normalized clip-center positions, shape (t, d)."""
    pos = (np.arange(t) + 0.5) / t
    n_sin, n_cos = (d + 1) // 2, d // 2
    ang = np.pi * pos[:, None] * 2.0 ** (np.arange(n_sin)[None, :] / max(1, d // 8))
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, :n_cos])
    return pe


def _unfold3(x: np.ndarray) -> np.ndarray:
    pad = np.zeros_like(x[..., :1, :])
    prev = np.concatenate([pad, x[..., :-1, :]], axis=-2)
    nxt = np.concatenate([x[..., 1:, :], pad], axis=-2)
    return np.concatenate([prev, x, nxt], axis=-1)


def _ffn(store, name, x):
    h, b1 = K.affine(store, f"{name}.1", x)
    h, b2 = K.relu(h)
    y, b3 = K.affine(store, f"{name}.2", h)
    return y, lambda dy: b1(b2(b3(dy)))


def add_encoder(store: K.ParamStore, d_v: int, n_tokens: int, d_l: int, d_m: int, layers: int) -> None:
    store.add("enc.word", (n_tokens, d_l), "normal", 1.0)
    store.add_affine("enc.video", 3 * d_v, d_m)
    store.add_affine("enc.query", d_l, d_m)
    for l in range(layers):
        K.add_attention(store, f"enc{l}.v2v", d_m, d_m, d_m)
        K.add_attention(store, f"enc{l}.v2q", d_m, d_m, d_m)
        K.add_attention(store, f"enc{l}.q2v", d_m, d_m, d_m)
        for side in ("v", "q"):
            store.add_affine(f"enc{l}.ffn_{side}.1", d_m, 2 * d_m)
            store.add_affine(f"enc{l}.ffn_{side}.2", 2 * d_m, d_m)


@dataclass
class Encoded:
    video: np.ndarray  # (B, T_v, d_m) after interaction
    query: np.ndarray  # (B, T_l, d_m) after interaction
    content: np.ndarray  # (B, T_v, d_m) projected clips before position and interaction


def encode_interact(store: K.ParamStore, clips: np.ndarray, tokens: np.ndarray, layers: int):
    """Encode ``clips`` (B, T_v, d_v) and token ids (B, T_l).

    Returns ``(Encoded, back)``; ``back(d_video, d_query, d_content)``
    accumulates parameter gradients.
    """
    tokens = np.asarray(tokens, dtype=int)
    if tokens.shape[-1] == 0:
        raise ValueError("empty query")
    content, b_vid = K.affine(store, "enc.video", _unfold3(clips))
    x = content + positional_encoding(clips.shape[-2], content.shape[-1])
    w, b_word = K.embedding(store, "enc.word", tokens)
    q, b_query = K.affine(store, "enc.query", w)
    backs = []
    for l in range(layers):
        sv, bsv = K.cross_attention(store, f"enc{l}.v2v", x, x)
        x, bx0 = K.layer_norm(x + sv.output)
        av, bav = K.cross_attention(store, f"enc{l}.v2q", x, q)
        aq, baq = K.cross_attention(store, f"enc{l}.q2v", q, x)
        x1, bx1 = K.layer_norm(x + av.output)
        q1, bq1 = K.layer_norm(q + aq.output)
        fx, bfx = _ffn(store, f"enc{l}.ffn_v", x1)
        fq, bfq = _ffn(store, f"enc{l}.ffn_q", q1)
        x, bx2 = K.layer_norm(x1 + fx)
        q, bq2 = K.layer_norm(q1 + fq)
        backs.append((bsv, bx0, bav, baq, bx1, bq1, bfx, bfq, bx2, bq2))

    def back(d_video, d_query, d_content=None):
        dx = np.zeros_like(x) if d_video is None else d_video
        dq = np.zeros_like(q) if d_query is None else d_query
        for bsv, bx0, bav, baq, bx1, bq1, bfx, bfq, bx2, bq2 in reversed(backs):
            dx1 = bx2(dx)
            dx1 = dx1 + bfx(dx1)
            dq1 = bq2(dq)
            dq1 = dq1 + bfq(dq1)
            dxs = bx1(dx1)
            dqs = bq1(dq1)
            dx_a, dq_a = bav(dxs)
            dq_b, dx_b = baq(dqs)
            dq = dqs + dq_a + dq_b
            dx0 = bx0(dxs + dx_a + dx_b)
            d_self_q, d_self_kv = bsv(dx0)
            dx = dx0 + d_self_q + d_self_kv
        dc = dx if d_content is None else dx + d_content
        b_vid(dc)
        b_word(b_query(dq))

    return Encoded(x, q, content), back


SHARPEN = 4.0


def add_decoder(store: K.ParamStore, d_m: int, n_outputs: int, layers: int = 1) -> None:
    store.add("dec.slots", (n_outputs, d_m), "normal", 1.0)
    for l in range(layers):
        K.add_attention(store, f"dec{l}.self", d_m, d_m, d_m)
        K.add_attention(store, f"dec{l}.attn", d_m, d_m, d_m)
        store.add_affine(f"dec{l}.ffn.1", d_m, 2 * d_m)
        store.add_affine(f"dec{l}.ffn.2", 2 * d_m, d_m)
    for head in ("se", "cw"):
        store.add_affine(f"dec.{head}.1", d_m + 2, d_m)
        store.add_affine(f"dec.{head}.2", d_m, 2)


@dataclass
class PredictionSet:
    se: np.ndarray  # (B, N, 2) ordered start <= end
    cw: np.ndarray  # (B, N, 2) center, width
    attention: np.ndarray  # (B, N, T_v), rows sum to 1

    def intervals(self, b: int) -> list[Interval]:
        return [_safe_interval(s, e) for s, e in self.se[b]]


def _safe_interval(s: float, e: float) -> Interval:
    s, e = float(min(s, e)), float(max(s, e))
    if e - s < MIN_WIDTH:
        mid = min(max(0.5 * (s + e), 0.5 * MIN_WIDTH), 1.0 - 0.5 * MIN_WIDTH)
        s, e = mid - 0.5 * MIN_WIDTH, mid + 0.5 * MIN_WIDTH
    return Interval(s, e)


def attention_moments(a: np.ndarray, power: float = SHARPEN):
    """Mean and spread of clip-center positions under sharpened attention rows.

    Rows of ``a`` (..., T_v) are raised to ``power`` and renormalized first, so
    diffuse background mass does not drag the mean off the attention peak.
    Returns ``(stats (..., 2), back)`` with ``back(d_stats) -> d_a``.
    """
    t_v = a.shape[-1]
    t = (np.arange(t_v) + 0.5) / t_v
    u = a**power
    z = u.sum(axis=-1, keepdims=True)
    w = u / z
    mean = w @ t
    var = np.maximum(w @ (t * t) - mean * mean, 0.0)
    sd = np.sqrt(var + 1e-6)

    def back(d_stats):
        d_mean = d_stats[..., 0]
        d_var = d_stats[..., 1] / (2.0 * sd)
        d_w = d_mean[..., None] * t + d_var[..., None] * (t * t - 2.0 * mean[..., None] * t)
        d_u = (d_w - (d_w * w).sum(axis=-1, keepdims=True)) / z
        return d_u * power * a ** (power - 1)

    return np.stack([mean, sd], axis=-1), back


def _center_logit(mean: np.ndarray):
    lo, hi = 1e-3, 1.0 - 1e-3
    p = np.clip(mean, lo, hi)
    inside = (mean > lo) & (mean < hi)

    def back(d):
        return d * inside / (p * (1.0 - p))

    return np.log(p) - np.log1p(-p), back


def decode_moments(store: K.ParamStore, video: np.ndarray, query: np.ndarray, layers: int = 1):
    """Decode N moments; returns ``(PredictionSet, back)``.

    Each decoder layer runs slot self-attention, slot-to-video cross-attention
    and a feed-forward block, all residual and normalized. The reported
    attention coefficients are those of the last cross-attention.
    ``back(d_se, d_cw, d_attention)`` returns ``(d_video, d_query)``.
    """
    slots = store["dec.slots"]
    t_l = query.shape[-2]
    h = np.broadcast_to(slots + query.mean(axis=-2, keepdims=True), query.shape[:-2] + slots.shape)
    backs = []
    att = None
    for l in range(layers):
        sa, b_sa = K.cross_attention(store, f"dec{l}.self", h, h)
        h1, b_h1 = K.layer_norm(h + sa.output)
        att, b_att = K.cross_attention(store, f"dec{l}.attn", h1, video)
        h2, b_h2 = K.layer_norm(h1 + att.output)
        ff, b_ff = _ffn(store, f"dec{l}.ffn", h2)
        h, b_h3 = K.layer_norm(h2 + ff)
        backs.append((b_sa, b_h1, b_att, b_h2, b_ff, b_h3))
    coef = att.coefficients
    stats, b_stats = attention_moments(coef)
    feat = np.concatenate([h, stats], axis=-1)
    d_m = h.shape[-1]

    # boxes are logit-space offsets around the attention center
    prior, b_prior = _center_logit(stats[..., 0])
    raw_se, b_se = _ffn(store, "dec.se", feat)
    u, b_use = K.sigmoid(raw_se + prior[..., None])
    swap = u[..., 0] > u[..., 1]
    se = np.where(swap[..., None], u[..., ::-1], u)
    raw_cw, b_cw = _ffn(store, "dec.cw", feat)
    cw, b_ucw = K.sigmoid(raw_cw + np.stack([prior, np.zeros_like(prior)], axis=-1))

    def back(d_se, d_cw, d_attention=None):
        du = b_use(np.where(swap[..., None], d_se[..., ::-1], d_se))
        dc = b_ucw(d_cw)
        dfeat = b_se(du) + b_cw(dc)
        d_stats = dfeat[..., d_m:].copy()
        d_stats[..., 0] += b_prior(du.sum(axis=-1) + dc[..., 0])
        d_coef = b_stats(d_stats)
        if d_attention is not None:
            d_coef = d_coef + d_attention
        dh = dfeat[..., :d_m]
        d_video = np.zeros_like(video)
        for i, (b_sa, b_h1, b_att, b_h2, b_ff, b_h3) in enumerate(reversed(backs)):
            dh2 = b_h3(dh)
            dh2 = dh2 + b_ff(dh2)
            dsum2 = b_h2(dh2)
            dh1, dv = b_att(dsum2, d_coef if i == 0 else None)
            d_video += dv
            dsum1 = b_h1(dh1 + dsum2)
            dq, dkv = b_sa(dsum1)
            dh = dsum1 + dq + dkv
        store.grad("dec.slots", dh.reshape(-1, *slots.shape).sum(axis=0))
        d_query = np.broadcast_to(dh.sum(axis=-2, keepdims=True) / t_l, query.shape).copy()
        return d_video, d_query

    return PredictionSet(se, cw, coef), back


# --- matching and losses -----------------------------------------------------------------


def match_cost(se: np.ndarray, cw: np.ndarray, targets_se: np.ndarray) -> np.ndarray:
    """(P, G) l1 cost between predictions (se, cw rows) and target intervals."""
    targets_se = np.asarray(targets_se, dtype=float).reshape(-1, 2)
    tcw = se_to_cw_array(targets_se)
    return np.abs(se[:, None, :] - targets_se[None]).sum(-1) + np.abs(cw[:, None, :] - tcw[None]).sum(-1)


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment as sorted ``(row, col)`` pairs.

    With more rows (predictions) than columns (pseudo-labels) surplus rows stay
    unmatched.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return sorted(zip(rows.tolist(), cols.tolist()))


def brute_force_match(cost: np.ndarray) -> float:
    """Minimum assignment cost by enumerating permutations (test oracle)."""
    cost = np.asarray(cost, dtype=float)
    r, c = cost.shape
    if r == 0 or c == 0:
        return 0.0
    if r < c:
        cost, (r, c) = cost.T, (c, r)
    return min(sum(cost[p[j], j] for j in range(c)) for p in permutations(range(r), c))


def attention_loss(a: np.ndarray, m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked mean negative log attention over the last axis; returns (loss, d_a)."""
    a = np.asarray(a, dtype=float)
    m = np.asarray(m, dtype=float)
    cnt = m.sum(axis=-1)
    if np.any(cnt < 1):
        raise ValueError("attention loss needs a nonempty mask")
    safe = np.maximum(a, LOG_EPS)
    loss = -(m * np.log(safe)).sum(axis=-1) / cnt
    grad = np.where(a > LOG_EPS, -m / safe, 0.0) / cnt[..., None]
    return loss, grad


def _l1(x, y):
    d = x - y
    return np.abs(d).sum(axis=-1), np.sign(d)


@dataclass
class DMRLoss:
    total: float
    single: float  # slot-1 terms, batch mean
    diverse: float  # weighted pseudo-label terms, batch mean
    d_se: np.ndarray
    d_cw: np.ndarray
    d_attention: np.ndarray
    assignments: list


def dmr_loss(preds: PredictionSet, observed: np.ndarray, pseudo: list, lam: float, assignments=None) -> DMRLoss:
    """Single-positive and Hungarian-matched pseudo-positive regression losses.

    ``observed`` is (B, 2); ``pseudo`` a list of (P_b, 2) arrays (P_b <= N-1).
    Each supervised slot pays l1(start/end) + l1(center/width) + the attention
    loss over its target's clip mask. Unmatched slots contribute nothing.
    """
    se, cw, a = preds.se, preds.cw, preds.attention
    bsz, n_out, t_v = a.shape
    observed = np.asarray(observed, dtype=float).reshape(bsz, 2)
    d_se, d_cw, d_a = np.zeros_like(se), np.zeros_like(cw), np.zeros_like(a)
    inv_b = 1.0 / bsz

    l_se, g_se = _l1(se[:, 0], observed)
    l_cw, g_cw = _l1(cw[:, 0], se_to_cw_array(observed))
    l_att, g_att = attention_loss(a[:, 0], interval_mask_array(observed, t_v))
    single = float((l_se + l_cw + l_att).mean())
    d_se[:, 0] = g_se * inv_b
    d_cw[:, 0] = g_cw * inv_b
    d_a[:, 0] = g_att * inv_b

    diverse = 0.0
    out_assign = []
    w = lam / (n_out - 1) if n_out > 1 else 0.0
    for b in range(bsz):
        tgt = np.asarray(pseudo[b] if pseudo is not None else [], dtype=float).reshape(-1, 2)
        if assignments is not None:
            assign = assignments[b]
        elif len(tgt) and w > 0:
            assign = hungarian_match(match_cost(se[b, 1:], cw[b, 1:], tgt))
        else:
            assign = []
        out_assign.append(assign)
        if not assign or w == 0:
            continue
        rows = np.array([r + 1 for r, _ in assign])
        t = tgt[[c for _, c in assign]]
        ls, gs = _l1(se[b, rows], t)
        lc, gc = _l1(cw[b, rows], se_to_cw_array(t))
        la, ga = attention_loss(a[b, rows], interval_mask_array(t, t_v))
        diverse += w * float((ls + lc + la).sum())
        d_se[b, rows] += w * gs * inv_b
        d_cw[b, rows] += w * gc * inv_b
        d_a[b, rows] += w * ga * inv_b
    diverse *= inv_b
    return DMRLoss(single + diverse, single, diverse, d_se, d_cw, d_a, out_assign)
