"""Small reverse-mode kernel: parameters, primitive ops, optimizers, gradient checks.

Each primitive returns ``(output, back)``. ``back`` maps the upstream gradient
to the gradient wrt the op's inputs and accumulates parameter gradients into
the :class:`ParamStore` it was called with. Models chain the closures by hand;
there is no general tape.

All arrays carry arbitrary leading batch dimensions and a trailing feature
axis, with affine maps in row convention ``y = x @ W + b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

CHECKPOINT_FORMAT = "dtgspl-checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named parameter tensors, each with a same-shape gradient buffer."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.opt_state: dict[str, object] = {}

    def add(self, name: str, shape, init: str = "xavier", scale: float = 1.0) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "normal":
            value = scale * self.rng.normal(size=shape)
        elif init == "xavier":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            lim = scale * np.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-lim, lim, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = value
        self.grads[name] = np.zeros(shape)
        return value

    def add_affine(self, name: str, d_in: int, d_out: int, scale: float = 1.0) -> None:
        self.add(f"{name}.W", (d_in, d_out), "xavier", scale)
        self.add(f"{name}.b", (d_out,), "zeros")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def grad(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> "ParamStore":
        other = ParamStore(self.seed)
        other.rng = np.random.default_rng(self.seed)
        other.rng.bit_generator.state = self.rng.bit_generator.state
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        return other

    # --- checkpoints -----------------------------------------------------------------------

    def to_json(self, meta: dict | None = None) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "meta": meta or {},
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }
        return json.dumps(doc, separators=(",", ":"), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> tuple["ParamStore", dict]:
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a dtgspl checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
        store = cls(doc.get("seed", 0))
        for k, t in doc["tensors"].items():
            store.params[k] = np.asarray(t["data"], dtype=float).reshape(t["shape"])
            store.grads[k] = np.zeros(t["shape"])
        return store, doc.get("meta", {})


Back = Callable[[np.ndarray], np.ndarray]


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def affine(store: ParamStore, name: str, x: np.ndarray) -> tuple[np.ndarray, Back]:
    W, b = store[f"{name}.W"], store[f"{name}.b"]
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"{name}: input dim {x.shape[-1]} does not match weight {W.shape}")
    y = x @ W + b

    def back(dy):
        store.grad(f"{name}.W", _flat(x).T @ _flat(dy))
        store.grad(f"{name}.b", _flat(dy).sum(axis=0))
        return dy @ W.T

    return y, back


def sigmoid(x: np.ndarray) -> tuple[np.ndarray, Back]:
    y = np.empty_like(x, dtype=float)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, lambda dy: dy * y * (1.0 - y)


def tanh(x: np.ndarray) -> tuple[np.ndarray, Back]:
    y = np.tanh(x)
    return y, lambda dy: dy * (1.0 - y * y)


def relu(x: np.ndarray) -> tuple[np.ndarray, Back]:
    on = x > 0
    return x * on, lambda dy: dy * on


def softmax(x: np.ndarray) -> tuple[np.ndarray, Back]:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return y, lambda dy: y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, Back]:
    """Parameter-free normalization over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(dy):
        return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))

    return y, back


def embedding(store: ParamStore, name: str, idx: np.ndarray) -> tuple[np.ndarray, Back]:
    table = store[name]
    idx = np.asarray(idx, dtype=int)

    def back(dy):
        g = np.zeros_like(table)
        np.add.at(g, idx.ravel(), _flat(dy))
        store.grad(name, g)
        return None

    return table[idx], back


@dataclass
class AttentionOut:
    output: np.ndarray
    coefficients: np.ndarray


def add_attention(store: ParamStore, name: str, d_q: int, d_kv: int, d_m: int) -> None:
    store.add(f"{name}.Wq", (d_q, d_m))
    store.add(f"{name}.Wk", (d_kv, d_m))
    store.add(f"{name}.Wv", (d_kv, d_m))


def cross_attention(store: ParamStore, name: str, queries: np.ndarray, keys_values: np.ndarray):
    """Single-head scaled dot-product attention of ``queries`` over ``keys_values``.

    Shapes ``(..., Tq, d_q)`` and ``(..., Tk, d_kv)``. Returns ``AttentionOut``
    and ``back(d_output, d_coefficients=None) -> (d_queries, d_keys_values)``.
    """
    if keys_values.shape[-2] == 0:
        raise ValueError(f"{name}: attention over an empty key set")
    Wq, Wk, Wv = store[f"{name}.Wq"], store[f"{name}.Wk"], store[f"{name}.Wv"]
    scale = 1.0 / np.sqrt(Wq.shape[1])
    q, k, v = queries @ Wq, keys_values @ Wk, keys_values @ Wv
    a, soft_back = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    out = a @ v

    def back(d_out, d_coef=None):
        d_a = d_out @ np.swapaxes(v, -1, -2)
        if d_coef is not None:
            d_a = d_a + d_coef
        d_v = np.swapaxes(a, -1, -2) @ d_out
        d_s = soft_back(d_a) * scale
        d_q = d_s @ k
        d_k = np.swapaxes(d_s, -1, -2) @ q
        store.grad(f"{name}.Wq", _flat(queries).T @ _flat(d_q))
        store.grad(f"{name}.Wk", _flat(keys_values).T @ _flat(d_k))
        store.grad(f"{name}.Wv", _flat(keys_values).T @ _flat(d_v))
        return d_q @ Wq.T, d_k @ Wk.T + d_v @ Wv.T

    return AttentionOut(out, a), back


def softmax_xent(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed negative log-likelihood of integer ``targets``.

    Returns ``(loss, per-position nll, d_loss/d_logits)``.
    """
    lp = log_softmax(logits)
    t = np.asarray(targets, dtype=int)
    nll = -np.take_along_axis(lp, t[..., None], axis=-1)[..., 0]
    grad = np.exp(lp)
    np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
    return float(nll.sum()), nll, grad


# --- optimizers ---------------------------------------------------------------------------


def _check_finite(store: ParamStore) -> None:
    for k, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {k!r}")


def sgd_step(store: ParamStore, lr: float) -> None:
    _check_finite(store)
    for k, p in store.params.items():
        p -= lr * store.grads[k]
    store.zero_grad()


def adamlike_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    _check_finite(store)
    t = store.opt_state.get("t", 0) + 1
    store.opt_state["t"] = t
    m = store.opt_state.setdefault("m", {})
    v = store.opt_state.setdefault("v", {})
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for k, p in store.params.items():
        g = store.grads[k]
        mk = m.setdefault(k, np.zeros_like(p))
        vk = v.setdefault(k, np.zeros_like(p))
        mk *= beta1
        mk += (1.0 - beta1) * g
        vk *= beta2
        vk += (1.0 - beta2) * g * g
        p -= lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
    store.zero_grad()


# --- gradient checking -------------------------------------------------------------------


def grad_check(
    closure: Callable[[], float],
    store: ParamStore,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``closure`` evaluates the loss and runs the backward pass into
    ``store.grads``. With ``max_coords`` each tensor is spot-checked at that
    many random coordinates instead of exhaustively. The relative error of a
    coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    """
    store.zero_grad()
    base = closure()
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite")
    analytic = {k: g.copy() for k, g in store.grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            old = flat[i]
            flat[i] = old + eps
            up = closure()
            flat[i] = old - eps
            down = closure()
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError(f"loss not finite when perturbing {name}[{i}]")
            num = (up - down) / (2.0 * eps)
            ana = analytic[name].reshape(-1)[i]
            worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), floor))
    store.zero_grad()
    return worst
