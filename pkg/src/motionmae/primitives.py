"""Numeric building blocks with explicit forward caches and analytic backward.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays may carry arbitrary
leading batch dimensions: the last axis is channels, the one before it is
the sequence. Parameter gradients are summed over all leading dimensions.

All matrix products go through :func:`matmul`, which feeds the active
:class:`OpCounter` so forward passes can be metered exactly.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import MissingCache, ShapeMismatch

LN_EPS = 1e-6


# --------------------------------------------------------------------------
# op counting


@dataclass
class OpCounter:
    """Accumulates multiply counts of matmuls, keyed by the active tag."""

    counts: dict[str, int] = field(default_factory=dict)
    tag: str = "other"
    dry: bool = False

    # elements passed through softmax / layer norm / activation, per kind
    elementwise: dict[str, int] = field(default_factory=dict)

    def add(self, n: int) -> None:
        self.counts[self.tag] = self.counts.get(self.tag, 0) + n

    def add_elementwise(self, kind: str, n: int) -> None:
        self.elementwise[kind] = self.elementwise.get(kind, 0) + n

    @property
    def total(self) -> int:
        return sum(self.counts.values())


_counter: contextvars.ContextVar[OpCounter | None] = contextvars.ContextVar(
    "motionmae_op_counter", default=None
)


@contextlib.contextmanager
def counting(dry: bool = False):
    """Meter matmuls. ``dry`` skips the arithmetic and returns zeros of the right shape."""
    counter = OpCounter(dry=dry)
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def op_tag(tag: str):
    """Attribute matmuls inside the block to ``tag`` (no-op when not counting)."""
    counter = _counter.get()
    if counter is None:
        yield
        return
    prev = counter.tag
    counter.tag = tag
    try:
        yield
    finally:
        counter.tag = prev


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    counter = _counter.get()
    if counter is None:
        return np.matmul(a, b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    # the contracted axis is a.shape[-1]
    counter.add(int(np.prod(shape)) * a.shape[-1])
    if counter.dry:
        return np.zeros(shape, np.result_type(a, b))
    return np.matmul(a, b)


@contextlib.contextmanager
def _subtag(suffix: str):
    counter = _counter.get()
    if counter is None:
        yield
        return
    with op_tag(f"{counter.tag}.{suffix}"):
        yield


def _count_elementwise(kind: str, x: np.ndarray) -> None:
    counter = _counter.get()
    if counter is not None:
        counter.add_elementwise(kind, int(x.size))


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _require(cache, kind: str):
    if cache is None or not isinstance(cache, dict) or cache.get("kind") != kind:
        raise MissingCache(f"backward of {kind} needs the cache returned by its forward")
    return cache


# --------------------------------------------------------------------------
# linear


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out, {"kind": "linear", "x": x, "has_bias": b is not None, "w": w}


def linear_backward(dout, cache):
    c = _require(cache, "linear")
    x, w = c["x"], c["w"]
    grads = {"w": matmul(_flat(x).T, _flat(dout))}
    if c["has_bias"]:
        grads["b"] = _flat(dout).sum(axis=0)
    dx = matmul(dout, w.T)
    return dx, grads


# --------------------------------------------------------------------------
# layer norm


@dataclass
class LNParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = LN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer norm epsilon must be positive")


def layer_norm(x, p: LNParams):
    _count_elementwise("layer_norm", x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * rstd
    out = xhat * p.gamma + p.beta
    return out, {"kind": "layer_norm", "xhat": xhat, "rstd": rstd, "gamma": p.gamma}


def layer_norm_backward(dout, cache):
    c = _require(cache, "layer_norm")
    xhat, rstd, gamma = c["xhat"], c["rstd"], c["gamma"]
    grads = {
        "gamma": _flat(dout * xhat).sum(axis=0),
        "beta": _flat(dout).sum(axis=0),
    }
    dxhat = dout * gamma
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, grads


# --------------------------------------------------------------------------
# attention


@dataclass
class AttentionParams:
    """Fused Q/K/V/O projections; head ``j`` owns columns ``j*d:(j+1)*d``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None
    bo: np.ndarray | None = None
    heads: int = 1

    def __post_init__(self):
        C = self.wq.shape[0]
        if C % self.heads:
            raise ShapeMismatch(f"channels {C} not divisible by {self.heads} heads")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads


def softmax(s: np.ndarray) -> np.ndarray:
    _count_elementwise("softmax", s)
    z = s - s.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, h):
    # [..., n, C] -> [..., h, n, d]
    *lead, n, C = x.shape
    return np.swapaxes(x.reshape(*lead, n, h, C // h), -2, -3)


def _merge_heads(x):
    # [..., h, n, d] -> [..., n, h*d]
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, d = x.shape
    return x.reshape(*lead, n, h * d)


def _proj(x, w, b):
    out = matmul(x, w)
    return out if b is None else out + b


def mhca(x, y, p: AttentionParams):
    """Queries from ``x`` [..., n, C]; keys and values from ``y`` [..., m, C]."""
    if x.shape[-1] != p.wq.shape[0] or y.shape[-1] != p.wk.shape[0]:
        raise ShapeMismatch("attention input channels do not match the projections")
    h = p.heads
    q = _split_heads(_proj(x, p.wq, p.bq), h)
    k = _split_heads(_proj(y, p.wk, p.bk), h)
    v = _split_heads(_proj(y, p.wv, p.bv), h)
    scale = 1.0 / math.sqrt(p.head_dim)
    with _subtag("scores"):
        attn = softmax(matmul(q, np.swapaxes(k, -1, -2)) * scale)
        o = _merge_heads(matmul(attn, v))
    out = _proj(o, p.wo, p.bo)
    cache = {
        "kind": "attention", "x": x, "y": y, "q": q, "k": k, "v": v,
        "attn": attn, "o": o, "scale": scale, "p": p,
    }
    return out, cache


def mhsa(x, p: AttentionParams):
    out, cache = mhca(x, x, p)
    cache["self"] = True
    return out, cache


def attention_backward(dout, cache):
    """Gradients for :func:`mhca` / :func:`mhsa`.

    Returns ``(dx, dy, grads)``; for self-attention ``dy`` is folded into
    ``dx`` and returned as ``None``.
    """
    c = _require(cache, "attention")
    p: AttentionParams = c["p"]
    x, y, q, k, v, attn, o = (c[n] for n in ("x", "y", "q", "k", "v", "attn", "o"))
    h = p.heads
    grads = {"wo": matmul(_flat(o).T, _flat(dout))}
    if p.bo is not None:
        grads["bo"] = _flat(dout).sum(axis=0)
    do = _split_heads(matmul(dout, p.wo.T), h)
    dattn = matmul(do, np.swapaxes(v, -1, -2))
    dv = matmul(np.swapaxes(attn, -1, -2), do)
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * c["scale"]
    dq = _merge_heads(matmul(ds, k))
    dk = _merge_heads(matmul(np.swapaxes(ds, -1, -2), q))
    dv = _merge_heads(dv)
    for name, src, d in (("q", x, dq), ("k", y, dk), ("v", y, dv)):
        grads["w" + name] = matmul(_flat(src).T, _flat(d))
        if getattr(p, "b" + name) is not None:
            grads["b" + name] = _flat(d).sum(axis=0)
    dx = matmul(dq, p.wq.T)
    dy = matmul(dk, p.wk.T) + matmul(dv, p.wv.T)
    if c.get("self"):
        return dx + dy, None, grads
    return dx, dy, grads


# --------------------------------------------------------------------------
# feed-forward


@dataclass
class FFNParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.w1.shape[1] < self.w1.shape[0]:
            raise ShapeMismatch("FFN expansion ratio must be >= 1")

    @property
    def ratio(self) -> float:
        return self.w1.shape[1] / self.w1.shape[0]


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT_2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT_2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def ffn(x, p: FFNParams, activation: str = "gelu"):
    if activation not in ("gelu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    hid = matmul(x, p.w1) + p.b1
    if activation == "gelu":
        _count_elementwise("activation", hid)
        act = gelu(hid)
    else:
        act = hid
    out = matmul(act, p.w2) + p.b2
    return out, {"kind": "ffn", "x": x, "hid": hid, "act": act, "p": p, "activation": activation}


def ffn_backward(dout, cache):
    c = _require(cache, "ffn")
    p: FFNParams = c["p"]
    grads = {"w2": matmul(_flat(c["act"]).T, _flat(dout)), "b2": _flat(dout).sum(axis=0)}
    dact = matmul(dout, p.w2.T)
    dhid = dact * gelu_grad(c["hid"]) if c["activation"] == "gelu" else dact
    grads["w1"] = matmul(_flat(c["x"]).T, _flat(dhid))
    grads["b1"] = _flat(dhid).sum(axis=0)
    return matmul(dhid, p.w1.T), grads


# --------------------------------------------------------------------------
# parameter construction helpers


def trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    """Normal samples truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def xavier_uniform(rng: np.random.Generator, fan_in, fan_out, dtype=np.float32):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_attention(rng, C, dtype=np.float32) -> dict[str, np.ndarray]:
    out = {}
    for n in "qkvo":
        out["w" + n] = xavier_uniform(rng, C, C, dtype)
        out["b" + n] = np.zeros(C, dtype)
    return out


def init_ffn(rng, C, ratio=4, dtype=np.float32) -> dict[str, np.ndarray]:
    H = int(C * ratio)
    return {
        "w1": xavier_uniform(rng, C, H, dtype), "b1": np.zeros(H, dtype),
        "w2": xavier_uniform(rng, H, C, dtype), "b2": np.zeros(C, dtype),
    }


def init_ln(C, dtype=np.float32) -> dict[str, np.ndarray]:
    return {"gamma": np.ones(C, dtype), "beta": np.zeros(C, dtype)}


def attention_view(params: dict, prefix: str, heads: int) -> AttentionParams:
    g = lambda n: params.get(prefix + n)  # noqa: E731
    return AttentionParams(
        wq=g("wq"), wk=g("wk"), wv=g("wv"), wo=g("wo"),
        bq=g("bq"), bk=g("bk"), bv=g("bv"), bo=g("bo"), heads=heads,
    )


def ffn_view(params: dict, prefix: str) -> FFNParams:
    return FFNParams(*(params[prefix + n] for n in ("w1", "b1", "w2", "b2")))


def ln_view(params: dict, prefix: str) -> LNParams:
    return LNParams(params[prefix + "gamma"], params[prefix + "beta"])


def accumulate(grads: dict, prefix: str, sub: dict) -> None:
    for k, v in sub.items():
        key = prefix + k
        if key in grads:
            grads[key] = grads[key] + v
        else:
            grads[key] = v
