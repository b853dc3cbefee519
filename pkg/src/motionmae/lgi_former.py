"""Region-decomposed transformer encoder with learnable representative tokens.

Each block runs up to three stages in fixed order:

* intra: self-attention over one region's tokens plus its representative token
* inter: self-attention over the M representative tokens
* lgi:   local tokens cross-attend to all representative tokens, then one
  shared FFN updates both locals and representatives

Local tokens travel as ``[..., M, n, C]`` (region-major) and representatives
as ``[..., M, C]``; ``n`` is N when unmasked and ``(1 - rho) N`` under masking.
The ``vit_global`` variant replaces all of this by standard pre-LN blocks over
the flattened sequence.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import primitives as P
from .errors import ConfigError, MissingCache, NonIntegralVisibleCount, ShapeMismatch
from .masking import RegionPartition, TubeMask, make_partition
from .tokenizer import DEFAULT_CUBE, TokenGrid, init_embedding, sincos_table

POOL_MODES = ("representative_mean", "local_mean")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    dim: int
    heads: int
    grid: tuple[int, int, int] = (8, 10, 10)
    region: tuple[int, int, int] = (2, 5, 10)
    intra: bool = True
    inter: bool = True
    lgi: bool = True
    vit_global: bool = False
    pool: str = "representative_mean"
    cube: tuple[int, int, int] = DEFAULT_CUBE
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "region", tuple(int(v) for v in self.region))
        object.__setattr__(self, "cube", tuple(int(v) for v in self.cube))
        if not (self.vit_global or self.intra or self.inter or self.lgi):
            raise ConfigError("enable at least one stage or vit_global")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.pool not in POOL_MODES:
            raise ConfigError(f"pool must be one of {POOL_MODES}")
        if self.vit_global and self.pool == "representative_mean":
            raise ConfigError("vit_global has no representative tokens; use local_mean")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be >= 1")
        make_partition(self.grid, self.region)

    @property
    def partition(self) -> RegionPartition:
        return make_partition(self.grid, self.region)

    @property
    def patch_values(self) -> int:
        return int(np.prod(self.cube)) * 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


PRESETS = {
    "tiny": EncoderConfig(depth=16, dim=256, heads=4),
    "small": EncoderConfig(depth=16, dim=384, heads=6),
    "base": EncoderConfig(depth=16, dim=512, heads=8),
    "vit": EncoderConfig(depth=12, dim=768, heads=12, vit_global=True, pool="local_mean"),
    # laptop-scale stand-in for tiny: 8x32x32 clips, 2x8x8 cubes
    "desk": EncoderConfig(depth=4, dim=64, heads=4, grid=(4, 4, 4), region=(2, 2, 2), cube=(2, 8, 8)),
}

# Ablation variants on the base width.
VARIANTS = {
    "intra": dict(intra=True, inter=False, lgi=False),
    "intra+inter": dict(intra=True, inter=True, lgi=False),
    "intra+lgi": dict(intra=True, inter=False, lgi=True),
    "full": dict(intra=True, inter=True, lgi=True),
}


def preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# --------------------------------------------------------------------------
# parameters


def _prefixed(prefix: str, d: dict) -> dict:
    return {prefix + k: v for k, v in d.items()}


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    C = cfg.dim
    params = _prefixed("embed.", init_embedding(rng, C, cfg.cube, dtype))
    if not cfg.vit_global:
        params["reps"] = P.trunc_normal(rng, (cfg.partition.M, C), 0.02, dtype)
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        if cfg.vit_global:
            params |= _prefixed(b + "norm1.", P.init_ln(C, dtype))
            params |= _prefixed(b + "attn.", P.init_attention(rng, C, dtype))
            params |= _prefixed(b + "norm2.", P.init_ln(C, dtype))
            params |= _prefixed(b + "ffn.", P.init_ffn(rng, C, cfg.mlp_ratio, dtype))
            continue
        if cfg.intra:
            params |= _prefixed(b + "intra.norm.", P.init_ln(C, dtype))
            params |= _prefixed(b + "intra.attn.", P.init_attention(rng, C, dtype))
        if cfg.inter:
            params |= _prefixed(b + "inter.norm.", P.init_ln(C, dtype))
            params |= _prefixed(b + "inter.attn.", P.init_attention(rng, C, dtype))
        if cfg.lgi:
            params |= _prefixed(b + "lgi.norm_x.", P.init_ln(C, dtype))
            params |= _prefixed(b + "lgi.norm_s.", P.init_ln(C, dtype))
            params |= _prefixed(b + "lgi.attn.", P.init_attention(rng, C, dtype))
        params |= _prefixed(b + "ffn.norm_x.", P.init_ln(C, dtype))
        params |= _prefixed(b + "ffn.norm_s.", P.init_ln(C, dtype))
        params |= _prefixed(b + "ffn.", P.init_ffn(rng, C, cfg.mlp_ratio, dtype))
    return params


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Expected name -> shape manifest, without allocating a model."""
    rng = np.random.default_rng(0)
    small = init_encoder(replace(cfg, depth=min(cfg.depth, 1)), rng, np.float32)
    out = {k: v.shape for k, v in small.items() if not k.startswith("blocks.")}
    for i in range(cfg.depth):
        for k, v in small.items():
            if k.startswith("blocks.0."):
                out[f"blocks.{i}." + k[len("blocks.0."):]] = v.shape
    return out


# --------------------------------------------------------------------------
# blocks


def _ln(params, name, x, caches):
    y, caches[name] = P.layer_norm(x, P.ln_view(params, name + "."))
    return y


def _ffn(params, prefix, x, caches, key):
    y, caches[key] = P.ffn(x, P.ffn_view(params, prefix))
    return y


def lgi_block_forward(cfg: EncoderConfig, params: dict, b: str, X, S):
    """One block. ``X`` [..., M, n, C], ``S`` [..., M, C]."""
    c: dict = {}
    h = cfg.heads
    if cfg.intra:
        with P.op_tag("intra"):
            Xh = np.concatenate([S[..., None, :], X], axis=-2)
            y = _ln(params, b + "intra.norm", Xh, c)
            a, c["intra.attn"] = P.mhsa(y, P.attention_view(params, b + "intra.attn.", h))
            Xh = Xh + a
            S, X = Xh[..., 0, :], Xh[..., 1:, :]
    if cfg.inter:
        with P.op_tag("inter"):
            y = _ln(params, b + "inter.norm", S, c)
            a, c["inter.attn"] = P.mhsa(y, P.attention_view(params, b + "inter.attn.", h))
            S = S + a
    if cfg.lgi:
        with P.op_tag("lgi"):
            lead, (M, n, C) = X.shape[:-3], X.shape[-3:]
            Xf = X.reshape(*lead, M * n, C)
            qx = _ln(params, b + "lgi.norm_x", Xf, c)
            ks = _ln(params, b + "lgi.norm_s", S, c)
            a, c["lgi.attn"] = P.mhca(qx, ks, P.attention_view(params, b + "lgi.attn.", h))
            X = (Xf + a).reshape(X.shape)
    with P.op_tag("ffn"):
        X = X + _ffn(params, b + "ffn.", _ln(params, b + "ffn.norm_x", X, c), c, "ffn.x")
        S = S + _ffn(params, b + "ffn.", _ln(params, b + "ffn.norm_s", S, c), c, "ffn.s")
    return X, S, c


def _ln_back(grads, b, name, dy, caches):
    dx, g = P.layer_norm_backward(dy, caches[b + name])
    P.accumulate(grads, b + name + ".", g)
    return dx


def lgi_block_backward(cfg: EncoderConfig, b: str, dX, dS, c, grads):
    # shared FFN on locals and reps
    d, g = P.ffn_backward(dS, c["ffn.s"])
    P.accumulate(grads, b + "ffn.", g)
    dS = dS + _ln_back(grads, b, "ffn.norm_s", d, c)
    d, g = P.ffn_backward(dX, c["ffn.x"])
    P.accumulate(grads, b + "ffn.", g)
    dX = dX + _ln_back(grads, b, "ffn.norm_x", d, c)
    if cfg.lgi:
        shape = dX.shape
        lead, (M, n, C) = shape[:-3], shape[-3:]
        dXf = dX.reshape(*lead, M * n, C)
        dq, dk, g = P.attention_backward(dXf, c["lgi.attn"])
        P.accumulate(grads, b + "lgi.attn.", g)
        dXf = dXf + _ln_back(grads, b, "lgi.norm_x", dq, c)
        dS = dS + _ln_back(grads, b, "lgi.norm_s", dk, c)
        dX = dXf.reshape(shape)
    if cfg.inter:
        da, _, g = P.attention_backward(dS, c["inter.attn"])
        P.accumulate(grads, b + "inter.attn.", g)
        dS = dS + _ln_back(grads, b, "inter.norm", da, c)
    if cfg.intra:
        dXh = np.concatenate([dS[..., None, :], dX], axis=-2)
        da, _, g = P.attention_backward(dXh, c["intra.attn"])
        P.accumulate(grads, b + "intra.attn.", g)
        dXh = dXh + _ln_back(grads, b, "intra.norm", da, c)
        dS, dX = dXh[..., 0, :], dXh[..., 1:, :]
    return dX, dS


def vit_block_forward(heads: int, params: dict, b: str, x, tags=("global", "ffn")):
    c: dict = {}
    with P.op_tag(tags[0]):
        a, c["attn"] = P.mhsa(_ln(params, b + "norm1", x, c), P.attention_view(params, b + "attn.", heads))
    x = x + a
    with P.op_tag(tags[1]):
        x = x + _ffn(params, b + "ffn.", _ln(params, b + "norm2", x, c), c, "ffn")
    return x, c


def vit_block_backward(b: str, dx, c, grads):
    d, g = P.ffn_backward(dx, c["ffn"])
    P.accumulate(grads, b + "ffn.", g)
    dx = dx + _ln_back(grads, b, "norm2", d, c)
    d, _, g = P.attention_backward(dx, c["attn"])
    P.accumulate(grads, b + "attn.", g)
    return dx + _ln_back(grads, b, "norm1", d, c)


# --------------------------------------------------------------------------
# stacks


def blocks_forward(cfg: EncoderConfig, params: dict, X):
    """Run every block on region-major tokens ``X`` [..., M, n, C].

    Returns ``(locals, reps, cache)``; reps is ``None`` for ``vit_global``.
    """
    caches = []
    if cfg.vit_global:
        shape = X.shape
        h = X.reshape(*shape[:-3], shape[-3] * shape[-2], shape[-1])
        for i in range(cfg.depth):
            h, c = vit_block_forward(cfg.heads, params, f"blocks.{i}.", h)
            caches.append(c)
        return h.reshape(shape), None, {"kind": "blocks", "layers": caches, "lead": shape[:-3]}
    reps = params["reps"]
    if reps.shape != (X.shape[-3], X.shape[-1]):
        raise ShapeMismatch(f"{X.shape[-3]} regions but representative tokens {reps.shape}")
    S = np.broadcast_to(reps, X.shape[:-3] + reps.shape)
    for i in range(cfg.depth):
        X, S, c = lgi_block_forward(cfg, params, f"blocks.{i}.", X, S)
        caches.append(c)
    return X, S, {"kind": "blocks", "layers": caches, "lead": X.shape[:-3]}


def blocks_backward(cfg: EncoderConfig, dX, dS, cache, grads: dict):
    """Backward through :func:`blocks_forward`. Returns dX; fills ``grads``."""
    if cache is None or cache.get("kind") != "blocks":
        raise MissingCache("blocks_backward needs the cache from blocks_forward")
    layers = cache["layers"]
    if cfg.vit_global:
        shape = dX.shape
        d = dX.reshape(*shape[:-3], shape[-3] * shape[-2], shape[-1])
        for i in reversed(range(cfg.depth)):
            d = vit_block_backward(f"blocks.{i}.", d, layers[i], grads)
        return d.reshape(shape)
    if dS is None:
        dS = np.zeros(dX.shape[:-2] + dX.shape[-1:], dX.dtype)
    for i in reversed(range(cfg.depth)):
        dX, dS = lgi_block_backward(cfg, f"blocks.{i}.", dX, dS, layers[i], grads)
    drep = dS.reshape(-1, *dS.shape[-2:]).sum(axis=0)
    P.accumulate(grads, "", {"reps": drep})
    return dX


# --------------------------------------------------------------------------
# embedding + positions + gather


def embed_forward(cfg: EncoderConfig, params: dict, patches, vis_idx=None):
    """Cube patches [..., K, P] -> region-major tokens [..., M, n, C].

    ``vis_idx`` [..., L] selects visible cubes (canonical order) before any
    arithmetic, so masked pixel values are never read. ``None`` keeps all
    tokens, reordered region-major.
    """
    part = cfg.partition
    K = part.K
    if patches.shape[-2] != K or patches.shape[-1] != cfg.patch_values:
        raise ShapeMismatch(f"patches {patches.shape} vs grid K={K}, P={cfg.patch_values}")
    lead = patches.shape[:-2]
    if vis_idx is None:
        vis_idx = np.broadcast_to(part.order.ravel(), lead + (K,))
    vis_idx = np.asarray(vis_idx)
    L = vis_idx.shape[-1]
    if L % part.M:
        raise ShapeMismatch(f"{L} visible tokens cannot split evenly over {part.M} regions")
    sel = np.take_along_axis(patches, vis_idx[..., None], axis=-2)
    pos = sincos_table(cfg.grid, cfg.dim).astype(params["embed.w"].dtype)
    with P.op_tag("embed"):
        tok, lc = P.linear(sel, params["embed.w"], params["embed.b"])
    tok = tok + pos[vis_idx]
    X = tok.reshape(*lead, part.M, L // part.M, cfg.dim)
    return X, {"kind": "embed", "linear": lc, "lead": lead, "L": L}


def embed_backward(dX, cache, grads: dict):
    lead, L = cache["lead"], cache["L"]
    dtok = dX.reshape(*lead, L, dX.shape[-1])
    _, g = P.linear_backward(dtok, cache["linear"])
    P.accumulate(grads, "embed.", g)


def encode(grid: TokenGrid, mask: TubeMask | None, params: dict, cfg: EncoderConfig):
    """Encode one already-embedded token grid.

    Returns ``(locals, reps)``: locals ``[K or L, C]`` in canonical
    region-major order, reps ``[M, C]`` (``None`` for ``vit_global``).
    """
    part = cfg.partition
    if tuple(grid.grid) != part.grid or grid.C != cfg.dim:
        raise ShapeMismatch(f"token grid {grid.grid}x{grid.C} vs config {part.grid}x{cfg.dim}")
    if mask is None:
        idx = part.order.ravel()
    else:
        if mask.partition is not None and mask.partition != part:
            raise ShapeMismatch("mask was drawn for a different region partition")
        counts = np.bincount(part.region_index.ravel()[mask.visible.ravel()], minlength=part.M)
        if len(set(counts.tolist())) != 1:
            raise NonIntegralVisibleCount(f"unequal visible counts per region: {counts.tolist()}")
        idx = part.order.ravel()[mask.visible.ravel()[part.order.ravel()]]
    pos = sincos_table(part.grid, cfg.dim).astype(grid.tokens.dtype)
    X = (grid.tokens[idx] + pos[idx]).reshape(part.M, -1, cfg.dim)
    X, S, _ = blocks_forward(cfg, params, X)
    return X.reshape(-1, cfg.dim), (None if S is None else np.array(S))


def pool_forward(X, S, mode: str):
    """Pooled vector [..., C] from locals [..., M, n, C] and reps [..., M, C]."""
    if mode == "representative_mean":
        if S is None:
            raise ConfigError("representative_mean pooling needs representative tokens")
        return S.mean(axis=-2)
    if mode == "local_mean":
        return X.mean(axis=(-3, -2))
    raise ConfigError(f"unknown pool mode {mode!r}")


def pool_backward(dpooled, X_shape, S_shape, mode: str):
    if mode == "representative_mean":
        M = S_shape[-2]
        dS = np.broadcast_to(dpooled[..., None, :] / M, S_shape).copy()
        return np.zeros(X_shape, dpooled.dtype), dS
    M, n = X_shape[-3], X_shape[-2]
    dX = np.broadcast_to(dpooled[..., None, None, :] / (M * n), X_shape).copy()
    return dX, (None if S_shape is None else np.zeros(S_shape, dpooled.dtype))


def pool_for_classification(locals_, reps, mode: str):
    """Unbatched pooling: locals [L, C], reps [M, C] -> [C]."""
    if mode == "representative_mean":
        if reps is None:
            raise ConfigError("representative_mean pooling needs representative tokens")
        return np.asarray(reps).mean(axis=0)
    if mode == "local_mean":
        return np.asarray(locals_).mean(axis=0)
    raise ConfigError(f"unknown pool mode {mode!r}")
