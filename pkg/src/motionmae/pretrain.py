"""Masked appearance + motion pre-training: decoder, heads, loss, optimizer.

A token covers a 2-frame cube. Its appearance head predicts the first
frame's patch, its motion head predicts (second frame - first frame) for the
same patch. Both losses are mean squared errors over masked tokens only, each
divided by its own masked element count, and mixed with weight ``lam``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import lgi_former as E
from . import primitives as P
from .errors import ShapeMismatch
from .masking import TubeMask
from .tokenizer import (
    ReconTargets,
    VideoClip,
    build_targets,
    denormalize_frames,
    model_input,
    normalize_targets,
    sincos_table,
    target_tokens,
    tokens_to_frames,
)


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0

    def to_dict(self):
        return asdict(self)


DESK_DECODER = DecoderConfig(depth=1, dim=32, heads=2)


@dataclass
class PretrainLossReport:
    total: float
    appearance_mse: float
    motion_mse: float
    lam: float


def head_dim(enc_cfg: E.EncoderConfig) -> int:
    _, ch, cw = enc_cfg.cube
    return ch * cw * 3


def subparams(params: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# --------------------------------------------------------------------------
# parameters


def init_decoder(enc_cfg: E.EncoderConfig, dec: DecoderConfig, rng, dtype=np.float32) -> dict:
    Cd, Q = dec.dim, head_dim(enc_cfg)
    out = {}
    out |= E._prefixed("enc_norm.", P.init_ln(enc_cfg.dim, dtype))
    out["proj.w"] = P.xavier_uniform(rng, enc_cfg.dim, Cd, dtype)
    out["proj.b"] = np.zeros(Cd, dtype)
    out["mask_token"] = P.trunc_normal(rng, (Cd,), 0.02, dtype)
    for i in range(dec.depth):
        b = f"blocks.{i}."
        out |= E._prefixed(b + "norm1.", P.init_ln(Cd, dtype))
        out |= E._prefixed(b + "attn.", P.init_attention(rng, Cd, dtype))
        out |= E._prefixed(b + "norm2.", P.init_ln(Cd, dtype))
        out |= E._prefixed(b + "ffn.", P.init_ffn(rng, Cd, dec.mlp_ratio, dtype))
    out |= E._prefixed("norm.", P.init_ln(Cd, dtype))
    for h in ("head_app", "head_mot"):
        out[h + ".w"] = P.xavier_uniform(rng, Cd, Q, dtype)
        out[h + ".b"] = np.zeros(Q, dtype)
    return out


def init_pretrain_params(enc_cfg: E.EncoderConfig, dec: DecoderConfig, seed: int, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    params = E._prefixed("encoder.", E.init_encoder(enc_cfg, rng, dtype))
    params |= E._prefixed("decoder.", init_decoder(enc_cfg, dec, rng, dtype))
    return params


# --------------------------------------------------------------------------
# decoder


def decoder_forward(enc_cfg, dec: DecoderConfig, dp: dict, enc_out, vis_idx):
    """Encoded visible tokens [B, M, n, C] -> decoded sequence [B, K, C_d]."""
    B = enc_out.shape[0]
    K = enc_cfg.partition.K
    L = vis_idx.shape[-1]
    flat = enc_out.reshape(B, L, enc_cfg.dim)
    c: dict = {"kind": "decoder", "enc_shape": enc_out.shape, "vis_idx": vis_idx}
    with P.op_tag("decoder"):
        y, c["enc_norm"] = P.layer_norm(flat, P.ln_view(dp, "enc_norm."))
        z, c["proj"] = P.linear(y, dp["proj.w"], dp["proj.b"])
        pos = sincos_table(enc_cfg.grid, dec.dim).astype(z.dtype)
        full = np.broadcast_to(dp["mask_token"], (B, K, dec.dim)).copy()
        np.put_along_axis(full, vis_idx[..., None], z, axis=1)
        full = full + pos
        layers = []
        for i in range(dec.depth):
            full, lc = E.vit_block_forward(dec.heads, dp, f"blocks.{i}.", full, ("decoder", "decoder"))
            layers.append(lc)
    c["layers"] = layers
    return full, c


def decoder_backward(dec: DecoderConfig, dfull, c, grads: dict):
    for i in reversed(range(dec.depth)):
        dfull = E.vit_block_backward(f"blocks.{i}.", dfull, c["layers"][i], grads)
    vis_idx = c["vis_idx"]
    visible = np.zeros(dfull.shape[:2], dtype=bool)
    np.put_along_axis(visible, vis_idx, True, axis=1)
    P.accumulate(grads, "", {"mask_token": dfull[~visible].sum(axis=0)})
    dz = np.take_along_axis(dfull, vis_idx[..., None], axis=1)
    dy, g = P.linear_backward(dz, c["proj"])
    P.accumulate(grads, "proj.", g)
    dflat, g = P.layer_norm_backward(dy, c["enc_norm"])
    P.accumulate(grads, "enc_norm.", g)
    return dflat.reshape(c["enc_shape"])


def decode(visible_encoded, mask: TubeMask, params: dict, enc_cfg, dec: DecoderConfig):
    """Unbatched decoder: [L, C_enc] in canonical order -> [K, C_d]."""
    idx = mask.visible_indices()
    if visible_encoded.shape[0] != len(idx):
        raise ShapeMismatch(f"{visible_encoded.shape[0]} encoded tokens for {len(idx)} visible slots")
    dp = subparams(params, "decoder.") if "decoder.proj.w" in params else params
    M = enc_cfg.partition.M
    x = visible_encoded.reshape(1, M, -1, enc_cfg.dim)
    out, _ = decoder_forward(enc_cfg, dec, dp, x, idx[None])
    return out[0]


def predict(decoded, params: dict):
    """Decoded tokens [..., K, C_d] -> (appearance, motion) predictions [..., K, Q]."""
    dp = subparams(params, "decoder.") if "decoder.head_app.w" in params else params
    with P.op_tag("decoder"):
        app, ca = P.linear(decoded, dp["head_app.w"], dp["head_app.b"])
        mot, cm = P.linear(decoded, dp["head_mot.w"], dp["head_mot.b"])
    return app, mot, (ca, cm)


# --------------------------------------------------------------------------
# loss


def masked_mse(pred, target, masked):
    """Mean squared error over masked tokens only.

    ``masked`` is a boolean [..., K] (True where the token was hidden) or a
    :class:`TubeMask`.
    """
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    if isinstance(masked, TubeMask):
        masked = ~masked.visible.ravel()
    w = np.asarray(masked, dtype=pred.dtype)[..., None]
    count = w.sum() * pred.shape[-1]
    if count == 0:
        return 0.0
    diff = pred - target
    return float((w * diff * diff).sum() / count)


@dataclass
class Batch:
    """Pre-training inputs for ``B`` clips in token layout."""

    patches: np.ndarray  # [B, K, P] cube pixels
    vis_idx: np.ndarray  # [B, L] visible grid indices, canonical order
    masked: np.ndarray  # [B, K] bool
    app: np.ndarray  # [B, K, Q] appearance targets
    mot: np.ndarray  # [B, K, Q] motion targets
    targets: list[ReconTargets] = field(default_factory=list)

    def __len__(self):
        return self.patches.shape[0]


def make_batch(clips, masks: list[TubeMask], enc_cfg: E.EncoderConfig, norm: str = "per_cube", dtype=None) -> Batch:
    frames = np.stack([c.frames if isinstance(c, VideoClip) else np.asarray(c) for c in clips])
    dtype = dtype or frames.dtype
    p = enc_cfg.cube[1]
    patches = model_input(frames, enc_cfg.cube, dtype)
    tgts = [normalize_targets(build_targets(VideoClip(f), p), norm, p) for f in frames]
    app = np.stack([target_tokens(t.appearance, p) for t in tgts]).astype(dtype)
    mot = np.stack([target_tokens(t.motion, p) for t in tgts]).astype(dtype)
    vis_idx = np.stack([m.visible_indices() for m in masks])
    masked = np.stack([~m.visible.ravel() for m in masks])
    return Batch(patches, vis_idx, masked, app, mot, tgts)


def pretrain_forward(enc_cfg, dec: DecoderConfig, params: dict, batch: Batch, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ep = subparams(params, "encoder.")
    dp = subparams(params, "decoder.")
    X, c_embed = E.embed_forward(enc_cfg, ep, batch.patches, batch.vis_idx)
    X, S, c_blocks = E.blocks_forward(enc_cfg, ep, X)
    full, c_dec = decoder_forward(enc_cfg, dec, dp, X, batch.vis_idx)
    with P.op_tag("decoder"):
        y, c_norm = P.layer_norm(full, P.ln_view(dp, "norm."))
    app, mot, c_heads = predict(y, dp)
    la = masked_mse(app, batch.app, batch.masked)
    lm = masked_mse(mot, batch.mot, batch.masked)
    report = PretrainLossReport(lam * la + (1.0 - lam) * lm, la, lm, lam)
    cache = {
        "kind": "pretrain", "embed": c_embed, "blocks": c_blocks, "dec": c_dec,
        "norm": c_norm, "heads": c_heads, "app": app, "mot": mot,
        "S_shape": None if S is None else S.shape, "lam": lam,
    }
    return report, cache


def pretrain_backward(enc_cfg, dec: DecoderConfig, batch: Batch, cache) -> dict:
    lam = cache["lam"]
    w = batch.masked[..., None].astype(cache["app"].dtype)
    count = w.sum() * cache["app"].shape[-1]
    dapp = (2.0 * lam / count) * w * (cache["app"] - batch.app)
    dmot = (2.0 * (1.0 - lam) / count) * w * (cache["mot"] - batch.mot)
    dg: dict = {}
    ca, cm = cache["heads"]
    dy, g = P.linear_backward(dapp, ca)
    P.accumulate(dg, "head_app.", g)
    dy2, g = P.linear_backward(dmot, cm)
    P.accumulate(dg, "head_mot.", g)
    dfull, g = P.layer_norm_backward(dy + dy2, cache["norm"])
    P.accumulate(dg, "norm.", g)
    dX = decoder_backward(dec, dfull, cache["dec"], dg)
    eg: dict = {}
    dS = None if cache["S_shape"] is None else np.zeros(cache["S_shape"], dX.dtype)
    dX = E.blocks_backward(enc_cfg, dX, dS, cache["blocks"], eg)
    E.embed_backward(dX, cache["embed"], eg)
    return E._prefixed("encoder.", eg) | E._prefixed("decoder.", dg)


def pretrain_loss(clip: VideoClip, mask: TubeMask, params: dict, enc_cfg, dec: DecoderConfig,
                  lam: float = 0.5, norm: str = "per_cube") -> PretrainLossReport:
    batch = make_batch([clip], [mask], enc_cfg, norm, dtype=params["encoder.embed.w"].dtype)
    report, _ = pretrain_forward(enc_cfg, dec, params, batch, lam)
    return report


# --------------------------------------------------------------------------
# optimization


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only, never to learnable tokens."""
    return value.ndim >= 2 and not name.endswith(("reps", "mask_token"))


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """In-place update of ``params``; names missing from ``grads`` get zero gradient."""
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if decays(name, p):
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out |= {f"opt.v.{k}": v for k, v in self.v.items()}
        return out

    def load_state_tensors(self, tensors: dict, step_count: int) -> None:
        self.m = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt.m.")}
        self.v = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt.v.")}
        self.step_count = step_count


def scaled_lr(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 256.0


@dataclass(frozen=True)
class CosineSchedule:
    """Linear warmup from 0 to the scaled peak, then cosine decay to ``min_lr``."""

    base_lr: float
    batch_size: int
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0

    @property
    def peak_lr(self) -> float:
        return scaled_lr(self.base_lr, self.batch_size)

    def __call__(self, step: int) -> float:
        peak = self.peak_lr
        if step < self.warmup_steps:
            return peak * step / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min((step - self.warmup_steps) / span, 1.0)
        return self.min_lr + 0.5 * (peak - self.min_lr) * (1.0 + math.cos(math.pi * frac))


def pretrain_step(enc_cfg, dec: DecoderConfig, params: dict, opt: AdamW, schedule: CosineSchedule,
                  step: int, batch: Batch, lam: float):
    report, cache = pretrain_forward(enc_cfg, dec, params, batch, lam)
    grads = pretrain_backward(enc_cfg, dec, batch, cache)
    lr = schedule(step)
    opt.step(params, grads, lr)
    return report, lr


# --------------------------------------------------------------------------
# reconstruction


def stitch_reconstruction(app_pred, mot_pred, targets: ReconTargets, mask: TubeMask | None = None,
                          fill_visible: bool = False) -> np.ndarray:
    """Rebuild a full clip [T, H, W, 3] from per-token predictions.

    Frame ``2t`` is the appearance prediction; frame ``2t+1`` adds the
    predicted frame difference to it. Normalized predictions are mapped back
    with the per-patch statistics stored in ``targets``. With
    ``fill_visible`` the visible tokens take the ground-truth values.
    """
    p = targets.patch
    T2, H, W, _ = targets.appearance.shape
    grid = (T2, H // p, W // p)
    app = tokens_to_frames(np.asarray(app_pred), grid, p)
    mot = tokens_to_frames(np.asarray(mot_pred), grid, p)
    if targets.normalized:
        app = denormalize_frames(app, targets.per_cube_stats["appearance"], p)
        mot = denormalize_frames(mot, targets.per_cube_stats["motion"], p)
        gt_app = denormalize_frames(targets.appearance, targets.per_cube_stats["appearance"], p)
        gt_mot = denormalize_frames(targets.motion, targets.per_cube_stats["motion"], p)
    else:
        gt_app, gt_mot = targets.appearance, targets.motion
    if fill_visible and mask is not None:
        vis = np.repeat(np.repeat(mask.visible, p, axis=1), p, axis=2)[..., None]
        app = np.where(vis, gt_app, app)
        mot = np.where(vis, gt_mot, mot)
    out = np.empty((2 * T2, H, W, 3), dtype=np.result_type(app, mot))
    out[0::2] = app
    out[1::2] = app + mot
    return out
