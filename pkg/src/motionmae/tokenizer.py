"""Clips, cube embedding, positional tables and reconstruction targets.

Frame parity is 0-based throughout: each 2-frame cube pairs frame ``2t``
(the appearance frame) with frame ``2t+1`` (the motion frame).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import OddFrameCount, OutOfRange, ShapeMismatch, TooSmall
from .primitives import matmul, trunc_normal

NORM_EPS = 1e-6
DEFAULT_CUBE = (2, 16, 16)
# fixed per-channel input standardisation (ImageNet statistics)
PIXEL_MEAN = np.array([0.485, 0.456, 0.406])
PIXEL_STD = np.array([0.229, 0.224, 0.225])


@dataclass
class VideoClip:
    frames: np.ndarray  # [T, H, W, 3], values in [0, 1]
    stride: int = 1
    source_id: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeMismatch(f"frames must be [T, H, W, 3], got {self.frames.shape}")
        if self.stride < 1:
            raise ValueError("stride must be positive")

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [K, C]
    grid: tuple[int, int, int]

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.tokens.shape[0] != int(np.prod(self.grid)):
            raise ShapeMismatch(f"{self.tokens.shape[0]} tokens for grid {self.grid}")

    @property
    def K(self) -> int:
        return self.tokens.shape[0]

    @property
    def C(self) -> int:
        return self.tokens.shape[1]


@dataclass
class ReconTargets:
    appearance: np.ndarray  # [T/2, H, W, 3]
    motion: np.ndarray  # [T/2, H, W, 3]
    normalized: bool = False
    # per target frame and patch: (mean, std) arrays of shape [T/2, H/p, W/p]
    per_cube_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    patch: int = 16


def token_grid_shape(frames_shape, cube=DEFAULT_CUBE) -> tuple[int, int, int]:
    T, H, W = frames_shape[:3]
    ct, ch, cw = cube
    if T % ct or H % ch or W % cw:
        raise ShapeMismatch(f"clip {T}x{H}x{W} is not divisible by cube {cube}")
    return T // ct, H // ch, W // cw


# --------------------------------------------------------------------------
# sampling and cropping


def sample_clip(video, num_frames: int, stride: int, offset: int = 0, source_id: str = "") -> VideoClip:
    video = np.asarray(video)
    last = offset + (num_frames - 1) * stride
    if offset < 0 or num_frames < 1 or last >= len(video):
        raise OutOfRange(
            f"need index {last} but the video has {len(video)} frames "
            f"(num_frames={num_frames}, stride={stride}, offset={offset})"
        )
    idx = offset + stride * np.arange(num_frames)
    return VideoClip(video[idx], stride=stride, source_id=source_id)


def crop_upper_center(frame: np.ndarray, out=(160, 160)) -> np.ndarray:
    """Top-aligned, horizontally centred crop. Works on [..., H0, W0, 3] too."""
    oh, ow = out
    H0, W0 = frame.shape[-3], frame.shape[-2]
    if H0 < oh or W0 < ow:
        raise TooSmall(f"frame {H0}x{W0} is smaller than crop {oh}x{ow}")
    left = (W0 - ow) // 2
    return frame[..., :oh, left:left + ow, :]


# --------------------------------------------------------------------------
# cube embedding


def patchify_cubes(frames: np.ndarray, cube=DEFAULT_CUBE) -> np.ndarray:
    """[..., T, H, W, 3] -> [..., K, ct*ch*cw*3], row-major over (t', h', w')."""
    *lead, T, H, W, ch3 = frames.shape
    gt, gh, gw = token_grid_shape((T, H, W), cube)
    ct, cy, cx = cube
    x = frames.reshape(*lead, gt, ct, gh, cy, gw, cx, ch3)
    nl = len(lead)
    order = list(range(nl)) + [nl + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.transpose(order)
    return x.reshape(*lead, gt * gh * gw, ct * cy * cx * ch3)


def model_input(frames: np.ndarray, cube=DEFAULT_CUBE, dtype=None) -> np.ndarray:
    """Standardised cube patches, the encoder's input. Targets use raw pixels."""
    frames = np.asarray(frames)
    dtype = dtype or (frames.dtype if frames.dtype.kind == "f" else np.float32)
    x = (frames - PIXEL_MEAN.astype(dtype)) / PIXEL_STD.astype(dtype)
    return patchify_cubes(x.astype(dtype, copy=False), cube)


def init_embedding(rng, C: int, cube=DEFAULT_CUBE, dtype=np.float32) -> dict[str, np.ndarray]:
    P = int(np.prod(cube)) * 3
    return {"w": trunc_normal(rng, (P, C), 0.02, dtype), "b": np.zeros(C, dtype)}


def cube_embed(clip: VideoClip, weights: dict, cube=DEFAULT_CUBE) -> TokenGrid:
    grid = token_grid_shape(clip.shape, cube)
    patches = model_input(clip.frames, cube)
    if patches.shape[-1] != weights["w"].shape[0]:
        raise ShapeMismatch(
            f"cube of {patches.shape[-1]} values vs embedding of {weights['w'].shape[0]} inputs"
        )
    return TokenGrid(matmul(patches, weights["w"]) + weights["b"], grid)


# --------------------------------------------------------------------------
# positional table


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / max(half, 1)))
    ang = positions[:, None].astype(np.float64) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def sincos_table(grid, C: int) -> np.ndarray:
    """Fixed 3D sin-cos table [K, C]; channels split into t / h / w blocks."""
    if C < 6:
        raise ShapeMismatch("positional table needs at least 6 channels")
    cs = (C // 3) // 2 * 2
    ct = C - 2 * cs
    if ct % 2:
        raise ShapeMismatch("channel count must be even")
    gt, gh, gw = grid
    tt, hh, ww = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    table = np.concatenate(
        [
            _sincos_1d(tt.ravel(), ct),
            _sincos_1d(hh.ravel(), cs),
            _sincos_1d(ww.ravel(), cs),
        ],
        axis=1,
    )
    return table


def add_positional(grid: TokenGrid) -> TokenGrid:
    table = sincos_table(grid.grid, grid.C).astype(grid.tokens.dtype)
    return TokenGrid(grid.tokens + table, grid.grid)


# --------------------------------------------------------------------------
# targets


def build_targets(clip: VideoClip, patch: int = 16) -> ReconTargets:
    f = clip.frames
    if f.shape[0] % 2:
        raise OddFrameCount(f"clip has {f.shape[0]} frames; an even count is required")
    appearance = f[0::2].copy()
    # The difference of two float32 values is exact in float64, so
    # appearance + motion gives back the odd frame bit for bit.
    wide = np.promote_types(f.dtype, np.float64) if f.dtype.kind == "f" else np.float64
    motion = f[1::2].astype(wide) - f[0::2]
    return ReconTargets(appearance, motion, patch=patch)


def _patch_view(x: np.ndarray, p: int) -> np.ndarray:
    # [T2, H, W, 3] -> [T2, H/p, W/p, p*p*3]
    T2, H, W, c = x.shape
    if H % p or W % p:
        raise ShapeMismatch(f"{H}x{W} is not divisible by patch {p}")
    x = x.reshape(T2, H // p, p, W // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(T2, H // p, W // p, p * p * c)


def _unpatch_view(x: np.ndarray, p: int) -> np.ndarray:
    T2, gh, gw, _ = x.shape
    x = x.reshape(T2, gh, gw, p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(T2, gh * p, gw * p, 3)


def normalize_targets(targets: ReconTargets, mode: str = "per_cube", patch: int = 16) -> ReconTargets:
    if mode == "raw":
        return targets if targets.patch == patch else replace(targets, patch=patch)
    if mode != "per_cube":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if targets.normalized:
        return targets
    out, stats = {}, {}
    for name in ("appearance", "motion"):
        pv = _patch_view(getattr(targets, name), patch)
        mean = pv.mean(axis=-1)
        std = pv.std(axis=-1)
        out[name] = _unpatch_view((pv - mean[..., None]) / (std[..., None] + NORM_EPS), patch)
        stats[name] = (mean, std)
    return ReconTargets(out["appearance"], out["motion"], True, stats, patch)


def denormalize_frames(x: np.ndarray, stats: tuple[np.ndarray, np.ndarray], patch: int) -> np.ndarray:
    mean, std = stats
    pv = _patch_view(x, patch)
    return _unpatch_view(pv * (std[..., None] + NORM_EPS) + mean[..., None], patch)


def denormalize_targets(targets: ReconTargets) -> ReconTargets:
    if not targets.normalized:
        return targets
    p = targets.patch
    app = denormalize_frames(targets.appearance, targets.per_cube_stats["appearance"], p)
    mot = denormalize_frames(targets.motion, targets.per_cube_stats["motion"], p)
    return ReconTargets(app, mot, False, {}, p)


def target_tokens(x: np.ndarray, patch: int) -> np.ndarray:
    """[T/2, H, W, 3] target frames -> [K, p*p*3] in token grid order."""
    pv = _patch_view(x, patch)
    return pv.reshape(-1, pv.shape[-1])


def tokens_to_frames(tokens: np.ndarray, grid, patch: int) -> np.ndarray:
    gt, gh, gw = grid
    return _unpatch_view(tokens.reshape(gt, gh, gw, -1), patch)
