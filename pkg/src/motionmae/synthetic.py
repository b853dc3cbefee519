"""Synthetic labelled clips: static textures moved by integer circular shifts.

Every texture is standardised per clip and per channel to a fixed mean and
standard deviation, and motion is a whole-pixel circular shift, so every
frame of every clip has the same pixel statistics whatever its class. Two
classes that share a texture family therefore differ only in how the
pattern moves.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

TEXTURES = ("blobs", "stripes")
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))
TEX_MEAN = 0.5
TEX_STD = 0.15


@dataclass(frozen=True)
class ClassSpec:
    texture: str
    speed: int = 0  # pixels per frame
    direction: str = "random"  # "random" picks one of four axis directions per clip

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"texture must be one of {TEXTURES}")
        if self.speed < 0:
            raise ValueError("speed must be non-negative")


def _default_classes():
    return (
        ClassSpec("blobs", 0),
        ClassSpec("blobs", 1),
        ClassSpec("stripes", 0),
        ClassSpec("stripes", 1),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    frames: int = 8
    size: int = 32
    classes: tuple[ClassSpec, ...] = field(default_factory=_default_classes)
    noise: float = 0.0  # per-cube normalisation would turn static-cube noise into unit-variance targets
    max_freq: int = 2  # highest spatial frequency, cycles per tile
    tile: int = 0  # texture period in pixels; 0 means one tile per frame
    motion_pair: tuple[int, int] = (0, 1)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def __post_init__(self):
        a, b = self.motion_pair
        ca, cb = self.classes[a], self.classes[b]
        if ca.texture != cb.texture or ca.speed == cb.speed:
            raise ValueError("the motion-only pair must share a texture and differ in speed")
        if self.tile and (self.tile <= 0 or self.size % self.tile):
            raise ValueError("tile must divide the frame size")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ClassSpec(**c) for c in d["classes"])
        if "motion_pair" in d:
            d["motion_pair"] = tuple(d["motion_pair"])
        return cls(**d)


def _standardise(x: np.ndarray) -> np.ndarray:
    # per channel over the spatial axes
    mu = x.mean(axis=(0, 1), keepdims=True)
    sd = x.std(axis=(0, 1), keepdims=True)
    return TEX_MEAN + TEX_STD * (x - mu) / np.maximum(sd, 1e-12)


def make_texture(kind: str, size: int, rng: np.random.Generator, max_freq: int = 2) -> np.ndarray:
    """Periodic [size, size, 3] texture, exactly standardised per channel."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field_ = np.zeros((size, size, 3))
    if kind == "blobs":
        for _ in range(6):
            ky, kx = rng.integers(-max_freq, max_freq + 1, size=2)
            if ky == 0 and kx == 0:
                kx = 1
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * (ky * yy + kx * xx) / size + phase)
            field_ += wave[..., None] * rng.normal(size=3)
    elif kind == "stripes":
        ky, kx = rng.integers(1, max_freq + 1), rng.integers(-max_freq, max_freq + 1)
        for harmonic, amp in ((1, 1.0), (2, 0.35)):
            phase = rng.uniform(0, 2 * np.pi)
            wave = np.cos(2 * np.pi * harmonic * (ky * yy + kx * xx) / size + phase)
            field_ += amp * wave[..., None] * (1.0 + 0.3 * rng.normal(size=3))
    else:
        raise ValueError(f"unknown texture {kind!r}")
    return _standardise(field_)


def render_clip(texture: np.ndarray, frames: int, speed: int, direction: tuple[int, int],
                noise: float, rng: np.random.Generator) -> np.ndarray:
    dy, dx = direction
    out = np.stack([np.roll(texture, (t * speed * dy, t * speed * dx), axis=(0, 1)) for t in range(frames)])
    if noise > 0:
        out = out + rng.normal(scale=noise, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_synthetic(spec: SyntheticSpec, seed: int, n: int, classes=None):
    """``n`` clips [n, T, H, W, 3] and labels [n], balanced round-robin over ``classes``."""
    classes = list(range(spec.num_classes)) if classes is None else list(classes)
    root = np.random.SeedSequence(seed)
    clips = np.empty((n, spec.frames, spec.size, spec.size, 3), np.float32)
    labels = np.empty(n, np.int64)
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        label = classes[i % len(classes)]
        cs = spec.classes[label]
        period = spec.tile or spec.size
        tex = make_texture(cs.texture, period, rng, spec.max_freq)
        if period != spec.size:
            tex = np.tile(tex, (spec.size // period, spec.size // period, 1))
        if cs.direction == "random":
            direction = DIRECTIONS[rng.integers(len(DIRECTIONS))]
        else:
            direction = {"right": (0, 1), "left": (0, -1), "down": (1, 0), "up": (-1, 0)}[cs.direction]
        clips[i] = render_clip(tex, spec.frames, cs.speed, direction, spec.noise, rng)
        labels[i] = label
    return clips, labels


def pair_statistics(clips: np.ndarray, labels: np.ndarray, pair) -> dict[str, float]:
    """Appearance vs motion contrast between the two classes of ``pair``."""
    a, b = pair
    out = {}
    stats = {}
    for c in (a, b):
        x = clips[labels == c].astype(np.float64)
        stats[c] = {
            "mean": x.mean(axis=(2, 3, 4)).mean(axis=0),  # per-frame, averaged over clips
            "var": x.var(axis=(2, 3, 4)).mean(axis=0),
            "diff_energy": float(((x[:, 1:] - x[:, :-1]) ** 2).mean()),
        }
    out["mean_gap"] = float(np.abs(stats[a]["mean"] - stats[b]["mean"]).max())
    out["var_gap"] = float(np.abs(stats[a]["var"] - stats[b]["var"]).max())
    ea, eb = stats[a]["diff_energy"], stats[b]["diff_energy"]
    out["diff_energy"] = (ea, eb)
    out["energy_ratio"] = max(ea, eb) / min(ea, eb) if min(ea, eb) > 0 else float("inf")
    return out
