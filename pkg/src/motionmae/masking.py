"""Region partitions, stratified tube masks, and visible-token gather/scatter."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import NonIntegralVisibleCount, NonTilingRegion, ShapeMismatch
from .tokenizer import TokenGrid

_MASK_MAGIC = b"MMSK"
_MASK_VERSION = 1


@dataclass(frozen=True)
class RegionPartition:
    grid: tuple[int, int, int]
    region: tuple[int, int, int]

    @property
    def K(self) -> int:
        return int(np.prod(self.grid))

    @property
    def N(self) -> int:
        return int(np.prod(self.region))

    @property
    def M(self) -> int:
        return self.K // self.N

    @property
    def region_grid(self) -> tuple[int, int, int]:
        return tuple(g // r for g, r in zip(self.grid, self.region))

    @cached_property
    def order(self) -> np.ndarray:
        """[M, N] flat grid indices; regions row-major, tokens row-major inside."""
        (gt, gh, gw), (t, h, w) = self.grid, self.region
        idx = np.arange(self.K).reshape(gt // t, t, gh // h, h, gw // w, w)
        return idx.transpose(0, 2, 4, 1, 3, 5).reshape(self.M, self.N)

    @cached_property
    def region_index(self) -> np.ndarray:
        """Region id of every grid cell, shape ``grid``."""
        out = np.empty(self.K, dtype=np.int64)
        out[self.order.ravel()] = np.repeat(np.arange(self.M), self.N)
        return out.reshape(self.grid)


def make_partition(grid, region) -> RegionPartition:
    grid = tuple(int(g) for g in grid)
    region = tuple(int(r) for r in region)
    if len(grid) != 3 or len(region) != 3:
        raise ShapeMismatch("grid and region must both be 3D")
    for g, r in zip(grid, region):
        if r < 1 or g % r:
            raise NonTilingRegion(f"region {region} does not tile grid {grid}")
    return RegionPartition(grid, region)


@dataclass
class TubeMask:
    visible: np.ndarray  # bool [T', H', W']
    rho: float
    seed: int
    partition: RegionPartition | None = None

    @property
    def grid(self):
        return self.visible.shape

    @property
    def num_visible(self) -> int:
        return int(self.visible.sum())

    def visible_indices(self) -> np.ndarray:
        """Visible flat grid indices in canonical (region-major) order."""
        flat = self.visible.ravel()
        if self.partition is None:
            return np.flatnonzero(flat)
        order = self.partition.order.ravel()
        return order[flat[order]]

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.visible.ravel())


def visible_per_footprint(partition: RegionPartition, rho: float) -> int:
    if not 0.0 < rho < 1.0:
        raise NonIntegralVisibleCount(f"masking ratio must lie in (0, 1), got {rho}")
    t, h, w = partition.region
    per_region = (1.0 - rho) * partition.N
    if abs(per_region - round(per_region)) > 1e-9 or round(per_region) % t:
        raise NonIntegralVisibleCount(
            f"(1 - {rho}) * {partition.N} = {per_region:g} visible tokens per region "
            f"is not an integer multiple of the region's time extent {t}"
        )
    s = round(per_region) // t
    if s < 1:
        raise NonIntegralVisibleCount("no visible token would remain in a region")
    return s


def sample_tube_mask(partition: RegionPartition, rho: float, seed: int) -> TubeMask:
    """Pick the same number of spatial positions in every region footprint.

    The selection is replicated along t', so every region sees exactly
    ``(1 - rho) * N`` visible tokens and the mask is a tube.
    """
    s = visible_per_footprint(partition, rho)
    _, gh, gw = partition.grid
    _, h, w = partition.region
    rng = np.random.default_rng(seed)
    nfy, nfx = gh // h, gw // w
    scores = rng.random((nfy, nfx, h * w))
    keep = np.argsort(scores, axis=-1, kind="stable")[..., :s]
    foot = np.zeros((nfy, nfx, h * w), dtype=bool)
    np.put_along_axis(foot, keep, True, axis=-1)
    spatial = foot.reshape(nfy, nfx, h, w).transpose(0, 2, 1, 3).reshape(gh, gw)
    visible = np.broadcast_to(spatial, partition.grid).copy()
    return TubeMask(visible, float(rho), int(seed), partition)


def full_mask(partition: RegionPartition) -> TubeMask:
    """All-visible mask (fine-tuning); rho is recorded as 0."""
    return TubeMask(np.ones(partition.grid, dtype=bool), 0.0, 0, partition)


def gather_visible(grid: TokenGrid, mask: TubeMask):
    if tuple(mask.grid) != tuple(grid.grid):
        raise ShapeMismatch(f"mask grid {mask.grid} vs token grid {grid.grid}")
    idx = mask.visible_indices()
    return grid.tokens[idx], idx


def scatter_with_mask_tokens(visible, mask: TubeMask, mask_token, pos, index=None):
    """Place visible embeddings at their slots, ``mask_token`` elsewhere, add ``pos``.

    ``visible`` is [..., L, C_d] in the order of ``index`` (canonical order
    of ``mask`` by default).
    """
    if mask.num_visible == 0:
        raise ShapeMismatch("mask has no visible tokens")
    idx = mask.visible_indices() if index is None else index
    K = int(np.prod(mask.grid))
    if visible.shape[-2] != len(idx):
        raise ShapeMismatch(f"{visible.shape[-2]} visible rows for {len(idx)} visible slots")
    if pos.shape != (K, visible.shape[-1]):
        raise ShapeMismatch(f"positional table {pos.shape} vs ({K}, {visible.shape[-1]})")
    out = np.broadcast_to(mask_token, visible.shape[:-2] + (K, visible.shape[-1])).copy()
    out[..., idx, :] = visible
    return out + pos


# --------------------------------------------------------------------------
# serialization


def mask_to_bytes(mask: TubeMask) -> bytes:
    region = mask.partition.region if mask.partition is not None else (0, 0, 0)
    header = _MASK_MAGIC + struct.pack(
        "<I3I3Idq", _MASK_VERSION, *mask.grid, *region, mask.rho, mask.seed
    )
    return header + np.packbits(mask.visible.ravel(), bitorder="little").tobytes()


def mask_from_bytes(data: bytes) -> TubeMask:
    if data[:4] != _MASK_MAGIC:
        raise ValueError("not a serialized tube mask")
    fmt = "<I3I3Idq"
    head = struct.calcsize(fmt)
    if len(data) < 4 + head:
        raise ValueError("truncated tube mask header")
    version, gt, gh, gw, rt, rh, rw, rho, seed = struct.unpack(fmt, data[4:4 + head])
    if version != _MASK_VERSION:
        raise ValueError(f"unsupported mask version {version}")
    K = gt * gh * gw
    bits = np.frombuffer(data[4 + head:], dtype=np.uint8)
    if bits.size * 8 < K:
        raise ValueError("truncated tube mask payload")
    visible = np.unpackbits(bits, count=K, bitorder="little").astype(bool).reshape(gt, gh, gw)
    part = make_partition((gt, gh, gw), (rt, rh, rw)) if rt else None
    return TubeMask(visible, rho, seed, part)
