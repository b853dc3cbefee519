import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionmae.errors import NonIntegralVisibleCount, NonTilingRegion, ShapeMismatch
from motionmae.masking import (
    full_mask,
    gather_visible,
    make_partition,
    mask_from_bytes,
    mask_to_bytes,
    sample_tube_mask,
    scatter_with_mask_tokens,
    visible_per_footprint,
)
from motionmae.tokenizer import TokenGrid

BASE = make_partition((8, 10, 10), (2, 5, 10))


def test_partition_sizes():
    assert (BASE.K, BASE.N, BASE.M) == (800, 100, 8)
    # each region id owns exactly N grid cells
    assert (np.bincount(BASE.region_index.ravel()) == 100).all()
    # order lists every cell once
    assert sorted(BASE.order.ravel().tolist()) == list(range(800))


def test_non_tiling_region():
    with pytest.raises(NonTilingRegion):
        make_partition((8, 10, 10), (3, 5, 10))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_tube_mask_invariants(seed):
    m = sample_tube_mask(BASE, 0.9, seed)
    assert m.num_visible == 80
    per_region = np.bincount(BASE.region_index.ravel()[m.visible.ravel()], minlength=BASE.M)
    assert (per_region == 10).all()
    for t in range(1, 8):
        assert np.array_equal(m.visible[t], m.visible[0])


def test_mask_is_seeded():
    a = sample_tube_mask(BASE, 0.9, 5)
    b = sample_tube_mask(BASE, 0.9, 5)
    c = sample_tube_mask(BASE, 0.9, 6)
    assert np.array_equal(a.visible, b.visible)
    assert not np.array_equal(a.visible, c.visible)


def test_non_integral_ratio():
    with pytest.raises(NonIntegralVisibleCount):
        sample_tube_mask(BASE, 0.87, 0)
    small = make_partition((4, 4, 4), (2, 2, 2))
    with pytest.raises(NonIntegralVisibleCount):
        visible_per_footprint(small, 0.9)
    assert visible_per_footprint(small, 0.75) == 1


def test_visible_indices_are_region_major():
    m = sample_tube_mask(BASE, 0.9, 0)
    idx = m.visible_indices()
    regions = BASE.region_index.ravel()[idx]
    assert (np.diff(regions) >= 0).all()
    assert set(idx.tolist()) | set(m.masked_indices().tolist()) == set(range(800))


def test_gather_then_scatter_round_trip():
    rng = np.random.default_rng(0)
    tokens = rng.normal(size=(800, 6))
    m = sample_tube_mask(BASE, 0.9, 3)
    vis, idx = gather_visible(TokenGrid(tokens, BASE.grid), m)
    full = scatter_with_mask_tokens(vis, m, np.zeros(6), np.zeros((800, 6)))
    flat_vis = m.visible.ravel()
    assert np.array_equal(full[flat_vis], tokens[flat_vis])
    assert np.all(full[~flat_vis] == 0)


def test_gather_checks_grid():
    m = sample_tube_mask(BASE, 0.9, 0)
    with pytest.raises(ShapeMismatch):
        gather_visible(TokenGrid(np.zeros((8, 2)), (2, 2, 2)), m)


def test_full_mask():
    m = full_mask(BASE)
    assert m.num_visible == 800 and len(m.masked_indices()) == 0


def test_mask_bytes_round_trip():
    m = sample_tube_mask(BASE, 0.9, 11)
    back = mask_from_bytes(mask_to_bytes(m))
    assert np.array_equal(back.visible, m.visible)
    assert (back.rho, back.seed) == (m.rho, m.seed)
