import numpy as np
import pytest

from motionmae import synthetic as S


def test_seeded_generation_is_byte_identical():
    spec = S.SyntheticSpec()
    a, la = S.generate_synthetic(spec, 3, 12)
    b, lb = S.generate_synthetic(spec, 3, 12)
    assert a.tobytes() == b.tobytes() and np.array_equal(la, lb)
    c, _ = S.generate_synthetic(spec, 4, 12)
    assert a.tobytes() != c.tobytes()


def test_shapes_and_balanced_labels():
    spec = S.SyntheticSpec()
    clips, labels = S.generate_synthetic(spec, 0, 10)
    assert clips.shape == (10, 8, 32, 32, 3) and clips.dtype == np.float32
    assert labels.tolist() == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
    _, sub = S.generate_synthetic(spec, 0, 4, classes=(1, 3))
    assert sub.tolist() == [1, 3, 1, 3]


def test_empty_dataset():
    clips, labels = S.generate_synthetic(S.SyntheticSpec(), 0, 0)
    assert clips.shape == (0, 8, 32, 32, 3) and labels.shape == (0,)


@pytest.mark.parametrize("tile", [0, 8])
def test_motion_only_pair_statistics(tile):
    spec = S.SyntheticSpec(noise=0.0, tile=tile)
    clips, labels = S.generate_synthetic(spec, 0, 200, classes=spec.motion_pair)
    st = S.pair_statistics(clips, labels, spec.motion_pair)
    assert st["mean_gap"] < 1e-3 and st["var_gap"] < 1e-3
    assert st["energy_ratio"] > 10


def test_pair_statistics_with_default_noise():
    spec = S.SyntheticSpec()
    clips, labels = S.generate_synthetic(spec, 1, 200, classes=spec.motion_pair)
    st = S.pair_statistics(clips, labels, spec.motion_pair)
    assert st["mean_gap"] < 1e-3 and st["var_gap"] < 1e-3 and st["energy_ratio"] > 10


def test_static_class_has_no_motion():
    spec = S.SyntheticSpec(noise=0.0)
    clips, _ = S.generate_synthetic(spec, 0, 1, classes=(0,))
    assert np.array_equal(clips[0, 0], clips[0, -1])


def test_moving_class_is_a_circular_shift():
    spec = S.SyntheticSpec(noise=0.0)
    clips, _ = S.generate_synthetic(spec, 0, 1, classes=(1,))
    f0, f1 = clips[0, 0], clips[0, 1]
    shifts = [np.array_equal(np.roll(f0, s, axis=a), f1) for a in (0, 1) for s in (1, -1)]
    assert sum(shifts) == 1


def test_tiled_texture_is_periodic():
    spec = S.SyntheticSpec(noise=0.0, tile=8)
    clips, _ = S.generate_synthetic(spec, 0, 2)
    f = clips[0, 0]
    assert np.array_equal(f[:8, :8], f[8:16, 16:24])


def test_texture_is_standardised():
    rng = np.random.default_rng(0)
    for kind in S.TEXTURES:
        t = S.make_texture(kind, 16, rng)
        assert np.allclose(t.mean(axis=(0, 1)), S.TEX_MEAN)
        assert np.allclose(t.std(axis=(0, 1)), S.TEX_STD)
    with pytest.raises(ValueError):
        S.make_texture("plaid", 16, rng)


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        S.SyntheticSpec(motion_pair=(0, 2))
    with pytest.raises(ValueError):
        S.SyntheticSpec(tile=7)
    with pytest.raises(ValueError):
        S.ClassSpec("blobs", -1)
    spec = S.SyntheticSpec(noise=0.0, tile=8)
    assert S.SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_pair_statistics_without_motion():
    spec = S.SyntheticSpec(noise=0.0)
    clips, labels = S.generate_synthetic(spec, 0, 4, classes=(0, 2))
    st = S.pair_statistics(clips, labels, (0, 2))
    assert st["energy_ratio"] == float("inf")
