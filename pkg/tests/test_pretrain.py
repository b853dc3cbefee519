import math

import numpy as np
import pytest

from motionmae import lgi_former as E
from motionmae import pretrain as PT
from motionmae.acceptance import _oracle_mse, end_to_end_check, tiny_test_setup
from motionmae.errors import ShapeMismatch
from motionmae.masking import full_mask, sample_tube_mask
from motionmae.tokenizer import VideoClip, build_targets, target_tokens


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_total_is_exact_convex_combination(lam):
    cfg, dec, params, batch, _ = tiny_test_setup(1, batch=2)
    rep, _ = PT.pretrain_forward(cfg, dec, params, batch, lam)
    assert rep.total == lam * rep.appearance_mse + (1 - lam) * rep.motion_mse
    assert rep.lam == lam


def test_lambda_out_of_range():
    cfg, dec, params, batch, _ = tiny_test_setup(0)
    with pytest.raises(ValueError):
        PT.pretrain_forward(cfg, dec, params, batch, 1.5)


def test_branch_losses_match_counting_loop():
    cfg, dec, params, batch, _ = tiny_test_setup(2, batch=3)
    rep, cache = PT.pretrain_forward(cfg, dec, params, batch, 0.5)
    assert math.isclose(rep.appearance_mse, _oracle_mse(cache["app"], batch.app, batch.masked), rel_tol=1e-12)
    assert math.isclose(rep.motion_mse, _oracle_mse(cache["mot"], batch.mot, batch.masked), rel_tol=1e-12)


def test_visible_targets_do_not_matter():
    cfg, dec, params, batch, _ = tiny_test_setup(3)
    r0, c0 = PT.pretrain_forward(cfg, dec, params, batch, 0.5)
    g0 = PT.pretrain_backward(cfg, dec, batch, c0)
    vis = ~batch.masked
    batch.app[vis] = 123.0
    batch.mot[vis] = -7.0
    r1, c1 = PT.pretrain_forward(cfg, dec, params, batch, 0.5)
    g1 = PT.pretrain_backward(cfg, dec, batch, c1)
    assert r1.total == r0.total
    assert all(np.array_equal(g0[k], g1[k]) for k in g0)


def test_end_to_end_gradients():
    errs = end_to_end_check(0)
    assert max(errs.values()) < 1e-4
    assert any(k.startswith("encoder.") for k in errs) and any(k.startswith("decoder.") for k in errs)


def test_masked_mse_with_tube_mask():
    part = E.EncoderConfig(depth=1, dim=8, heads=2, grid=(2, 2, 2), region=(1, 2, 2)).partition
    m = sample_tube_mask(part, 0.5, 0)
    pred = np.zeros((8, 3))
    tgt = np.ones((8, 3))
    tgt[m.visible.ravel()] = 100.0
    assert PT.masked_mse(pred, tgt, m) == 1.0
    assert PT.masked_mse(pred, tgt, full_mask(part)) == 0.0
    with pytest.raises(ShapeMismatch):
        PT.masked_mse(pred, tgt[:4], m)


def test_decode_shapes_and_zero_depth():
    cfg = E.EncoderConfig(depth=1, dim=16, heads=2, grid=(2, 2, 2), region=(1, 2, 2), cube=(2, 4, 4))
    for depth in (0, 1):
        dec = PT.DecoderConfig(depth=depth, dim=8, heads=2)
        params = PT.init_pretrain_params(cfg, dec, 0, np.float64)
        m = sample_tube_mask(cfg.partition, 0.5, 0)
        enc = np.random.default_rng(0).normal(size=(m.num_visible, cfg.dim))
        out = PT.decode(enc, m, params, cfg, dec)
        assert out.shape == (cfg.partition.K, dec.dim)
        app, mot, _ = PT.predict(out, params)
        assert app.shape == mot.shape == (cfg.partition.K, PT.head_dim(cfg))
        with pytest.raises(ShapeMismatch):
            PT.decode(enc[:-1], m, params, cfg, dec)


def test_pretrain_loss_single_clip():
    cfg, dec, params, batch, _ = tiny_test_setup(4, batch=1)
    clip = VideoClip(np.random.default_rng(0).random((4, 8, 8, 3)))
    m = sample_tube_mask(cfg.partition, 0.5, 0)
    rep = PT.pretrain_loss(clip, m, params, cfg, dec, 0.25)
    assert rep.total > 0 and np.isfinite(rep.total)


def test_weight_decay_exclusions():
    assert PT.decays("encoder.blocks.0.attn.wq", np.zeros((2, 2)))
    assert not PT.decays("encoder.blocks.0.attn.bq", np.zeros(2))
    assert not PT.decays("encoder.reps", np.zeros((2, 2)))
    assert not PT.decays("decoder.mask_token", np.zeros((1, 2)))


def test_adamw_first_step_and_decay():
    opt = PT.AdamW(weight_decay=0.1)
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    grads = {"w": np.full((2, 2), 3.0), "b": np.full(2, -2.0)}
    opt.step(params, grads, lr=0.01)
    # bias-corrected first step moves each entry by lr * sign(g)
    assert np.allclose(params["w"], 1 - 0.01 * 0.1 - 0.01, atol=1e-9)
    assert np.allclose(params["b"], 1 + 0.01, atol=1e-9)
    state = opt.state_tensors()
    other = PT.AdamW(weight_decay=0.1)
    other.load_state_tensors(state, opt.step_count)
    p2 = {k: v.copy() for k, v in params.items()}
    opt.step(params, grads, 0.01)
    other.step(p2, grads, 0.01)
    assert all(np.array_equal(params[k], p2[k]) for k in params)


def test_adamw_missing_grad_is_zero():
    opt = PT.AdamW(weight_decay=0.0)
    params = {"w": np.ones((2, 2))}
    opt.step(params, {}, 0.1)
    assert np.array_equal(params["w"], np.ones((2, 2)))


def test_cosine_schedule():
    s = PT.CosineSchedule(base_lr=1.5e-4, batch_size=512, total_steps=100, warmup_steps=10)
    assert s.peak_lr == pytest.approx(3e-4)
    assert s(0) == 0.0
    assert s(5) == pytest.approx(1.5e-4)
    assert s(10) == pytest.approx(3e-4)
    assert s(55) == pytest.approx(1.5e-4)
    assert s(100) == pytest.approx(0.0, abs=1e-15)
    lrs = [s(t) for t in range(10, 101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_one_step_lowers_loss():
    cfg, dec, params, batch, lam = tiny_test_setup(5, batch=2)
    params = PT.init_pretrain_params(cfg, dec, 0, np.float64)
    opt = PT.AdamW()
    sched = PT.CosineSchedule(1e-1, 256, 100)
    first, _ = PT.pretrain_step(cfg, dec, params, opt, sched, 0, batch, 0.5)
    for step in range(1, 20):
        last, _ = PT.pretrain_step(cfg, dec, params, opt, sched, step, batch, 0.5)
    assert last.total < first.total


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_stitching_identity_raw(dtype):
    f = np.random.default_rng(7).random((8, 16, 16, 3)).astype(dtype)
    t = build_targets(VideoClip(f), patch=8)
    out = PT.stitch_reconstruction(target_tokens(t.appearance, 8), target_tokens(t.motion, 8), t)
    assert np.array_equal(out, f)


def test_stitching_fill_visible():
    cfg = E.EncoderConfig(depth=1, dim=8, heads=2, grid=(2, 2, 2), region=(1, 2, 2), cube=(2, 8, 8))
    f = np.random.default_rng(8).random((4, 16, 16, 3))
    t = build_targets(VideoClip(f), patch=8)
    m = sample_tube_mask(cfg.partition, 0.5, 1)
    zeros = np.zeros((cfg.partition.K, 8 * 8 * 3))
    out = PT.stitch_reconstruction(zeros, zeros, t, m, fill_visible=True)
    vis = np.repeat(np.repeat(m.visible, 8, axis=1), 8, axis=2)
    even = out[0::2]
    assert np.allclose(even[vis], f[0::2][vis])
    assert np.all(even[~vis] == 0)
