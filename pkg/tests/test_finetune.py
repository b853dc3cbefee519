import logging

import numpy as np
import pytest

from motionmae import finetune as F
from motionmae import lgi_former as E
from motionmae import pretrain as PT
from motionmae.acceptance import oracle_metrics
from motionmae.errors import EmptyInput, LabelOutOfRange, OutOfRange, ShapeMismatch
from motionmae.gradcheck import check_grads
from motionmae.synthetic import SyntheticSpec, generate_synthetic
from motionmae.tokenizer import model_input

CFG = E.EncoderConfig(depth=1, dim=16, heads=2, grid=(2, 2, 2), region=(1, 2, 2), cube=(2, 4, 4))


def _params(num_classes=3, seed=0, dtype=np.float64):
    enc = E.init_encoder(CFG, np.random.default_rng(seed), dtype)
    return F.finetune_params(enc, CFG, num_classes)


def test_hand_case():
    r = F.compute_metrics([0, 0, 0, 0], [0, 0, 0, 1], 2)
    assert r.war == 0.75 and r.uar == 0.5
    assert r.confusion.tolist() == [[3, 0], [1, 0]]


def test_perfect_predictions():
    y = [0, 1, 2, 2, 1]
    r = F.compute_metrics(y, y, 3)
    assert r.uar == r.war == 1.0


def test_metrics_match_oracle(caplog):
    rng = np.random.default_rng(0)
    caplog.set_level(logging.ERROR, logger="motionmae.finetune")
    for _ in range(200):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 60))
        p, g = rng.integers(0, k, n), rng.integers(0, k, n)
        r = F.compute_metrics(p, g, k)
        assert (r.uar, r.war) == oracle_metrics(p, g, k)
        assert r.confusion.sum(axis=1).tolist() == np.bincount(g, minlength=k).tolist()


def test_missing_class_excluded_with_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="motionmae.finetune"):
        r = F.compute_metrics([0, 1, 1], [0, 1, 1], 3)
    assert r.uar == 1.0 and np.isnan(r.per_class_accuracy[2])
    assert "no gold samples" in caplog.text


def test_war_invariant_to_relabeling():
    rng = np.random.default_rng(1)
    p, g = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
    perm = rng.permutation(4)
    a, b = F.compute_metrics(p, g, 4), F.compute_metrics(perm[p], perm[g], 4)
    assert a.war == b.war and a.uar == pytest.approx(b.uar)


def test_metric_errors():
    with pytest.raises(EmptyInput):
        F.compute_metrics([], [], 2)
    with pytest.raises(ShapeMismatch):
        F.compute_metrics([0], [0, 1], 2)
    with pytest.raises(LabelOutOfRange):
        F.compute_metrics([0, 2], [0, 1], 2)


def test_head_starts_at_zero_and_needs_two_classes():
    p = _params(3)
    assert not p["head.w"].any() and not p["head.b"].any()
    with pytest.raises(ValueError):
        F.init_head(16, 1)


def test_cross_entropy_labels_checked():
    with pytest.raises(LabelOutOfRange):
        F.cross_entropy(np.zeros((2, 3)), [0, 3])


def test_classifier_gradients():
    params = _params(3)
    rng = np.random.default_rng(2)
    for k in params:
        params[k] = rng.normal(scale=0.3, size=params[k].shape) + (1.0 if k.endswith("gamma") else 0.0)
    patches = rng.normal(size=(3, CFG.partition.K, CFG.patch_values))
    labels = np.array([0, 2, 1])
    logits, cache = F.classify_forward(CFG, params, patches)
    _, dlogits = F.cross_entropy(logits, labels)
    grads = F.classify_backward(CFG, dlogits, cache)
    f = lambda: F.cross_entropy(F.classify_forward(CFG, params, patches)[0], labels)[0]
    errs = check_grads(f, {k: params[k] for k in grads}, grads, rng, per_tensor=4, h=1e-5)
    assert max(errs.values()) < 1e-4


def test_frozen_encoder_leaves_encoder_untouched():
    params = _params(2)
    before = {k: v.copy() for k, v in params.items()}
    patches = np.random.default_rng(3).normal(size=(4, CFG.partition.K, CFG.patch_values))
    sched = PT.CosineSchedule(1e-2, 256, 10)
    F.finetune_step(CFG, params, F.finetune_optimizer(), sched, 1, patches, [0, 1, 0, 1], train_encoder=False)
    assert all(np.array_equal(before[k], params[k]) for k in params if k.startswith("encoder."))
    assert not np.array_equal(before["head.w"], params["head.w"])


def test_linear_head_separates_constructed_features():
    rng = np.random.default_rng(4)
    # the head normalises each vector first, so build clusters that stay apart after that
    labels = np.arange(64) % 2
    mu = rng.normal(size=16)
    feats = np.where(labels[:, None] == 1, mu, -mu) + 0.3 * rng.normal(size=(64, 16))
    head = F.E._prefixed("head.", F.init_head(16, 2, np.float64))
    opt = F.finetune_optimizer()
    for _ in range(300):
        logits, (c_ln, c_lin) = F.head_forward(head, feats)
        _, d = F.cross_entropy(logits, labels)
        dy, g_lin = F.P.linear_backward(d, c_lin)
        _, g_ln = F.P.layer_norm_backward(dy, c_ln)
        grads = {"head." + k: v for k, v in g_lin.items()} | {"head.norm." + k: v for k, v in g_ln.items()}
        opt.step(head, grads, 1e-2)
    logits, _ = F.head_forward(head, feats)
    assert (logits.argmax(-1) == labels).mean() == 1.0


def test_single_sample_overfit():
    params = _params(3, dtype=np.float64)
    clip = np.random.default_rng(5).random((1, 4, 8, 8, 3))
    patches = model_input(clip, CFG.cube, np.float64)
    opt = F.finetune_optimizer()
    sched = PT.CosineSchedule(1e-1, 256, 200)
    for step in range(200):
        loss, _, _ = F.finetune_step(CFG, params, opt, sched, step, patches, [2])
    assert loss < 0.01


def test_warmup_starts_at_zero():
    sched = PT.CosineSchedule(1e-3, 64, 100, warmup_steps=5)
    assert sched(0) == 0.0


def test_infer_video_averages_clip_scores():
    params = _params(3)
    rng = np.random.default_rng(6)
    for k in ("head.w", "head.b"):
        params[k] = rng.normal(size=params[k].shape)
    video = rng.random((12, 8, 8, 3))
    one = F.infer_video(video, CFG, params, num_frames=4, stride=2, num_clips=1)
    assert one.shape == (3,) and one.sum() == pytest.approx(1.0)
    # offsets 0 and 5 for a span of 7 in 12 frames
    assert F.clip_offsets(12, 7, 2) == [0, 5]
    two = F.infer_video(video, CFG, params, 4, 2, num_clips=2)
    s = [F.softmax_scores(F.classify_forward(CFG, params, model_input(video[o:o + 7:2][None], CFG.cube, np.float64))[0])[0]
         for o in (0, 5)]
    assert np.allclose(two, (s[0] + s[1]) / 2)


def test_infer_video_identical_clips():
    params = _params(3)
    params["head.w"] = np.random.default_rng(7).normal(size=params["head.w"].shape)
    frame = np.random.default_rng(8).random((1, 8, 8, 3))
    video = np.repeat(frame, 10, axis=0)
    a = F.infer_video(video, CFG, params, 4, 1, num_clips=1)
    b = F.infer_video(video, CFG, params, 4, 1, num_clips=3)
    assert np.allclose(a, b, atol=1e-12)


def test_infer_video_too_short():
    with pytest.raises(OutOfRange):
        F.infer_video(np.zeros((3, 8, 8, 3)), CFG, _params(3), 4, 1)


def test_predictions_csv_round_trip(tmp_path):
    path = tmp_path / "p.csv"
    scores = np.array([[0.25, 0.75], [0.6, 0.4]])
    F.write_predictions_csv(path, ["a", "b"], [1, 0], [1, 0], scores)
    ids, g, p, s = F.read_predictions_csv(path)
    assert ids == ["a", "b"] and g.tolist() == [1, 0] and np.array_equal(s, scores)


def test_empty_synthetic_set_fails_eval():
    clips, labels = generate_synthetic(SyntheticSpec(), 0, 0)
    assert clips.shape[0] == 0
    with pytest.raises(EmptyInput):
        F.compute_metrics(np.zeros(0, int), labels, 4)
