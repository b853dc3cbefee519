"""Epoch loops for pre-training and fine-tuning.

All randomness derives from the run seed: the data order of each epoch and
the tube mask of every sample at every step come from seed sequences keyed
by ``(seed, epoch)`` and ``(seed, step, sample)``.
"""
from __future__ import annotations

import json
import logging
import math

import numpy as np

from . import finetune as F
from . import lgi_former as E
from . import pretrain as PT
from .masking import sample_tube_mask
from .tokenizer import model_input

log = logging.getLogger(__name__)


def mask_seed(seed: int, step: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, step, index]).generate_state(1)[0])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def _batches(order, batch_size, drop_last):
    stop = len(order) - (len(order) % batch_size if drop_last else 0)
    for i in range(0, stop, batch_size):
        yield order[i:i + batch_size]


def pretrain_run(enc_cfg: E.EncoderConfig, dec: PT.DecoderConfig, clips: np.ndarray, *, rho: float,
                 lam: float, seed: int, epochs: int, batch_size: int, base_lr: float = 3e-4,
                 warmup_epochs: int = 1, norm: str = "per_cube", params: dict | None = None,
                 opt: PT.AdamW | None = None, start_epoch: int = 0, log_fh=None, dtype=np.float32,
                 on_epoch=None):
    """Pre-train on ``clips`` [n, T, H, W, 3]. Returns ``(params, opt, epoch_means)``.

    ``on_epoch(epoch, params, opt, means)`` runs after every epoch, e.g. to
    checkpoint. Resuming with ``start_epoch`` and the saved optimizer
    reproduces an uninterrupted run exactly.
    """
    n = len(clips)
    params = params if params is not None else PT.init_pretrain_params(enc_cfg, dec, seed, dtype)
    opt = opt if opt is not None else PT.AdamW(betas=(0.9, 0.95), weight_decay=0.05)
    steps_per_epoch = n // batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"{n} clips are fewer than one batch of {batch_size}")
    sched = PT.CosineSchedule(base_lr, batch_size, epochs * steps_per_epoch, warmup_epochs * steps_per_epoch)
    part = enc_cfg.partition
    means = []
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, epochs):
        totals = []
        for idx in _batches(epoch_order(seed, epoch, n), batch_size, drop_last=True):
            masks = [sample_tube_mask(part, rho, mask_seed(seed, step, j)) for j in range(len(idx))]
            batch = PT.make_batch(clips[idx], masks, enc_cfg, norm, dtype)
            report, lr = PT.pretrain_step(enc_cfg, dec, params, opt, sched, step, batch, lam)
            totals.append(report.total)
            if log_fh is not None:
                log_fh.write(json.dumps({
                    "step": step, "epoch": epoch, "lr": lr, "total": report.total,
                    "appearance": report.appearance_mse, "motion": report.motion_mse,
                }) + "\n")
            step += 1
        means.append(float(np.mean(totals)))
        log.info("pretrain epoch %d: mean loss %.5f", epoch, means[-1])
        if on_epoch is not None:
            on_epoch(epoch, params, opt, means)
    return params, opt, means


def encoder_params_of(params: dict) -> dict:
    return PT.subparams(params, "encoder.")


def extract_features(cfg: E.EncoderConfig, params: dict, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Pooled encoder features [n, C] at full (unmasked) sequence length."""
    if "encoder.embed.w" not in params:
        params = {"encoder." + k: v for k, v in params.items()}
    dtype = params["encoder.embed.w"].dtype
    out = []
    for i in range(0, len(clips), batch_size):
        patches = model_input(clips[i:i + batch_size], cfg.cube, dtype)
        pooled, _ = F.features_forward(cfg, params, patches)
        out.append(pooled)
    return np.concatenate(out)


def finetune_run(cfg: E.EncoderConfig, encoder_params: dict, clips: np.ndarray, labels: np.ndarray,
                 num_classes: int, *, seed: int, epochs: int, batch_size: int, base_lr: float = 1e-3,
                 warmup_epochs: int = 1, train_encoder: bool = True, log_fh=None):
    """Cross-entropy fine-tuning. Returns ``(params, epoch_losses, epoch_accuracies)``."""
    params = F.finetune_params(encoder_params, cfg, num_classes)
    opt = F.finetune_optimizer()
    n = len(clips)
    steps_per_epoch = math.ceil(n / batch_size)
    sched = PT.CosineSchedule(base_lr, batch_size, epochs * steps_per_epoch, warmup_epochs * steps_per_epoch)
    dtype = params["encoder.embed.w"].dtype
    patches_all = model_input(clips, cfg.cube, dtype)
    losses, accs = [], []
    step = 0
    for epoch in range(epochs):
        el, ea, count = 0.0, 0.0, 0
        for idx in _batches(epoch_order(seed, epoch, n), batch_size, drop_last=False):
            loss, acc, lr = F.finetune_step(cfg, params, opt, sched, step, patches_all[idx], labels[idx], train_encoder)
            el += loss * len(idx)
            ea += acc * len(idx)
            count += len(idx)
            if log_fh is not None:
                log_fh.write(json.dumps({"step": step, "epoch": epoch, "lr": lr, "loss": loss, "acc": acc}) + "\n")
            step += 1
        losses.append(el / count)
        accs.append(ea / count)
        log.info("finetune epoch %d: loss %.4f acc %.3f", epoch, losses[-1], accs[-1])
    return params, losses, accs


def predict_labels(cfg: E.EncoderConfig, params: dict, clips: np.ndarray, batch_size: int = 64):
    dtype = params["encoder.embed.w"].dtype
    scores = []
    for i in range(0, len(clips), batch_size):
        patches = model_input(clips[i:i + batch_size], cfg.cube, dtype)
        logits, _ = F.classify_forward(cfg, params, patches)
        scores.append(F.softmax_scores(logits))
    scores = np.concatenate(scores)
    return scores.argmax(-1), scores
