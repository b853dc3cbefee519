"""End-to-end pipelines behind each run mode.

Every pipeline writes into ``paths.out``: a JSON summary plus the mode's
artifacts (checkpoints, loss logs, predictions, image grids). All randomness
comes from the config seed, so a rerun of the same file reproduces every
artifact byte for byte at a fixed thread count.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import complexity as CX
from . import finetune as F
from . import lgi_former as E
from . import pretrain as PT
from . import training as TR
from .checkpoint import check_config, load_checkpoint, load_encoder, save_checkpoint, verify_shapes
from .config import RunConfig
from .errors import ConfigError, EmptyInput
from .masking import sample_tube_mask
from .synthetic import generate_synthetic
from .tensorio import load_tensor, load_video, write_ppm

log = logging.getLogger(__name__)

PRETRAIN_CKPT = "pretrain.mmck"
FINETUNE_CKPT = "finetune.mmck"


def _out_dir(rc: RunConfig) -> Path:
    out = rc.path("out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data


def _remap(labels: np.ndarray, classes) -> np.ndarray:
    lut = {c: i for i, c in enumerate(classes)}
    return np.array([lut[int(v)] for v in labels], np.int64)


def load_data(rc: RunConfig) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Clips [n, T, H, W, 3], labels [n] (or None) and sample ids."""
    d = rc.data
    if d.synthetic is not None:
        clips, labels = generate_synthetic(d.synthetic, rc.data_seed, d.n, d.classes)
        if d.classes is not None:
            labels = _remap(labels, d.classes)
        return clips, labels, [f"syn{i:05d}" for i in range(len(clips))]
    if d.clips is not None:
        clips = load_tensor(d.clips)
        if clips.ndim != 5 or clips.shape[-1] != 3:
            raise ConfigError(f"data.clips: expected [n, T, H, W, 3], got {clips.shape}")
        labels = load_tensor(d.labels).astype(np.int64) if d.labels else None
        if labels is not None and labels.shape != (len(clips),):
            raise ConfigError(f"data.labels: expected [{len(clips)}], got {labels.shape}")
        if d.classes is not None and labels is not None:
            keep = np.isin(labels, d.classes)
            clips, labels = clips[keep], _remap(labels[keep], d.classes)
        if d.n:
            clips = clips[:d.n]
            labels = None if labels is None else labels[:d.n]
        return clips.astype(np.float32), labels, [f"clip{i:05d}" for i in range(len(clips))]
    raise ConfigError("data: give data.synthetic (with data.n) or data.clips")


def load_videos(rc: RunConfig) -> tuple[list[np.ndarray], np.ndarray, list[str]]:
    """Videos from ``data.videos`` with labels from a ``name,label`` CSV in ``data.labels``."""
    root = Path(rc.data.videos)
    if not rc.data.labels:
        raise ConfigError("data.labels (a CSV of name,label) is required with data.videos")
    with open(rc.data.labels, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][:2] == ["name", "label"]:
        rows = rows[1:]
    videos, labels, ids = [], [], []
    for name, label in ((r[0], r[1]) for r in rows):
        videos.append(load_video(root / name))
        labels.append(int(label))
        ids.append(name)
    labels = np.array(labels, np.int64)
    if rc.data.classes is not None:
        keep = np.isin(labels, rc.data.classes)
        videos = [v for v, k in zip(videos, keep) if k]
        ids = [i for i, k in zip(ids, keep) if k]
        labels = _remap(labels[keep], rc.data.classes)
    return videos, labels, ids


def _check_clip_shape(cfg: E.EncoderConfig, clips: np.ndarray) -> None:
    want = tuple(g * c for g, c in zip(cfg.grid, cfg.cube))
    if tuple(clips.shape[1:4]) != want:
        raise ConfigError(f"clips are {clips.shape[1:4]} but the model grid {cfg.grid} with cube "
                          f"{cfg.cube} expects {want}")


def _num_classes(rc: RunConfig, labels) -> int:
    if rc.num_classes is not None:
        return rc.num_classes
    if rc.data.classes is not None:
        return len(rc.data.classes)
    if rc.data.synthetic is not None:
        return rc.data.synthetic.num_classes
    return int(labels.max()) + 1


# --------------------------------------------------------------------------
# pretrain


def pretrain_meta(rc: RunConfig, epoch: int, opt: PT.AdamW) -> dict:
    return {
        "kind": "pretrain", "encoder": rc.encoder.to_dict(), "decoder": asdict(rc.decoder),
        "epoch": epoch, "opt_step": opt.step_count, "rho": rc.rho, "lambda": rc.lam,
        "seed": rc.seed, "norm": rc.train.norm, "epochs": rc.train.epochs,
    }


def run_pretrain(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    clips, _, _ = load_data(rc)
    _check_clip_shape(rc.encoder, clips)
    params = opt = None
    start = 0
    if "init" in rc.paths:
        tensors, meta = load_checkpoint(rc.paths["init"])
        if meta.get("kind") != "pretrain":
            raise ConfigError(f"{rc.paths['init']}: cannot resume from a {meta.get('kind')!r} checkpoint")
        check_config(meta, rc.encoder)
        params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
        expected = PT.init_pretrain_params(rc.encoder, rc.decoder, 0)
        verify_shapes(params, {k: v.shape for k, v in expected.items()}, rc.paths["init"])
        opt = PT.AdamW(betas=(0.9, 0.95), weight_decay=0.05)
        opt.load_state_tensors(tensors, meta["opt_step"])
        start = int(meta["epoch"])
        log.info("resuming from epoch %d", start)
    log_path = Path(rc.paths.get("log", out / "pretrain_log.jsonl"))
    ckpt = out / PRETRAIN_CKPT

    def save(epoch, p, o, means):
        save_checkpoint(ckpt, p | o.state_tensors(), pretrain_meta(rc, epoch + 1, o))

    with open(log_path, "a" if start else "w") as fh:
        params, opt, means = TR.pretrain_run(
            rc.encoder, rc.decoder, clips, rho=rc.rho, lam=rc.lam, seed=rc.seed,
            epochs=rc.train.epochs, batch_size=rc.train.batch_size, base_lr=rc.train.lr,
            warmup_epochs=rc.train.warmup_epochs, norm=rc.train.norm, params=params, opt=opt,
            start_epoch=start, log_fh=fh, on_epoch=save)
    summary = {"mode": "pretrain", "epoch_means": means, "checkpoint": str(ckpt),
               "log": str(log_path), "start_epoch": start, "steps": opt.step_count}
    _write_json(out / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# finetune / eval


def run_finetune(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    clips, labels, _ = load_data(rc)
    if labels is None:
        raise ConfigError("finetune needs labels (synthetic data or data.labels)")
    if len(clips) == 0:
        raise EmptyInput("no clips to fine-tune on")
    _check_clip_shape(rc.encoder, clips)
    if "init" in rc.paths:
        enc, _, _ = load_encoder(rc.paths["init"], rc.encoder)
    else:
        log.warning("no paths.init given; fine-tuning from a random encoder")
        enc = E.init_encoder(rc.encoder, np.random.default_rng(rc.seed))
    k = _num_classes(rc, labels)
    with open(out / "finetune_log.jsonl", "w") as fh:
        params, losses, accs = TR.finetune_run(
            rc.encoder, enc, clips, labels, k, seed=rc.seed, epochs=rc.train.epochs,
            batch_size=rc.train.batch_size, base_lr=rc.train.lr, warmup_epochs=rc.train.warmup_epochs,
            train_encoder=rc.train.train_encoder, log_fh=fh)
    ckpt = out / FINETUNE_CKPT
    meta = {"kind": "finetune", "encoder": rc.encoder.to_dict(), "num_classes": k, "seed": rc.seed,
            "train_encoder": rc.train.train_encoder}
    save_checkpoint(ckpt, params, meta)
    summary = {"mode": "finetune", "epoch_losses": losses, "epoch_accuracies": accs, "checkpoint": str(ckpt)}
    _write_json(out / "summary.json", summary)
    return summary


def load_classifier(path) -> tuple[dict, E.EncoderConfig, int]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "finetune":
        raise ConfigError(f"{path}: eval needs a fine-tuned checkpoint, got {meta.get('kind')!r}")
    cfg = E.EncoderConfig.from_dict(meta["encoder"])
    k = int(meta["num_classes"])
    expected = {"encoder." + n: s for n, s in E.encoder_shapes(cfg).items()}
    expected |= {"head." + n: v.shape for n, v in F.init_head(cfg.dim, k).items()}
    verify_shapes(tensors, expected, str(path))
    return tensors, cfg, k


def run_eval(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    params, cfg, k = load_classifier(rc.path("checkpoint"))
    if rc.data.videos is not None:
        videos, labels, ids = load_videos(rc)
    else:
        clips, labels, ids = load_data(rc)
        if labels is None:
            raise ConfigError("eval needs labels")
        videos = list(clips)
    num_frames = cfg.grid[0] * cfg.cube[0]
    scores = np.stack([F.infer_video(v, cfg, params, num_frames, rc.train.stride, rc.train.num_clips)
                       for v in videos]) if videos else np.zeros((0, k))
    preds = scores.argmax(-1) if len(scores) else np.zeros(0, np.int64)
    report = F.compute_metrics(preds, labels, k)
    F.write_predictions_csv(out / "predictions.csv", ids, labels, preds, scores)
    summary = {"mode": "eval", "n": len(videos)} | report.to_dict()
    _write_json(out / "metrics.json", summary)
    return summary


# --------------------------------------------------------------------------
# flops


def flops_report(cfg: E.EncoderConfig, rho=None, decoder=None, convention="mac",
                 num_classes=None) -> CX.CostReport:
    return CX.count_flops(cfg, rho, decoder, convention, num_classes)


def run_flops(rc: RunConfig) -> dict:
    with_dec = rc.rho is not None and rc.mode == "flops" and rc.raw.get("decoder") is not None
    rep = flops_report(rc.encoder, rc.rho, rc.decoder if with_dec else None, num_classes=rc.num_classes)
    d = rep.to_dict()
    if "out" in rc.paths:
        _write_json(_out_dir(rc) / "flops.json", d)
    return d


# --------------------------------------------------------------------------
# reconstruct


def _masked_view(frames, mask, cube, fill=0.5):
    vis = mask.visible
    for ax, c in enumerate(cube):
        vis = np.repeat(vis, c, axis=ax)
    return np.where(vis[..., None], frames, fill)


def image_grid(rows: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Tile ``rows`` (each [T, H, W, 3]) into one image, one row per array."""
    T, H, W, _ = rows[0].shape
    img = np.ones((len(rows) * H + (len(rows) - 1) * gap, T * W + (T - 1) * gap, 3))
    for r, frames in enumerate(rows):
        for t in range(T):
            y, x = r * (H + gap), t * (W + gap)
            img[y:y + H, x:x + W] = np.clip(frames[t], 0.0, 1.0)
    return img


def run_reconstruct(rc: RunConfig) -> dict:
    out = _out_dir(rc)
    path = rc.path("checkpoint")
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise ConfigError(f"{path}: reconstruct needs a pre-training checkpoint (with decoder)")
    cfg = E.EncoderConfig.from_dict(meta["encoder"])
    dec = PT.DecoderConfig(**meta["decoder"])
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    clips, _, _ = load_data(rc)
    _check_clip_shape(cfg, clips)
    norm = meta.get("norm", "per_cube")
    files, errors = [], []
    for i, clip in enumerate(clips):
        mask = sample_tube_mask(cfg.partition, rc.rho, TR.mask_seed(rc.seed, 0, i))
        batch = PT.make_batch([clip], [mask], cfg, norm, params["encoder.embed.w"].dtype)
        report, cache = PT.pretrain_forward(cfg, dec, params, batch, meta.get("lambda") or 0.5)
        recon = PT.stitch_reconstruction(cache["app"][0], cache["mot"][0], batch.targets[0], mask,
                                         fill_visible=True)
        grid = image_grid([clip, _masked_view(clip, mask, cfg.cube), recon])
        name = out / f"recon_{i:04d}.ppm"
        write_ppm(name, grid)
        files.append(str(name))
        errors.append(float(np.mean((recon - clip) ** 2)))
    summary = {"mode": "reconstruct", "rho": rc.rho, "files": files, "pixel_mse": errors,
               "layout": "rows: original, masked, reconstructed; columns: frames"}
    _write_json(out / "summary.json", summary)
    return summary


RUNNERS = {
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "eval": run_eval,
    "flops": run_flops,
    "reconstruct": run_reconstruct,
}


def run(rc: RunConfig) -> dict:
    log.info("running %s (seed %d, pid %d)", rc.mode, rc.seed, os.getpid())
    return RUNNERS[rc.mode](rc)
