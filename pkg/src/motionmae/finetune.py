"""Classification fine-tuning, multi-clip inference and recall metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import lgi_former as E
from . import primitives as P
from .errors import EmptyInput, LabelOutOfRange, OutOfRange, ShapeMismatch
from .pretrain import AdamW, CosineSchedule, subparams
from .tokenizer import model_input, sample_clip

log = logging.getLogger(__name__)


def init_head(C: int, num_classes: int, dtype=np.float32) -> dict[str, np.ndarray]:
    if num_classes < 2:
        raise ValueError("a classifier needs at least two classes")
    out = E._prefixed("norm.", P.init_ln(C, dtype))
    out["w"] = np.zeros((C, num_classes), dtype)
    out["b"] = np.zeros(num_classes, dtype)
    return out


def finetune_params(encoder_params: dict, cfg: E.EncoderConfig, num_classes: int) -> dict:
    """Encoder weights (copied) plus a fresh zero-initialised head."""
    dtype = encoder_params["embed.w"].dtype
    out = {"encoder." + k: v.copy() for k, v in encoder_params.items()}
    return out | E._prefixed("head.", init_head(cfg.dim, num_classes, dtype))


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def features_forward(cfg: E.EncoderConfig, params: dict, patches):
    ep = subparams(params, "encoder.")
    X, c_embed = E.embed_forward(cfg, ep, patches)
    X, S, c_blocks = E.blocks_forward(cfg, ep, X)
    pooled = E.pool_forward(X, S, cfg.pool)
    return pooled, {"embed": c_embed, "blocks": c_blocks, "X_shape": X.shape,
                    "S_shape": None if S is None else S.shape}


def head_forward(params: dict, pooled):
    hp = subparams(params, "head.")
    y, c_ln = P.layer_norm(pooled, P.ln_view(hp, "norm."))
    logits, c_lin = P.linear(y, hp["w"], hp["b"])
    return logits, (c_ln, c_lin)


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    K = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRange(f"labels must lie in [0, {K})")
    lp = log_softmax(logits)
    loss = -lp[np.arange(len(labels)), labels].mean()
    dlogits = np.exp(lp)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return float(loss), dlogits / len(labels)


def classify_forward(cfg, params, patches):
    pooled, fc = features_forward(cfg, params, patches)
    logits, hc = head_forward(params, pooled)
    return logits, (fc, hc)


def classify_backward(cfg, dlogits, cache, train_encoder: bool = True) -> dict:
    fc, (c_ln, c_lin) = cache
    hg: dict = {}
    dy, g = P.linear_backward(dlogits, c_lin)
    P.accumulate(hg, "", g)
    dpooled, g = P.layer_norm_backward(dy, c_ln)
    P.accumulate(hg, "norm.", g)
    grads = E._prefixed("head.", hg)
    if not train_encoder:
        return grads
    dX, dS = E.pool_backward(dpooled, fc["X_shape"], fc["S_shape"], cfg.pool)
    eg: dict = {}
    dX = E.blocks_backward(cfg, dX, dS, fc["blocks"], eg)
    E.embed_backward(dX, fc["embed"], eg)
    return grads | E._prefixed("encoder.", eg)


def finetune_step(cfg: E.EncoderConfig, params: dict, opt: AdamW, schedule: CosineSchedule,
                  step: int, patches, labels, train_encoder: bool = True):
    """One AdamW step on cross-entropy. Returns ``(loss, accuracy, lr)``."""
    logits, cache = classify_forward(cfg, params, patches)
    loss, dlogits = cross_entropy(logits, labels)
    grads = classify_backward(cfg, dlogits, cache, train_encoder)
    lr = schedule(step)
    if train_encoder:
        opt.step(params, grads, lr)
    else:
        head = {k: v for k, v in params.items() if k.startswith("head.")}
        opt.step(head, grads, lr)
    acc = float((logits.argmax(-1) == np.asarray(labels)).mean())
    return loss, acc, lr


def finetune_optimizer() -> AdamW:
    return AdamW(betas=(0.9, 0.999), weight_decay=0.05)


# --------------------------------------------------------------------------
# inference


def softmax_scores(logits):
    return np.exp(log_softmax(logits))


def clip_offsets(video_len: int, span: int, num_clips: int) -> list[int]:
    """Uniformly spread clip start offsets; a single clip is centred."""
    last = video_len - span
    if last < 0:
        raise OutOfRange(f"video of {video_len} frames is shorter than a clip span of {span}")
    if num_clips == 1:
        return [last // 2]
    return [int(round(i * last / (num_clips - 1))) for i in range(num_clips)]


def infer_video(video, cfg: E.EncoderConfig, params: dict, num_frames: int, stride: int,
                num_clips: int = 2) -> np.ndarray:
    """Average of per-clip softmax scores over ``num_clips`` uniformly placed clips."""
    video = np.asarray(video)
    span = (num_frames - 1) * stride + 1
    offsets = clip_offsets(len(video), span, num_clips)
    clips = np.stack([sample_clip(video, num_frames, stride, o).frames for o in offsets])
    patches = model_input(clips, cfg.cube, params["encoder.embed.w"].dtype)
    logits, _ = classify_forward(cfg, params, patches)
    return softmax_scores(logits).mean(axis=0)


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    confusion: np.ndarray  # [gold, pred]
    uar: float
    war: float
    per_class_accuracy: np.ndarray  # NaN for classes without gold samples

    def to_dict(self) -> dict:
        return {
            "uar": self.uar,
            "war": self.war,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "confusion": self.confusion.tolist(),
        }


def compute_metrics(preds, golds, num_classes: int) -> EvalReport:
    preds = np.asarray(preds, dtype=np.int64)
    golds = np.asarray(golds, dtype=np.int64)
    if preds.shape != golds.shape:
        raise ShapeMismatch(f"{preds.shape} predictions vs {golds.shape} labels")
    if preds.size == 0:
        raise EmptyInput("no predictions to evaluate")
    for arr in (preds, golds):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (golds, preds), 1)
    support = confusion.sum(axis=1)
    diag = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, diag / np.maximum(support, 1), np.nan)
    present = support > 0
    if not present.all():
        log.warning("classes %s have no gold samples; excluded from UAR",
                    np.flatnonzero(~present).tolist())
    # exact rationals, so both metrics are correctly rounded
    uar = float(sum(Fraction(int(diag[c]), int(support[c])) for c in np.flatnonzero(present)) / int(present.sum()))
    war = float(Fraction(int(diag.sum()), int(confusion.sum())))
    return EvalReport(confusion, uar, war, per_class)


def write_predictions_csv(path, sample_ids, golds, preds, scores) -> None:
    scores = np.asarray(scores)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "gold", "pred"] + [f"score_{k}" for k in range(scores.shape[1])])
        for sid, g, p, s in zip(sample_ids, golds, preds, scores):
            w.writerow([sid, int(g), int(p)] + [repr(float(v)) for v in s])


def read_predictions_csv(path):
    ids, golds, preds, scores = [], [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[:3] != ["sample_id", "gold", "pred"]:
            raise ValueError(f"{path}: not a predictions file")
        for row in r:
            ids.append(row[0])
            golds.append(int(row[1]))
            preds.append(int(row[2]))
            scores.append([float(v) for v in row[3:]])
    return ids, np.array(golds), np.array(preds), np.array(scores)
