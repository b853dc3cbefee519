"""Acceptance suite used by ``motionmae selftest`` and the test run.

Each ``criterion_N`` returns a :class:`Result`. Reference values fall into
two kinds. Published figures are transcribed below (parameter and FLOP
tables, the attention-ratio formula). Everything else is checked against an
independent oracle: central finite differences, brute-force counting,
bit-level comparison under perturbation.
"""
from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import complexity as CX
from . import finetune as F
from . import lgi_former as E
from . import primitives as P
from . import pretrain as PT
from . import synthetic as S
from . import training as TR
from .gradcheck import check_grads, rel_error
from .masking import make_partition, sample_tube_mask
from .tokenizer import VideoClip, build_targets, model_input, target_tokens

# published parameter counts (M) and FLOPs (G)
TABLE_PARAMS = {"intra": 51.2, "intra+inter": 68.0, "intra+lgi": 68.1, "full": 84.9, "vit": 86.2}
SIZE_PARAMS = {"tiny": 21.5, "small": 47.9, "base": 84.9}
TABLE_FLOPS = {"intra": 42.7, "intra+inter": 42.8, "intra+lgi": 49.6, "full": 49.8, "vit": 80.8}
REGION_FLOPS = {(1, 5, 10): 49.8, (2, 2, 10): 49.9, (2, 5, 10): 49.8, (2, 10, 10): 50.7, (4, 5, 10): 50.7}
RATIO_REF = 0.1351


@dataclass
class Result:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.number}: {self.title} ({self.seconds:.1f}s) {self.detail}"


def _variant_cfg(name: str) -> E.EncoderConfig:
    return E.preset("vit") if name == "vit" else E.preset("base", **E.VARIANTS[name])


# --------------------------------------------------------------------------
# 1, 2: efficiency tables


def criterion_1() -> Result:
    worst, notes = 0.0, []
    for name, ref in TABLE_PARAMS.items():
        got = CX.count_params(_variant_cfg(name)).params / 1e6
        worst = max(worst, abs(got - ref) / ref)
        notes.append(f"{name} {got:.2f}/{ref}")
    for name, ref in SIZE_PARAMS.items():
        got = CX.count_params(E.preset(name)).params / 1e6
        worst = max(worst, abs(got - ref) / ref)
        notes.append(f"{name} {got:.2f}/{ref}")
    return Result(1, "parameter counts", worst < 0.02, f"max rel err {worst:.4f}; " + ", ".join(notes))


def criterion_2() -> Result:
    worst, notes = 0.0, []
    for name, ref in TABLE_FLOPS.items():
        got = CX.count_flops(_variant_cfg(name)).flops / 1e9
        worst = max(worst, abs(got - ref) / ref)
        notes.append(f"{name} {got:.2f}/{ref}")
    for region, ref in REGION_FLOPS.items():
        got = CX.count_flops(E.preset("base", region=region)).flops / 1e9
        worst = max(worst, abs(got - ref) / ref)
        notes.append(f"{region} {got:.2f}/{ref}")
    formula = CX.attention_complexity_ratio(8, 100)
    measured = CX.measured_attention_ratio(E.preset("base"))["measured"]
    ratio_err = max(abs(formula - RATIO_REF), abs(measured - RATIO_REF)) / RATIO_REF
    ok = worst < 0.10 and ratio_err < 0.01
    return Result(2, "FLOP counts and attention ratio", ok,
                  f"max rel err {worst:.4f}; ratio formula {formula:.4f} measured {measured:.4f}; " + ", ".join(notes))


# --------------------------------------------------------------------------
# 3: gradients


def _primitive_checks(rng) -> dict[str, float]:
    errs: dict[str, float] = {}
    C, h = 8, 2
    x = rng.normal(size=(2, 5, C))
    y = rng.normal(size=(2, 3, C))

    def attn_params():
        d = P.init_attention(rng, C, np.float64)
        for k in d:
            d[k] = rng.normal(scale=0.4, size=d[k].shape)
        return d

    # linear
    w, b = rng.normal(size=(C, 6)), rng.normal(size=6)
    R = rng.normal(size=(2, 5, 6))
    out, c = P.linear(x, w, b)
    dx, g = P.linear_backward(R, c)
    f = lambda: float((P.linear(x, w, b)[0] * R).sum())
    errs |= {f"linear.{k}": v for k, v in check_grads(f, {"x": x, "w": w, "b": b},
                                                      {"x": dx, "w": g["w"], "b": g["b"]}, rng).items()}
    # layer norm
    ln = {"gamma": rng.normal(size=C), "beta": rng.normal(size=C)}
    R = rng.normal(size=x.shape)
    _, c = P.layer_norm(x, P.LNParams(**ln))
    dx, g = P.layer_norm_backward(R, c)
    f = lambda: float((P.layer_norm(x, P.LNParams(**ln))[0] * R).sum())
    errs |= {f"layer_norm.{k}": v for k, v in check_grads(f, {"x": x} | ln, {"x": dx} | g, rng).items()}
    # softmax through attention scores is covered by mhsa; check it alone too
    s = rng.normal(size=(3, 7))
    R = rng.normal(size=s.shape)
    p = P.softmax(s)
    ds = p * (R - (R * p).sum(-1, keepdims=True))
    f = lambda: float((P.softmax(s) * R).sum())
    errs["softmax.s"] = check_grads(f, {"s": s}, {"s": ds}, rng)["s"]
    # self and cross attention
    for kind in ("mhsa", "mhca"):
        ap = attn_params()
        R = rng.normal(size=x.shape)

        def fwd():
            view = P.AttentionParams(heads=h, **ap)
            return P.mhsa(x, view) if kind == "mhsa" else P.mhca(x, y, view)

        out, c = fwd()
        dx, dy, g = P.attention_backward(R, c)
        f = lambda: float((fwd()[0] * R).sum())
        arrays = {"x": x} | ap
        ana = {"x": dx} | g
        if kind == "mhca":
            arrays["y"] = y
            ana["y"] = dy
        errs |= {f"{kind}.{k}": v for k, v in check_grads(f, arrays, ana, rng).items()}
    # FFN
    fp = {"w1": rng.normal(scale=0.5, size=(C, 16)), "b1": rng.normal(size=16),
          "w2": rng.normal(scale=0.5, size=(16, C)), "b2": rng.normal(size=C)}
    R = rng.normal(size=x.shape)
    _, c = P.ffn(x, P.FFNParams(**fp))
    dx, g = P.ffn_backward(R, c)
    f = lambda: float((P.ffn(x, P.FFNParams(**fp))[0] * R).sum())
    errs |= {f"ffn.{k}": v for k, v in check_grads(f, {"x": x} | fp, {"x": dx} | g, rng).items()}
    return errs


def tiny_test_setup(seed: int = 0, rho: float = 0.5, lam: float = 0.5, batch: int = 2):
    """Double-precision toy model: grid (2,2,2), region (1,2,2), C=16, decoder C_d=8, depth 1+1."""
    cfg = E.EncoderConfig(depth=1, dim=16, heads=2, grid=(2, 2, 2), region=(1, 2, 2), cube=(2, 4, 4))
    dec = PT.DecoderConfig(depth=1, dim=8, heads=2)
    params = PT.init_pretrain_params(cfg, dec, seed, np.float64)
    rng = np.random.default_rng(seed + 100)
    # larger weights than the default init so that every path carries signal
    for k, v in params.items():
        if v.ndim >= 2:
            params[k] = rng.normal(scale=0.3, size=v.shape)
        elif not k.endswith("gamma"):
            params[k] = rng.normal(scale=0.1, size=v.shape)
    clips = rng.random((batch, 4, 8, 8, 3))
    masks = [sample_tube_mask(cfg.partition, rho, seed + i) for i in range(batch)]
    b = PT.make_batch(clips, masks, cfg, "per_cube", np.float64)
    return cfg, dec, params, b, lam


def end_to_end_check(seed: int = 0) -> dict[str, float]:
    cfg, dec, params, batch, lam = tiny_test_setup(seed)
    _, cache = PT.pretrain_forward(cfg, dec, params, batch, lam)
    grads = PT.pretrain_backward(cfg, dec, batch, cache)
    f = lambda: PT.pretrain_forward(cfg, dec, params, batch, lam)[0].total
    return check_grads(f, params, grads, np.random.default_rng(seed + 1), per_tensor=4, h=1e-5)


def criterion_3() -> Result:
    prim = _primitive_checks(np.random.default_rng(3))
    e2e = end_to_end_check(0)
    wp = max(prim, key=prim.get)
    we = max(e2e, key=e2e.get)
    ok = prim[wp] < 1e-5 and e2e[we] < 1e-4
    return Result(3, "finite-difference gradients", ok,
                  f"primitives max {prim[wp]:.2e} ({wp}, {len(prim)} tensors); "
                  f"end-to-end max {e2e[we]:.2e} ({we}, {len(e2e)} tensors)")


# --------------------------------------------------------------------------
# 4: masking


def masked_values_unread(cfg: E.EncoderConfig, mask, params: dict, rng) -> bool:
    """Encoder output is bit-identical when every masked pixel becomes NaN."""
    T, H, W = (g * c for g, c in zip(cfg.grid, cfg.cube))
    clip = rng.random((T, H, W, 3))
    poisoned = clip.copy()
    vis = mask.visible
    for ax, c in enumerate(cfg.cube):
        vis = np.repeat(vis, c, axis=ax)
    poisoned[~vis] = np.nan
    outs = []
    for frames in (clip, poisoned):
        patches = model_input(frames, cfg.cube, np.float64)
        X, _ = E.embed_forward(cfg, params, patches, mask.visible_indices())
        X, S_, _ = E.blocks_forward(cfg, params, X)
        outs.append((X, S_))
    return all(np.array_equal(a, b) for a, b in zip(outs[0], outs[1]))


def criterion_4(seeds: int = 100) -> Result:
    part = make_partition((8, 10, 10), (2, 5, 10))
    cfg = E.EncoderConfig(depth=1, dim=16, heads=2, grid=(8, 10, 10), region=(2, 5, 10), cube=(2, 2, 2))
    params = E.init_encoder(cfg, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(4)
    bad = []
    for seed in range(seeds):
        m = sample_tube_mask(part, 0.9, seed)
        per_region = np.bincount(part.region_index.ravel()[m.visible.ravel()], minlength=part.M)
        tube = all(np.array_equal(m.visible[0], m.visible[t]) for t in range(part.grid[0]))
        if m.num_visible != 80 or not (per_region == 10).all() or not tube:
            bad.append((seed, "counts/tube"))
        elif not masked_values_unread(cfg, m, params, rng):
            bad.append((seed, "masked value read"))
    return Result(4, "tube masking invariants", not bad,
                  f"{seeds} seeds at rho=0.9: {'all hold' if not bad else bad[:5]}")


# --------------------------------------------------------------------------
# 5: loss algebra


def _oracle_mse(pred, target, masked) -> float:
    total, count = 0.0, 0
    for b in range(pred.shape[0]):
        for k in range(pred.shape[1]):
            if masked[b, k]:
                d = pred[b, k] - target[b, k]
                total += float(np.dot(d, d))
                count += d.size
    return total / count


def criterion_5() -> Result:
    cfg, dec, params, batch, _ = tiny_test_setup(5, batch=3)
    problems = []
    app = mot = None
    for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
        rep, cache = PT.pretrain_forward(cfg, dec, params, batch, lam)
        if rep.total != lam * rep.appearance_mse + (1 - lam) * rep.motion_mse:
            problems.append(f"lambda={lam}: total differs")
        app, mot = cache["app"], cache["mot"]
    la = _oracle_mse(app, batch.app, batch.masked)
    lm = _oracle_mse(mot, batch.mot, batch.masked)
    if rel_error(la, rep.appearance_mse) > 1e-12 or rel_error(lm, rep.motion_mse) > 1e-12:
        problems.append("branch MSE disagrees with the counting oracle")
    # finite differences w.r.t. visible-position targets must vanish exactly
    rep0, cache0 = PT.pretrain_forward(cfg, dec, params, batch, 0.5)
    g0 = PT.pretrain_backward(cfg, dec, batch, cache0)
    vis = ~batch.masked
    rng = np.random.default_rng(55)
    nonzero = 0
    for arr in (batch.app, batch.mot):
        saved = arr.copy()
        arr[vis] += rng.normal(size=arr[vis].shape)
        rep1, cache1 = PT.pretrain_forward(cfg, dec, params, batch, 0.5)
        g1 = PT.pretrain_backward(cfg, dec, batch, cache1)
        if rep1.total != rep0.total or any(not np.array_equal(g0[k], g1[k]) for k in g0):
            nonzero += 1
        arr[...] = saved
    if nonzero:
        problems.append("visible-position targets influence the loss")
    return Result(5, "loss algebra", not problems, "; ".join(problems) or
                  "total == lam*La + (1-lam)*Lm bit-exact for 5 lambdas; visible targets have zero gradient")


# --------------------------------------------------------------------------
# 6: encoder structure


def equivariance_error(cfg: E.EncoderConfig, seed: int = 6) -> float:
    """Max deviation from region-permutation (and within-region token) equivariance."""
    rng = np.random.default_rng(seed)
    params = E.init_encoder(cfg, rng, np.float64)
    for k, v in params.items():
        if v.ndim >= 2:
            params[k] = rng.normal(scale=0.2, size=v.shape)
    part = cfg.partition
    X = rng.normal(size=(part.M, part.N, cfg.dim))
    Y, S_, _ = E.blocks_forward(cfg, params, X)
    perm = rng.permutation(part.M)
    inner = rng.permutation(part.N)
    pp = dict(params)
    if "reps" in pp:
        pp["reps"] = params["reps"][perm]
    Yp, Sp, _ = E.blocks_forward(cfg, pp, X[perm][:, inner])
    err = np.abs(Yp - Y[perm][:, inner]).max()
    if S_ is not None:
        err = max(err, np.abs(Sp - S_[perm]).max())
    return float(err)


def residual_identity(cfg: E.EncoderConfig, seed: int = 6) -> bool:
    rng = np.random.default_rng(seed)
    params = E.init_encoder(cfg, rng, np.float64)
    for k in params:
        if k.endswith(("attn.wo", "attn.bo", "ffn.w2", "ffn.b2")):
            params[k] = np.zeros_like(params[k])
    part = cfg.partition
    X = rng.normal(size=(2, part.M, part.N, cfg.dim))
    Y, S_, _ = E.blocks_forward(cfg, params, X)
    ok = np.array_equal(Y, X)
    if S_ is not None:
        ok = ok and np.array_equal(S_, np.broadcast_to(params["reps"], S_.shape))
    return bool(ok)


def criterion_6() -> Result:
    base = E.EncoderConfig(depth=2, dim=16, heads=2, grid=(2, 4, 4), region=(1, 2, 2), cube=(2, 4, 4))
    errs = {name: equivariance_error(replace(base, **kw)) for name, kw in E.VARIANTS.items()}
    worst = max(errs.values())
    ident = {name: residual_identity(replace(base, **kw)) for name, kw in E.VARIANTS.items()}
    ident["vit"] = residual_identity(replace(base, vit_global=True, pool="local_mean"))
    ok = worst < 1e-6 and all(ident.values())
    return Result(6, "encoder structure", ok,
                  f"permutation max err {worst:.1e}; residual identity {'exact' if all(ident.values()) else ident}")


# --------------------------------------------------------------------------
# 7: desk-scale learning

DESK_LEARNING = {
    "n_pretrain": 10000, "n_pair": 400, "epochs": 5, "batch_size": 32, "base_lr": 2.4e-2, "rho": 0.75,
    "ft_epochs": 10, "ft_lr": 3e-3, "ft_batch": 32, "train_encoder": True, "seed": 0, "tile": 8,
}


def desk_learning(settings: dict | None = None, log=None) -> dict:
    """Pre-train with lambda 0.5 and 1.0, then fit the motion-only pair; returns all curves."""
    s = DESK_LEARNING | (settings or {})
    spec = S.SyntheticSpec(tile=s["tile"])
    cfg = E.preset("desk")
    dec = PT.DESK_DECODER
    clips, _ = S.generate_synthetic(spec, s["seed"], s["n_pretrain"])
    pair = spec.motion_pair
    pc, pl = S.generate_synthetic(spec, s["seed"] + 1, s["n_pair"], classes=pair)
    pl = (pl == pair[1]).astype(np.int64)
    out = {"settings": s, "pair_stats": S.pair_statistics(clips, _, pair)}
    for lam in (0.5, 1.0):
        t0 = time.time()
        params, _, means = TR.pretrain_run(cfg, dec, clips, rho=s["rho"], lam=lam, seed=s["seed"],
                                           epochs=s["epochs"], batch_size=s["batch_size"], base_lr=s["base_lr"])
        t1 = time.time()
        _, losses, accs = TR.finetune_run(cfg, TR.encoder_params_of(params), pc, pl, 2, seed=s["seed"],
                                          epochs=s["ft_epochs"], batch_size=s["ft_batch"], base_lr=s["ft_lr"],
                                          train_encoder=s["train_encoder"])
        out[lam] = {"pretrain_means": means, "pretrain_seconds": t1 - t0, "ft_losses": losses,
                    "ft_accuracies": accs, "final_accuracy": accs[-1], "ft_seconds": time.time() - t1}
        if log:
            log(f"lambda {lam}: pretrain means {np.round(means, 4).tolist()}, final pair accuracy {accs[-1]:.3f}")
    return out


def criterion_7(settings: dict | None = None) -> Result:
    r = desk_learning(settings)
    mono = all(all(b < a for a, b in zip(r[lam]["pretrain_means"], r[lam]["pretrain_means"][1:]))
               for lam in (0.5, 1.0))
    a5, a10 = r[0.5]["final_accuracy"], r[1.0]["final_accuracy"]
    pre = max(r[lam]["pretrain_seconds"] for lam in (0.5, 1.0))
    total = sum(r[lam]["pretrain_seconds"] + r[lam]["ft_seconds"] for lam in (0.5, 1.0))
    ok = mono and a5 >= 0.90 and a5 - a10 >= 0.05 and pre <= 1800 and total <= 3600
    return Result(7, "desk-scale learning", ok,
                  f"monotone {mono}; pair accuracy lambda=0.5 {a5:.3f} vs lambda=1.0 {a10:.3f} "
                  f"(need >= 0.90 and a gap >= 0.05); pretrain {r[0.5]['pretrain_seconds']:.0f}s+"
                  f"{r[1.0]['pretrain_seconds']:.0f}s, total {total:.0f}s")


# --------------------------------------------------------------------------
# 8: metrics


def oracle_metrics(preds, golds, num_classes: int) -> tuple[float, float]:
    """UAR/WAR by plain counting with exact rationals."""
    recalls = []
    for c in range(num_classes):
        idx = [i for i, g in enumerate(golds) if g == c]
        if idx:
            recalls.append(Fraction(sum(1 for i in idx if preds[i] == c), len(idx)))
    uar = sum(recalls, Fraction(0)) / len(recalls)
    war = Fraction(sum(1 for p, g in zip(preds, golds) if p == g), len(golds))
    return float(uar), float(war)


def criterion_8(trials: int = 1000) -> Result:
    rep = F.compute_metrics([0, 0, 0, 0], [0, 0, 0, 1], 2)
    hand = rep.war == 0.75 and rep.uar == 0.5
    rng = np.random.default_rng(8)
    mismatches = 0
    # random draws often miss a class; the per-call warning is expected here
    quiet = logging.getLogger(F.__name__)
    level, quiet.level = quiet.level, logging.ERROR
    for _ in range(trials):
        k = int(rng.integers(2, 8))
        n = int(rng.integers(1, 60))
        golds = rng.integers(0, k, n)
        preds = np.where(rng.random(n) < 0.5, golds, rng.integers(0, k, n))
        r = F.compute_metrics(preds, golds, k)
        if (r.uar, r.war) != oracle_metrics(preds.tolist(), golds.tolist(), k):
            mismatches += 1
    quiet.setLevel(level)
    return Result(8, "UAR/WAR metrics", hand and mismatches == 0,
                  f"hand case WAR={rep.war} UAR={rep.uar}; {mismatches}/{trials} oracle mismatches")


# --------------------------------------------------------------------------
# 9: reproducibility


def tiny_run_config(out: str, seed: int = 0) -> dict:
    return {
        "mode": "pretrain", "seed": seed, "rho": 0.75, "lambda": 0.5,
        "model": {"preset": "desk", "region": [2, 2, 2], "depth": 1, "dim": 16, "heads": 2},
        "decoder": {"depth": 1, "dim": 8, "heads": 2},
        "train": {"epochs": 2, "batch_size": 8, "lr": 1e-2},
        "data": {"synthetic": {"frames": 8, "size": 32}, "n": 32},
        "paths": {"out": out},
    }


def criterion_9() -> Result:
    from .config import parse_config
    from .runner import PRETRAIN_CKPT, run

    with tempfile.TemporaryDirectory() as tmp:
        blobs = []
        for name in ("a", "b"):
            out = str(Path(tmp) / name)
            run(parse_config(tiny_run_config(out)))
            blobs.append(((Path(out) / PRETRAIN_CKPT).read_bytes(), (Path(out) / "pretrain_log.jsonl").read_bytes()))
        same = blobs[0] == blobs[1]
    rng = np.random.default_rng(9)
    stitch_ok = True
    for dtype in (np.float32, np.float64):
        clip = rng.random((8, 32, 32, 3)).astype(dtype)
        t = build_targets(VideoClip(clip), patch=8)
        rec = PT.stitch_reconstruction(target_tokens(t.appearance, 8), target_tokens(t.motion, 8), t)
        stitch_ok &= bool(np.array_equal(rec, clip))
    return Result(9, "reproducibility", same and stitch_ok,
                  f"repeat run checkpoints+logs identical: {same}; raw stitching exact: {stitch_ok}")


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 10)}


def run_one(number: int) -> Result:
    t0 = time.time()
    try:
        r = CRITERIA[number]()
    except Exception as e:  # a crash is a failure, reported like one
        r = Result(number, "error", False, f"{type(e).__name__}: {e}")
    r.seconds = time.time() - t0
    return r


def run_all(only=None, skip=()) -> list[Result]:
    return [run_one(i) for i in CRITERIA if (only is None or i in only) and i not in skip]
