"""Closed-form parameter / FLOP accounting and its instrumented cross-check.

FLOPs follow the fvcore convention used by the published efficiency tables:
one multiply-accumulate counts as one FLOP (``convention="mac"``). Pass
``convention="2mac"`` for the two-ops-per-MAC figure. Only matmuls enter the
FLOP total; softmax, layer-norm and activation element counts are reported
separately under ``elementwise``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import lgi_former as E
from . import primitives as P
from .masking import TubeMask, visible_per_footprint

CONVENTIONS = {"mac": 1, "2mac": 2}


@dataclass
class CostReport:
    params: int = 0
    flops: int = 0
    convention: str = "mac"
    breakdown: dict[str, int] = field(default_factory=dict)
    detail: dict[str, int] = field(default_factory=dict)
    param_breakdown: dict[str, int] = field(default_factory=dict)
    elementwise: dict[str, int] = field(default_factory=dict)

    @property
    def macs(self) -> int:
        return self.flops // CONVENTIONS[self.convention]

    def to_dict(self) -> dict:
        return {
            "params": self.params, "params_M": round(self.params / 1e6, 2),
            "flops": self.flops, "flops_G": round(self.flops / 1e9, 2),
            "convention": self.convention, "breakdown": self.breakdown,
            "detail": self.detail, "param_breakdown": self.param_breakdown,
            "elementwise": self.elementwise,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("stage", "params (M)", "FLOPs (G)")]
        for k in sorted(set(self.breakdown) | set(self.param_breakdown)):
            rows.append((k, f"{self.param_breakdown.get(k, 0) / 1e6:.3f}", f"{self.breakdown.get(k, 0) / 1e9:.3f}"))
        rows.append(("total", f"{self.params / 1e6:.3f}", f"{self.flops / 1e9:.3f}"))
        w = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join(f"{a:<{w[0]}}  {b:>{w[1]}}  {c:>{w[2]}}" for a, b, c in rows)


def _stage(tag: str) -> str:
    return tag.split(".", 1)[0]


def _fill(report: CostReport, macs: dict[str, int], convention: str) -> CostReport:
    f = CONVENTIONS[convention]
    report.convention = convention
    report.detail = {k: v * f for k, v in sorted(macs.items()) if v}
    bd: dict[str, int] = {}
    for k, v in report.detail.items():
        bd[_stage(k)] = bd.get(_stage(k), 0) + v
    report.breakdown = bd
    report.flops = sum(report.detail.values())
    return report


# --------------------------------------------------------------------------
# parameters


def _attn_params(C):
    return 4 * C * C + 4 * C


def _ln_params(C):
    return 2 * C


def _ffn_params(C, ratio):
    H = int(C * ratio)
    return 2 * C * H + H + C


def param_breakdown(cfg: E.EncoderConfig, num_classes: int | None = None, decoder=None) -> dict[str, int]:
    C, D = cfg.dim, cfg.depth
    out = {"embed": cfg.patch_values * C + C}
    if cfg.vit_global:
        out["global"] = D * (_attn_params(C) + _ln_params(C))
        out["ffn"] = D * (_ffn_params(C, cfg.mlp_ratio) + _ln_params(C))
    else:
        out["reps"] = cfg.partition.M * C
        if cfg.intra:
            out["intra"] = D * (_attn_params(C) + _ln_params(C))
        if cfg.inter:
            out["inter"] = D * (_attn_params(C) + _ln_params(C))
        if cfg.lgi:
            out["lgi"] = D * (_attn_params(C) + 2 * _ln_params(C))
        out["ffn"] = D * (_ffn_params(C, cfg.mlp_ratio) + 2 * _ln_params(C))
    if num_classes:
        out["head"] = _ln_params(C) + C * num_classes + num_classes
    if decoder is not None:
        Cd = decoder.dim
        Q = cfg.cube[1] * cfg.cube[2] * 3
        blocks = decoder.depth * (2 * _ln_params(Cd) + _attn_params(Cd) + _ffn_params(Cd, decoder.mlp_ratio))
        out["decoder"] = (_ln_params(C) + C * Cd + Cd + Cd + blocks + _ln_params(Cd) + 2 * (Cd * Q + Q))
    return out


def count_params(cfg: E.EncoderConfig, num_classes: int | None = None, decoder=None) -> CostReport:
    pb = param_breakdown(cfg, num_classes, decoder)
    return CostReport(params=sum(pb.values()), param_breakdown=pb)


# --------------------------------------------------------------------------
# FLOPs


def _tokens_per_region(cfg: E.EncoderConfig, mask) -> int:
    part = cfg.partition
    if mask is None:
        return part.N
    if isinstance(mask, TubeMask):
        return mask.num_visible // part.M
    return visible_per_footprint(part, float(mask)) * part.region[0]


def analytic_macs(cfg: E.EncoderConfig, mask=None, decoder=None) -> tuple[dict[str, int], dict[str, int]]:
    """Matmul multiply counts per tag, plus elementwise counts.

    ``mask`` may be ``None`` (fine-tuning lengths), a :class:`TubeMask`, or
    a masking ratio.
    """
    part = cfg.partition
    C, D, h = cfg.dim, cfg.depth, cfg.heads
    Hd = int(C * cfg.mlp_ratio)
    M = part.M
    n = _tokens_per_region(cfg, mask)
    L = M * n
    macs: dict[str, int] = {"embed": L * cfg.patch_values * C}
    ew = {"layer_norm": 0, "softmax": 0, "activation": 0}

    def add(tag, v):
        macs[tag] = macs.get(tag, 0) + v

    for _ in range(D):
        if cfg.vit_global:
            add("global", 4 * L * C * C)
            add("global.scores", 2 * L * L * C)
            add("ffn", 2 * L * C * Hd)
            ew["layer_norm"] += 2 * L * C
            ew["softmax"] += h * L * L
            ew["activation"] += L * Hd
            continue
        if cfg.intra:
            s = n + 1
            add("intra", 4 * M * s * C * C)
            add("intra.scores", 2 * M * s * s * C)
            ew["layer_norm"] += M * s * C
            ew["softmax"] += h * M * s * s
        if cfg.inter:
            add("inter", 4 * M * C * C)
            add("inter.scores", 2 * M * M * C)
            ew["layer_norm"] += M * C
            ew["softmax"] += h * M * M
        if cfg.lgi:
            add("lgi", 2 * L * C * C + 2 * M * C * C)
            add("lgi.scores", 2 * L * M * C)
            ew["layer_norm"] += L * C + M * C
            ew["softmax"] += h * L * M
        add("ffn", 2 * (L + M) * C * Hd)
        ew["layer_norm"] += (L + M) * C
        ew["activation"] += (L + M) * Hd
    if decoder is not None:
        K, Cd, hd = part.K, decoder.dim, decoder.heads
        Hdd = int(Cd * decoder.mlp_ratio)
        Q = cfg.cube[1] * cfg.cube[2] * 3
        add("decoder", L * C * Cd)
        ew["layer_norm"] += L * C
        for _ in range(decoder.depth):
            add("decoder", 4 * K * Cd * Cd + 2 * K * Cd * Hdd)
            add("decoder.scores", 2 * K * K * Cd)
            ew["layer_norm"] += 2 * K * Cd
            ew["softmax"] += hd * K * K
            ew["activation"] += K * Hdd
        add("decoder", 2 * K * Cd * Q)
        ew["layer_norm"] += K * Cd
    return macs, ew


def count_flops(cfg: E.EncoderConfig, mask=None, decoder=None, convention: str = "mac",
                num_classes: int | None = None) -> CostReport:
    macs, ew = analytic_macs(cfg, mask, decoder)
    report = count_params(cfg, num_classes, decoder)
    report.elementwise = ew
    return _fill(report, macs, convention)


def attention_complexity_ratio(M: int, N: int) -> float:
    """Quadratic-term cost of a region-decomposed block relative to global attention."""
    if M < 1 or N < 1:
        raise ValueError("M and N must be positive")
    return 1.0 / M + 1.0 / N ** 2 + 1.0 / N


# --------------------------------------------------------------------------
# instrumented counting


def _zeros_params(shapes: dict, dtype=np.float32) -> dict:
    return {k: np.zeros(s, dtype) for k, s in shapes.items()}


def empirical_op_count(cfg: E.EncoderConfig, mask: TubeMask | None = None, decoder=None,
                       dry: bool | None = None, seed: int = 0, convention: str = "mac") -> CostReport:
    """Run a metered forward pass and report the observed matmul counts.

    ``dry`` (default: on for configs above ~5M parameters) keeps every shape
    and call but skips the arithmetic.
    """
    from .pretrain import decoder_forward, init_decoder, predict

    n_params = count_params(cfg).params
    if dry is None:
        dry = n_params > 5_000_000
    if dry:
        params = _zeros_params(E.encoder_shapes(cfg))
    else:
        params = E.init_encoder(cfg, np.random.default_rng(seed))
    part = cfg.partition
    rng = np.random.default_rng(seed + 1)
    patches = rng.random((1, part.K, cfg.patch_values)).astype(np.float32)
    vis = None if mask is None else mask.visible_indices()[None]
    with P.counting(dry=dry) as counter:
        X, _ = E.embed_forward(cfg, params, patches, vis)
        X, _, _ = E.blocks_forward(cfg, params, X)
        if decoder is not None:
            if vis is None:
                vis = part.order.ravel()[None]
            dp = init_decoder(cfg, decoder, np.random.default_rng(seed + 2))
            full, _ = decoder_forward(cfg, decoder, dp, X, vis)
            with P.op_tag("decoder"):
                y, _ = P.layer_norm(full, P.ln_view(dp, "norm."))
            predict(y, dp)
    report = count_params(cfg, None, decoder)
    report.elementwise = dict(counter.elementwise)
    return _fill(report, dict(counter.counts), convention)


def measured_attention_ratio(cfg: E.EncoderConfig) -> dict[str, float]:
    """Instrumented quadratic-attention ratio of one block vs one global block.

    The score/value products of the region attention run over ``N + 1``
    tokens per region; the extra ``M (2N + 1)`` pairs that involve the
    representative token are linear in ``N`` and are split out before the
    ratio is formed.
    """
    one = replace(cfg, depth=1, vit_global=False, intra=True, inter=True, lgi=True,
                  pool="representative_mean")
    ref = replace(one, vit_global=True, pool="local_mean")
    lgi = empirical_op_count(one, dry=True).detail
    glob = empirical_op_count(ref, dry=True).detail
    part = one.partition
    M, N, K, C = part.M, part.N, part.K, one.dim
    rep_pairs = 2 * M * (2 * N + 1) * C
    quad = lgi["intra.scores"] - rep_pairs + lgi["inter.scores"] + lgi["lgi.scores"]
    return {
        "measured": quad / glob["global.scores"],
        "measured_with_rep_pairs": (quad + rep_pairs) / glob["global.scores"],
        "formula": attention_complexity_ratio(M, N),
        "M": M, "N": N, "K": K,
    }
