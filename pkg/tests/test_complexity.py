from dataclasses import replace

import numpy as np
import pytest

from motionmae import complexity as CX
from motionmae import lgi_former as E
from motionmae import pretrain as PT
from motionmae.acceptance import REGION_FLOPS, RATIO_REF, SIZE_PARAMS, TABLE_FLOPS, TABLE_PARAMS, _variant_cfg
from motionmae.masking import sample_tube_mask

SMALL = E.EncoderConfig(depth=2, dim=16, heads=2, grid=(2, 4, 4), region=(1, 2, 2), cube=(2, 4, 4))


@pytest.mark.parametrize("name", list(TABLE_PARAMS))
def test_variant_params_within_two_percent(name):
    got = CX.count_params(_variant_cfg(name)).params / 1e6
    assert abs(got - TABLE_PARAMS[name]) / TABLE_PARAMS[name] < 0.02


@pytest.mark.parametrize("name", list(SIZE_PARAMS))
def test_size_params_within_two_percent(name):
    got = CX.count_params(E.preset(name)).params / 1e6
    assert abs(got - SIZE_PARAMS[name]) / SIZE_PARAMS[name] < 0.02


@pytest.mark.parametrize("name", list(TABLE_FLOPS))
def test_variant_flops_within_ten_percent(name):
    got = CX.count_flops(_variant_cfg(name)).flops / 1e9
    assert abs(got - TABLE_FLOPS[name]) / TABLE_FLOPS[name] < 0.10


@pytest.mark.parametrize("region", list(REGION_FLOPS))
def test_region_flops_within_ten_percent(region):
    got = CX.count_flops(E.preset("base", region=region)).flops / 1e9
    assert abs(got - REGION_FLOPS[region]) / REGION_FLOPS[region] < 0.10


def test_attention_ratio():
    assert CX.attention_complexity_ratio(8, 100) == pytest.approx(RATIO_REF, rel=1e-3)
    m = CX.measured_attention_ratio(E.preset("base"))
    assert m["measured"] == pytest.approx(m["formula"], rel=1e-12)
    assert m["measured_with_rep_pairs"] > m["measured"]
    with pytest.raises(ValueError):
        CX.attention_complexity_ratio(0, 4)


@pytest.mark.parametrize("variant", list(E.VARIANTS) + ["vit"])
def test_params_match_initialised_tensors(variant):
    cfg = replace(SMALL, vit_global=True, pool="local_mean") if variant == "vit" else replace(SMALL, **E.VARIANTS[variant])
    params = E.init_encoder(cfg, np.random.default_rng(0))
    assert CX.count_params(cfg).params == sum(v.size for v in params.values())


def test_params_with_head_and_decoder():
    dec = PT.DecoderConfig(depth=1, dim=8, heads=2)
    base = CX.count_params(SMALL).params
    assert CX.count_params(SMALL, num_classes=7).params == base + 16 * 7 + 7 + 2 * 16
    full = PT.init_pretrain_params(SMALL, dec, 0)
    assert CX.count_params(SMALL, decoder=dec).params == sum(v.size for v in full.values())


@pytest.mark.parametrize("variant", list(E.VARIANTS) + ["vit"])
def test_analytic_flops_match_instrumented(variant):
    cfg = replace(SMALL, vit_global=True, pool="local_mean") if variant == "vit" else replace(SMALL, **E.VARIANTS[variant])
    a = CX.count_flops(cfg)
    b = CX.empirical_op_count(cfg, dry=False)
    assert a.breakdown == b.breakdown and a.flops == b.flops


def test_analytic_flops_match_instrumented_masked_with_decoder():
    dec = PT.DecoderConfig(depth=1, dim=8, heads=2)
    m = sample_tube_mask(SMALL.partition, 0.5, 0)
    a = CX.count_flops(SMALL, m, dec)
    b = CX.empirical_op_count(SMALL, m, dec, dry=False)
    assert a.detail == b.detail
    assert a.flops < CX.count_flops(SMALL, None, dec).flops


def test_dry_run_matches_wet_run():
    assert CX.empirical_op_count(SMALL, dry=True).detail == CX.empirical_op_count(SMALL, dry=False).detail


def test_stage_costs_sum_to_total():
    r = CX.count_flops(E.preset("base"))
    assert sum(r.breakdown.values()) == r.flops
    assert sum(r.param_breakdown.values()) == r.params


def test_flop_convention():
    mac = CX.count_flops(SMALL, convention="mac")
    two = CX.count_flops(SMALL, convention="2mac")
    assert two.flops == 2 * mac.flops and two.macs == mac.macs


def test_report_serialises():
    r = CX.count_flops(E.preset("desk"))
    d = r.to_dict()
    assert d["flops"] == r.flops and "total" in r.table()
