import json
import math
from fractions import Fraction

import numpy as np
import pytest

from lgtransformer import tensor as T
from lgtransformer.analysis import (
    FLOP_CONVENTION,
    attention_cost,
    count_flops,
    count_params,
    dense_attention_flops,
    linearity_check,
    overhead_ratio,
)
from lgtransformer.errors import ConfigError
from lgtransformer.model import ablation, forward, init_params, preset


def swin_like_oracle(depths, scales, C0=96, heads=(3, 6, 12, 24), M=7, img=224, classes=1000, patch=4):
    """Independent closed-form params / MACs, written out per layer type.

    ``scales`` are relative path scales per stage.  Every downsampled map is
    assumed to be a whole number of windows (true at 224 for the presets).
    """
    params = flops = 0
    n = (img // patch) ** 2
    params += patch * patch * 3 * C0 + C0 + 2 * C0
    flops += n * patch * patch * 3 * C0
    for s in range(4):
        C = C0 * 2**s
        if s:
            n //= 4
            params += 2 * 2 * C + 2 * C * C + C
            flops += n * 2 * C * C
        for _ in range(depths[s]):
            params += 2 * C + 2 * C + (C * 4 * C + 4 * C) + (4 * C * C + C)
            flops += 2 * n * C * 4 * C
            for r in scales[s]:
                np_ = n // (r * r)
                params += 3 * C * C + 3 * C + C * C + C + (2 * M - 1) ** 2 * heads[s]
                flops += 4 * np_ * C * C + 2 * M * M * np_ * C
    C = C0 * 8
    params += 2 * C + C * classes + classes
    flops += C * classes
    return params, flops


def test_symbolic_examples():
    assert (attention_cost([1]).a, attention_cost([1]).b) == (4, 2)
    c = attention_cost([1, 2, 4])
    assert (c.a, c.b) == (Fraction(21, 4), Fraction(21, 8))
    assert (float(c.a), float(c.b)) == (5.25, 2.625)
    assert (attention_cost([1, 2]).a, attention_cost([1, 2]).b) == (5, Fraction(5, 2))
    assert overhead_ratio([1, 2, 4]) == 1.3125
    assert overhead_ratio([1]) == 1.0
    assert overhead_ratio([1, 2]) == 1.25
    assert str(c) == "5.25*hwC^2 + 2.625*M^2hwC"
    with pytest.raises(ConfigError):
        attention_cost([1, 3])


def test_symbolic_cost_ratio_independent_of_sizes():
    c, base = attention_cost([1, 2, 4]), attention_cost([1])
    for h, w, C, M in [(56, 56, 96, 7), (8, 12, 5, 2), (1, 1, 1, 1)]:
        assert Fraction(c.evaluate(h, w, C, M)) / Fraction(base.evaluate(h, w, C, M)) == Fraction(21, 16)


@pytest.mark.parametrize("name,depths,ref_params,ref_flops", [
    ("lg_t", [2, 2, 6, 2], 32.6e6, 4.8e9),
    ("lg_s", [2, 2, 18, 2], 61.0e6, 9.4e9),
    ("swin_t_equiv", [2, 2, 6, 2], 29e6, 4.5e9),
])
def test_budgets_against_oracle_and_reference(name, depths, ref_params, ref_flops):
    cfg = preset(name)
    rep = count_flops(cfg)
    rel = [cfg.relative_scales(s) for s in range(4)]
    assert (rep.total_params, rep.total_flops) == swin_like_oracle(depths, rel)
    assert abs(rep.total_params / ref_params - 1) <= 0.05
    assert abs(rep.total_flops / ref_flops - 1) <= 0.05
    assert rep.convention == FLOP_CONVENTION == "MAC"


@pytest.mark.parametrize("name", ["tiny-lg", "gradcheck-tiny", "swin_t_equiv"])
def test_param_walk_matches_shape_walk(name):
    cfg = preset(name)
    assert count_params(init_params(cfg, init="zeros")).total_params == count_flops(cfg).total_params


@pytest.mark.parametrize("size", [(32, 32), (20, 44), (37, 53)])
def test_flops_match_executed_macs(size):
    # the forward pass counts every matmul MAC it performs; the shape walk must agree
    cfg = preset("tiny-lg")
    params = init_params(cfg)
    with T.count_macs() as c, T.no_grad():
        forward(np.zeros((*size, 3)), params, cfg)
    assert c[0] == count_flops(cfg, size).total_flops


def test_attention_entries_equal_symbolic_evaluation():
    cfg = preset("lg_t")
    rep = count_flops(cfg)
    h = 56
    for e in rep.entries:
        if e.kind != "attention":
            continue
        s = int(e.name[5]) - 1
        j = int(e.name.rsplit("attn", 1)[1])
        side = max(h >> s, 1) // cfg.relative_scales(s)[j]
        C = cfg.stage_dim(s)
        assert e.flops == attention_cost([1]).evaluate(side, side, C, min(7, side))


def test_ablation_structure_and_reference_rows():
    rows = [count_flops(ablation(stages)) for stages in [(), (1,), (1, 2), (1, 2, 3)]]
    params = [r.total_params for r in rows]
    flops = [r.total_flops for r in rows]
    assert params == sorted(set(params)) and flops == sorted(set(flops))
    dp, df = np.diff(params), np.diff(flops)
    assert dp.argmax() == 2 and df.argmax() == 2
    # the reference ablation figures come with their two column labels swapped; read
    # swapped, every row agrees to the printed precision
    assert [round(p / 1e6, 1) for p in params] == [28.3, 28.4, 29.0, 32.6]
    assert [round(f / 1e9, 1) for f in flops] == [4.5, 4.5, 4.6, 4.8]
    only16 = count_flops(ablation((1, 2, 3), paths32=False))
    only32 = count_flops(ablation((1, 2, 3), paths16=False))
    assert (round(only16.total_params / 1e6, 1), round(only16.total_flops / 1e9, 1)) == (28.7, 4.6)
    assert (round(only32.total_params / 1e6, 1), round(only32.total_flops / 1e9, 1)) == (32.2, 4.7)


def test_linearity():
    for name in ("lg_t", "lg_s", "swin_t_equiv"):
        fit = linearity_check(preset(name), [112, 224, 448])
        assert fit.r2 >= 0.999, (name, fit.r2)
    dense = linearity_check(preset("lg_t"), [112, 224, 448], dense=True)
    assert dense.r2 < 0.999
    with pytest.raises(ValueError):
        linearity_check(preset("lg_t"), [224])


def test_doubling_resolution_quadruples_attention_cost():
    cfg = preset("swin_t_equiv")
    a = count_flops(cfg, (224, 224)).attention_flops()
    b = count_flops(cfg, (448, 448)).attention_flops()
    assert 3.9 <= b / a <= 4.1
    d1, d2 = dense_attention_flops(cfg, (224, 224)), dense_attention_flops(cfg, (448, 448))
    assert d2 / d1 > 8


def test_report_is_pure_and_consistent():
    cfg = preset("lg_t")
    r1, r2 = count_flops(cfg), count_flops(cfg)
    assert r1.to_json() == r2.to_json()
    d = json.loads(r1.to_json())
    assert d["total_params"] == sum(e["params"] for e in d["entries"])
    assert d["total_flops"] == sum(e["flops"] for e in d["entries"])
    assert sum(v["flops"] for v in r1.subtotals().values()) == r1.total_flops
    assert all(e.params >= 0 and e.flops >= 0 for e in r1.entries)
    assert "32.60M" in r1.format_table() and "4.779G" in r1.format_table()
