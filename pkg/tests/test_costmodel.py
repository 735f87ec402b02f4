from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vwn import numcore as nc
from vwn.costmodel import BASELINE_ACTIVATION_BYTES, cost_report, ghc_flops, ghc_memory, validate_against_counter


def test_worked_example():
    r = ghc_flops(2, 3)
    assert (r.flops_norm, r.flops_dynamic, r.flops_width) == (6, 21, 15)
    assert r.flops_read == 42 and r.flops_depth == 6
    extra, ratio = ghc_memory(2, 3, Fraction(1, 2))
    assert extra == 3 and BASELINE_ACTIVATION_BYTES == 34
    assert ratio == Fraction(3, 34) and round(float(ratio) * 100, 1) == 8.8


@pytest.mark.parametrize("m, n, expected", [
    (1, 1, (4, 6, 4, 2)),
    # 2 * (2*8 + 64) * 64 / 8 = 1280
    (8, 64, (32, 1280, 1152, 128)),
])
def test_formulas(m, n, expected):
    r = ghc_flops(m, n)
    assert (r.flops_norm, r.flops_dynamic, r.flops_width, r.flops_depth) == expected


@pytest.mark.parametrize("m, n, eta, expected", [(2, 3, 0, 0), (1, 2, 1, 8), (2, 3, "1/2", 3)])
def test_memory(m, n, eta, expected):
    assert ghc_memory(m, n, Fraction(eta))[0] == expected


def test_memory_rejects_eta_out_of_range():
    with pytest.raises(nc.ConfigError):
        ghc_memory(2, 3, 1.5)


@given(st.integers(1, 8), st.integers(0, 40))
def test_monotone_in_n(m, extra):
    a, b = ghc_flops(m, m + extra), ghc_flops(m, m + extra + 1)
    for f in ("flops_norm", "flops_dynamic", "flops_width", "flops_depth"):
        assert getattr(b, f) >= getattr(a, f) >= 0


@pytest.mark.parametrize("D", [8, 64, 1024])
def test_rows_scale_linearly_in_D(D):
    r = cost_report(2, 3)
    rows = dict(r.rows(D))
    assert int(rows["flops_read_total"]) == 42 * D
    assert dict(r.rows())["flops_read_total"] == "42D"
    assert r.overhead_ratio == Fraction(3, 34)


@pytest.mark.parametrize("m, n, D, key, expected", [
    (2, 3, 64, "width", 960),
    (1, 1, 8, "depth", 16),
])
def test_counter_examples(m, n, D, key, expected):
    with nc.flop_counter.counting():
        rep = validate_against_counter(m, n, D)
    assert rep["counted"][key] == expected and rep["ok"]


def test_counter_required():
    with pytest.raises(nc.ContractError, match="counting"):
        validate_against_counter(2, 3, 8)


def test_validation_restores_counter():
    with nc.flop_counter.counting() as fc:
        fc.add(7)
        validate_against_counter(2, 4, 8)
        assert fc.count == 7
