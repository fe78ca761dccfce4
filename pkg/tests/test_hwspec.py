"""Spec construction, derived metrics, validation, and JSON round-trips."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_chiplet, make_dram, make_model, make_pe, make_system
from lamosim import hwspec
from lamosim.hwspec import (
    AttnVariant,
    ConfigError,
    Role,
    SystemValidationError,
    derive_chiplet_metrics,
    parse_model,
    parse_system,
    validate_system,
)


def test_dram_invariants():
    with pytest.raises(ConfigError):
        make_dram(n_layer=0)
    with pytest.raises(ConfigError):
        make_dram(capacity_bytes=12345)  # not divisible over banks
    with pytest.raises(ConfigError):
        make_dram(t_rfc_ns=5000.0)  # refresh saturates at base temp


def test_pe_invariants():
    with pytest.raises(ConfigError):
        make_pe(base_sa_rows=5)  # must divide sa_rows
    assert make_pe(base_sa_rows=8).n_base_sa == 4


def test_peak_flops_formula():
    # 4 PEs x 1 core x 2 x 32 x 32 x 1 GHz
    m = derive_chiplet_metrics(make_chiplet())
    assert m.peak_flops == pytest.approx(4 * 1 * 2 * 32 * 32 * 1e9)


def test_peak_bw_formula():
    # 2 layers x 8 banks x 64 bits x 2 GHz / 8
    m = derive_chiplet_metrics(make_chiplet())
    assert m.peak_bw_bytes == pytest.approx(2 * 8 * 64 * 2e9 / 8)
    assert m.ai_knee == pytest.approx(m.peak_flops / m.peak_bw_bytes)


@settings(max_examples=30, deadline=None)
@given(cores=st.integers(1, 8), layers=st.integers(1, 8))
def test_metrics_monotone(cores, layers):
    base = make_chiplet()
    more_cores = make_chiplet(pe=make_pe(n_core=cores + 1))
    fewer_cores = make_chiplet(pe=make_pe(n_core=cores))
    assert derive_chiplet_metrics(more_cores).peak_flops >= \
        derive_chiplet_metrics(fewer_cores).peak_flops
    per_bank = 16 << 20
    d1 = make_dram(n_layer=layers, capacity_bytes=layers * 8 * per_bank)
    d2 = make_dram(n_layer=layers + 1, capacity_bytes=(layers + 1) * 8 * per_bank)
    m1 = derive_chiplet_metrics(make_chiplet(dram=d1))
    m2 = derive_chiplet_metrics(make_chiplet(dram=d2))
    assert m2.peak_bw_bytes >= m1.peak_bw_bytes
    assert m2.capacity_bytes >= m1.capacity_bytes
    assert derive_chiplet_metrics(base).peak_power_w > 0


def test_validate_power_exceeded():
    bad = make_chiplet(tdp_w=1.0)
    sys_spec = make_system(chiplet_types={"pc": bad}, placement={(0, 0): "pc"})
    with pytest.raises(SystemValidationError) as e:
        validate_system(sys_spec)
    kinds = {v.kind for v in e.value.violations}
    assert hwspec.POWER_EXCEEDED in kinds


def test_validate_area_exceeded():
    bad = make_chiplet(area_budget_mm2=10.0)
    sys_spec = make_system(chiplet_types={"pc": bad}, placement={(0, 0): "pc"})
    with pytest.raises(SystemValidationError) as e:
        validate_system(sys_spec)
    assert any(v.kind == hwspec.AREA_EXCEEDED for v in e.value.violations)


def test_validate_collects_all_violations():
    bad = make_chiplet(tdp_w=1.0, area_budget_mm2=10.0)
    sys_spec = make_system(chiplet_types={"pc": bad}, placement={(0, 0): "pc"})
    with pytest.raises(SystemValidationError) as e:
        validate_system(sys_spec)
    kinds = [v.kind for v in e.value.violations]
    assert hwspec.POWER_EXCEEDED in kinds and hwspec.AREA_EXCEEDED in kinds


def test_validate_ok_populates_metrics(system):
    v = validate_system(system)
    assert set(v.metrics) == {"pc", "dc"}
    assert len(v.prefill_coords) == 2 and len(v.decode_coords) == 2
    assert v.total_peak_power_w > 0


def test_weights_must_fit_pool(system):
    huge = make_model(n_layers=4096, n_heads=64, n_kv_heads=64, d_head=128,
                      d_model=8192, d_ffn=32768)
    with pytest.raises(SystemValidationError) as e:
        validate_system(system, huge)
    assert any(v.kind == hwspec.INCONSISTENT_CAPACITY for v in e.value.violations)


def test_model_invariants():
    with pytest.raises(ConfigError):
        make_model(d_model=9)  # != heads * d_head
    with pytest.raises(ConfigError):
        make_model(n_kv_heads=3)  # does not divide heads=2
    with pytest.raises(ConfigError):
        make_model(n_heads=4, n_kv_heads=2, d_model=16)  # MHA demands equal counts
    gqa = make_model(n_heads=4, n_kv_heads=2, d_model=16, attn_variant=AttnVariant.GQA)
    assert gqa.kv_bytes_per_token() == 2 * 2 * 2 * 4 * 2


def test_kv_footprint_formula(tiny_model):
    # 2 (K and V) x layers x kv heads x d_head x dtype
    assert tiny_model.kv_bytes_per_token() == 2 * 2 * 2 * 4 * 2


def test_weight_bytes_by_hand(tiny_model):
    # qkv: 8*(8+2*2*4)=192, o: 64, ffn: 2*8*16=256 -> 512 params/layer
    assert tiny_model.weights_per_layer() == 192 + 64 + 256
    assert tiny_model.weight_bytes() == 2 * 512 * 2


def test_system_json_round_trip(system):
    d = hwspec.system_to_dict(system)
    again = parse_system(d)
    assert hwspec.system_to_dict(again) == d


def test_model_json_round_trip(tiny_model):
    d = hwspec.model_to_dict(tiny_model)
    assert hwspec.model_to_dict(parse_model(d)) == d


def test_unknown_fields_rejected(system):
    d = hwspec.system_to_dict(system)
    d["surprise"] = 1
    with pytest.raises(ConfigError):
        parse_system(d)
    m = hwspec.model_to_dict(make_model())
    m["n_layer"] = 3  # misspelled field
    with pytest.raises(ConfigError):
        parse_model(m)


def test_schema_version_checked(system):
    d = hwspec.system_to_dict(system)
    d["schema"] = 2
    with pytest.raises(ConfigError):
        parse_system(d)


def test_duplicate_placement_rejected(system):
    d = hwspec.system_to_dict(system)
    d["placement"].append(dict(d["placement"][0]))
    with pytest.raises(ConfigError):
        parse_system(d)
