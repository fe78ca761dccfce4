"""Design-space search against brute-force oracles on small spaces."""

from __future__ import annotations

import math
import random
from multiprocessing.pool import ThreadPool

import pytest

from conftest import make_chiplet, make_dram, make_model, make_system
from lamosim import dse, ops
from lamosim.hwspec import ConfigError, Role, derive_chiplet_metrics
from lamosim.mapping import CapacityExceeded
from lamosim.serving import SimConfig, synth_trace


# --- Pareto utilities ---------------------------------------------------------


def brute_front(points):
    """O(n^2) reference: keep p unless some q is >= everywhere and > somewhere."""
    out = []
    for p in points:
        dominated = any(
            all(qi >= pi for qi, pi in zip(q, p))
            and any(qi > pi for qi, pi in zip(q, p))
            for q in points)
        if not dominated:
            out.append(p)
    return out


def test_pareto_front_matches_brute_force():
    rng = random.Random(5)
    pts = [tuple(rng.randint(1, 9) for _ in range(3)) for _ in range(60)]
    got = dse.pareto_front(pts, key=lambda p: p)
    assert sorted(got) == sorted(brute_front(pts))


def test_epsilon_retained_superset_of_front():
    rng = random.Random(6)
    pts = [tuple(rng.uniform(1.0, 9.0) for _ in range(3)) for _ in range(40)]
    front = dse.pareto_front(pts, key=lambda p: p)
    near = dse.epsilon_retained(pts, key=lambda p: p, eps=0.05)
    assert set(front) <= set(near)


def test_epsilon_margin_by_hand():
    a, b = (10.0, 10.0, 1.0), (9.0, 9.0, 0.9)
    # a exceeds b by >5% in every dimension, so b falls out at eps=0.05
    assert dse.epsilon_retained([a, b], key=lambda p: p, eps=0.05) == [a]
    # at eps=0.2 the required margin (10.8, ...) is not met and b survives
    assert dse.epsilon_retained([a, b], key=lambda p: p, eps=0.2) == [a, b]
    with pytest.raises(ValueError):
        dse.epsilon_retained([a], key=lambda p: p, eps=-0.1)


def test_ties_never_eliminate_each_other():
    pts = [(1.0, 1.0), (1.0, 1.0)]
    assert dse.epsilon_retained(pts, key=lambda p: p, eps=0.05) == pts
    assert dse.pareto_front(pts, key=lambda p: p) == pts


# --- sampling -----------------------------------------------------------------


def test_stratified_samples_cover_every_axis_evenly():
    domain = {"a": (1, 2, 3), "b": (10, 20)}
    n = 12
    samples = dse.stratified_samples(domain, n, seed=1)
    assert len(samples) == n
    for key, vals in domain.items():
        counts = {v: sum(1 for s in samples if s[key] == v) for v in vals}
        assert all(c == n // len(vals) for c in counts.values())


def test_stratified_samples_deterministic():
    domain = {"a": (1, 2, 3), "b": (10, 20)}
    assert dse.stratified_samples(domain, 7, seed=9) == \
        dse.stratified_samples(domain, 7, seed=9)


@pytest.mark.parametrize("n,dims", [(4, (2, 2)), (6, (2, 3)), (9, (3, 3)),
                                    (10, (2, 5)), (18, (3, 6)), (25, (5, 5))])
def test_grid_dims(n, dims):
    assert dse._grid_dims(n) == dims


# --- chiplet sweep ------------------------------------------------------------


def _sample(**over):
    base = dict(n_io_bits=64, capacity_gb=1, n_layer=2, n_bank=8,
                page_bytes=2048, n_core=2, n_pe=4, sram_banks=8, sram_kb=256,
                sa_rows=32, sa_cols=32, base_sa_rows=8, vector_regs=32,
                noc_flit_bits=512)
    base.update(over)
    return base


def test_chiplet_from_sample_maps_fields():
    base = make_chiplet()
    c = dse.chiplet_from_sample(base, _sample())
    assert (c.pe_rows, c.pe_cols) == (2, 2)
    assert c.dram.capacity_bytes == 1 << 30
    assert c.pe.sram_capacity_bytes == 256 * 1024
    # 2 layers x 8 banks = 16 channels over 4 PEs
    assert c.pe.n_mc == 4
    # untouched constants come from the base spec
    assert c.clock_hz == base.clock_hz
    assert c.dram.t_rfc_ns == base.dram.t_rfc_ns


def test_chiplet_from_sample_rejects_inconsistent_combos():
    base = make_chiplet()
    with pytest.raises(ValueError):
        # 1 layer x 8 banks = 8 channels cannot feed 25 PEs
        dse.chiplet_from_sample(base, _sample(n_layer=1, n_pe=25))
    with pytest.raises(ConfigError):
        # 1 GiB does not split over 3 x 8 banks
        dse.chiplet_from_sample(base, _sample(n_layer=3))


def test_chiplet_dse_front_matches_brute_force():
    res = dse.chiplet_dse(make_chiplet(), n_samples=120, seed=3)
    assert res.valid, "sweep produced no valid candidates"
    by_cap = {}
    for c in res.valid:
        by_cap.setdefault(c.dram.capacity_bytes, []).append(c)
    want = set()
    for group in by_cap.values():
        objs = {c: (derive_chiplet_metrics(c).peak_flops,
                    derive_chiplet_metrics(c).peak_bw_bytes,
                    1.0 / derive_chiplet_metrics(c).peak_power_w)
                for c in group}
        for c in group:
            dominated = any(
                all(q >= p for q, p in zip(objs[d], objs[c]))
                and any(q > p for q, p in zip(objs[d], objs[c]))
                for d in group if d is not c)
            if not dominated:
                want.add(c)
    assert set(res.front) == want
    assert set(res.front) <= set(res.retained)
    assert len(res.valid) + sum(res.rejects.values()) <= res.sampled


def test_chiplet_dse_deterministic():
    a = dse.chiplet_dse(make_chiplet(), n_samples=50, seed=7)
    b = dse.chiplet_dse(make_chiplet(), n_samples=50, seed=7)
    assert a == b


# --- plan selection -----------------------------------------------------------


def test_phase_score_prefers_deep_pipeline_for_decode_only(system, tiny_model):
    # same shard cost per layer; prefill pays a handoff for pp=2 while decode
    # halves its beat period
    pre1 = dse._phase_score(system, tiny_model, Role.PREFILL,
                            ops.Phase.PREFILL, 1, 1, 8, 8, 65.0)
    pre2 = dse._phase_score(system, tiny_model, Role.PREFILL,
                            ops.Phase.PREFILL, 1, 2, 8, 8, 65.0)
    dec1 = dse._phase_score(system, tiny_model, Role.DECODE,
                            ops.Phase.DECODE, 1, 1, 4, 8, 65.0)
    dec2 = dse._phase_score(system, tiny_model, Role.DECODE,
                            ops.Phase.DECODE, 1, 2, 4, 8, 65.0)
    assert pre2 > pre1
    assert dec2 < dec1
    assert dec2 == pytest.approx(dec1 / 2)


def test_phase_score_none_when_shape_cannot_fit(system):
    fat = make_model(n_layers=80, n_heads=32, n_kv_heads=32, d_head=128,
                     d_model=4096, d_ffn=16384)
    s = dse._phase_score(system, fat, Role.PREFILL, ops.Phase.PREFILL,
                         8, 1, 8, 8, 65.0)
    assert s is None


def test_search_plan_builds_the_ranked_winner(system, tiny_model):
    choice = dse.search_plan(system, tiny_model, ref_prefill_tokens=8,
                             ref_decode_ctx=8, ref_decode_batch=4)
    assert choice.plan.prefill.tp == choice.prefill_tp
    assert choice.plan.prefill.pp == choice.prefill_pp
    assert choice.plan.decode.tp == choice.decode_tp
    assert choice.plan.decode.pp == choice.decode_pp
    assert choice.prefill_score_s > 0 and choice.decode_score_s > 0


def test_search_plan_kv_headroom_recomputed_by_hand(system, tiny_model):
    choice = dse.search_plan(system, tiny_model, ref_prefill_tokens=8,
                             ref_decode_ctx=8, ref_decode_batch=4)
    per_layer_w = tiny_model.weights_per_layer() * tiny_model.dtype_bytes
    want = None
    dec = choice.plan.decode
    for (lo, hi), members in zip(dec.layer_bounds, dec.stage_members):
        cap = sum(system.chiplet_at(m.chip).dram.capacity_bytes
                  // system.chiplet_at(m.chip).n_pe for m in members)
        b = (cap - (hi - lo) * per_layer_w) * tiny_model.n_layers // (hi - lo)
        want = b if want is None else min(want, b)
    assert choice.kv_budget_bytes == want


def test_search_plan_explicit_budget_is_passed_through(system, tiny_model):
    choice = dse.search_plan(system, tiny_model, kv_budget_decode_bytes=1 << 20,
                             ref_prefill_tokens=8, ref_decode_ctx=8,
                             ref_decode_batch=4)
    assert choice.kv_budget_bytes == 1 << 20


def test_search_plan_raises_when_nothing_fits(system):
    fat = make_model(n_layers=80, n_heads=32, n_kv_heads=32, d_head=128,
                     d_model=4096, d_ffn=16384)
    with pytest.raises(CapacityExceeded):
        dse.search_plan(system, fat)


def test_search_plan_deterministic(system, tiny_model):
    a = dse.search_plan(system, tiny_model, ref_prefill_tokens=8,
                        ref_decode_ctx=8, ref_decode_batch=4)
    b = dse.search_plan(system, tiny_model, ref_prefill_tokens=8,
                        ref_decode_ctx=8, ref_decode_batch=4)
    assert a == b


# --- system search ------------------------------------------------------------


def _trace():
    return synth_trace("custom", 6, 50.0, 11, mean_input=6, mean_output=4)


def _candidates():
    pc_fast = make_chiplet(Role.PREFILL)
    pc_slow = make_chiplet(Role.PREFILL, clock_hz=0.5e9)
    dc_dram = make_dram(n_layer=4, capacity_bytes=4 * 8 * (16 << 20))
    dc_fast = make_chiplet(Role.DECODE, dram=dc_dram)
    dc_slow = make_chiplet(Role.DECODE, dram=dc_dram, clock_hz=0.5e9)
    return [pc_fast, pc_slow], [dc_fast, dc_slow]


def test_build_system_layout():
    pcs, dcs = _candidates()
    spec = dse.build_system(make_system(), pcs[0], dcs[0], 2, 2)
    assert spec.placement == {(0, 0): "pc", (1, 0): "pc",
                              (0, 1): "dc", (1, 1): "dc"}
    assert spec.chiplet_types["pc"].role is Role.PREFILL
    assert spec.chiplet_types["dc"].role is Role.DECODE
    # interconnect and rack limits inherited from the template
    assert spec.rack_power_limit_w == make_system().rack_power_limit_w


def test_evaluate_design_feasible_run():
    pcs, dcs = _candidates()
    ev = dse.evaluate_design(
        dse.DesignPoint(pc=0, dc=0, n_pc=2, n_dc=2),
        pc_candidates=pcs, dc_candidates=dcs, template=make_system(),
        model=make_model(), trace=_trace(), slo=dse.Slo())
    assert ev.feasible and not ev.violations and ev.simulated
    assert ev.tokens_per_joule > 0
    assert ev.t_max_c > 45.0
    assert math.isfinite(ev.peak_power_w)


def test_evaluate_design_slo_violation():
    pcs, dcs = _candidates()
    ev = dse.evaluate_design(
        dse.DesignPoint(pc=0, dc=0, n_pc=2, n_dc=2),
        pc_candidates=pcs, dc_candidates=dcs, template=make_system(),
        model=make_model(), trace=_trace(), slo=dse.Slo(ttft_p95_s=1e-15))
    assert not ev.feasible and "TtftSlo" in ev.violations and ev.simulated


def test_evaluate_design_static_rejection_is_free():
    pcs, dcs = _candidates()
    pcs = [make_chiplet(Role.PREFILL, tdp_w=1.0)]
    ev = dse.evaluate_design(
        dse.DesignPoint(pc=0, dc=0, n_pc=2, n_dc=2),
        pc_candidates=pcs, dc_candidates=dcs, template=make_system(),
        model=make_model(), trace=_trace(), slo=dse.Slo())
    assert not ev.feasible and "PowerExceeded" in ev.violations
    assert not ev.simulated


def test_system_dse_exhaustive_matches_brute_force():
    pcs, dcs = _candidates()
    counts = [(2, 2), (1, 3)]
    res = dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                         counts, dse.Slo(), budget=16, seed=0)
    assert res.exhaustive and res.recheck_ok
    assert len(res.evaluated) == len(pcs) * len(dcs) * len(counts)
    # brute force over the same space with the same evaluator
    best = None
    for i in range(len(pcs)):
        for j in range(len(dcs)):
            for n_pc, n_dc in counts:
                ev = dse.evaluate_design(
                    dse.DesignPoint(pc=i, dc=j, n_pc=n_pc, n_dc=n_dc),
                    pc_candidates=pcs, dc_candidates=dcs,
                    template=make_system(), model=make_model(),
                    trace=_trace(), slo=dse.Slo())
                key = (ev.feasible, ev.tokens_per_joule)
                if best is None or key > best[0]:
                    best = (key, ev)
    assert res.best.point == best[1].point
    assert res.best.tokens_per_joule == best[1].tokens_per_joule


def test_system_dse_threaded_map_matches_serial():
    pcs, dcs = _candidates()
    counts = [(2, 2), (1, 3)]
    serial = dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                            counts, dse.Slo(), budget=16, seed=0)
    with ThreadPool(3) as pool:
        threaded = dse.system_dse(make_system(), make_model(), _trace(), pcs,
                                  dcs, counts, dse.Slo(), budget=16, seed=0,
                                  map_fn=pool.map)
    assert serial == threaded


def test_system_dse_budgeted_path():
    pcs, dcs = _candidates()
    counts = [(2, 2), (1, 3)]
    res = dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                         counts, dse.Slo(), budget=6, seed=0, wave=2)
    assert not res.exhaustive
    assert res.sim_count <= 6
    assert res.best.feasible
    again = dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                           counts, dse.Slo(), budget=6, seed=0, wave=2)
    assert res == again


def test_system_dse_no_feasible_design_histogram():
    pcs, dcs = _candidates()
    with pytest.raises(dse.NoFeasibleDesign) as exc:
        dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                       [(2, 2)], dse.Slo(ttft_p95_s=1e-15), budget=8, seed=0)
    assert exc.value.histogram.get("TtftSlo", 0) >= 1


def test_system_dse_budget_guard():
    pcs, dcs = _candidates()
    with pytest.raises(ValueError):
        dse.system_dse(make_system(), make_model(), _trace(), pcs, dcs,
                       [(2, 2)], dse.Slo(), budget=1, seed=0)
