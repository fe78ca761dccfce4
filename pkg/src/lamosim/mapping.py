"""Tensor-parallel PE grouping and pipeline-stage placement.

Grouping solves, over a pool of PE coordinates, the partition of floor(P/tp)
ordered groups of exactly tp PEs each (spares stay idle) minimizing

    J = sum_k span(k) + w_inter * sum_k dist(center_k, center_{k+1})

where span is the bounding-box half-perimeter (x extent + y extent) and
centers are bounding-box midpoints. The solver is exact branch-and-bound up
to `exact_limit` PEs (greedy box-tiling incumbent, per-group span lower
bounds, reversal symmetry break; with w_inter == 0 full label symmetry is
broken instead by pinning the lowest PE into the first group). Larger pools
fall back to the greedy tiler plus pairwise-swap refinement and report
proven_optimal=False.

Stage placement assigns pipeline stages to groups by simulated annealing over
swap/move neighborhoods (geometric cooling, never worse than its greedy
start). Plan assembly pairs prefill groups with decode KV owners and checks
every stage's weight shard plus KV budget against the group's DRAM slice.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass

from . import comm, dataflow, ops
from .compute import CostLut, vpu_cycles
from .comm import CollectiveKind, MeshCoord, collective_cost, link_delay, manhattan
from .hwspec import ChipletSpec, ModelSpec, Role, SystemSpec

Coord = tuple[int, int]


class EmptyGroup(ValueError):
    """Pool too small to form a single group of the requested size."""


class TooManyStages(ValueError):
    """More pipeline stages than available groups."""


class CapacityExceeded(Exception):
    """A stage's weights plus KV budget overflow its group's DRAM slice."""


@dataclass(frozen=True)
class TpGrouping:
    """Ordered chain of equal-size index groups over the input coords."""

    coords: tuple[Coord, ...]
    groups: tuple[tuple[int, ...], ...]
    spares: tuple[int, ...]
    objective: float
    proven_optimal: bool

    def member_coords(self, k: int) -> tuple[Coord, ...]:
        return tuple(self.coords[i] for i in self.groups[k])


def _span(coords: list[Coord]) -> int:
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    return (max(xs) - min(xs)) + (max(ys) - min(ys))


def _center(coords: list[Coord]) -> tuple[float, float]:
    xs = [c[0] for c in coords]
    ys = [c[1] for c in coords]
    return (min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0


def _cdist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def grouping_objective(coords: list[Coord], groups: list[tuple[int, ...]],
                       w_inter: float) -> float:
    total = 0.0
    centers = []
    for g in groups:
        pts = [coords[i] for i in g]
        total += _span(pts)
        centers.append(_center(pts))
    for a, b in zip(centers, centers[1:]):
        total += w_inter * _cdist(a, b)
    return total


def _min_span(tp: int) -> int:
    """Smallest bounding-box half-perimeter any tp grid points can have."""
    best = tp - 1
    for w in range(1, tp + 1):
        h = math.ceil(tp / w)
        best = min(best, (w - 1) + (h - 1))
    return best


def _greedy_groups(coords: list[Coord], tp: int, k: int) -> list[tuple[int, ...]]:
    """Box-tile the pool row-major into tp-sized groups, boustrophedon chain."""
    best_wh = (tp, 1)
    best_s = tp - 1
    for w in range(1, tp + 1):
        if tp % w:
            continue
        h = tp // w
        s = (w - 1) + (h - 1)
        if s < best_s or (s == best_s and w > best_wh[0]):
            best_wh, best_s = (w, h), s
    w, h = best_wh
    order = sorted(range(len(coords)),
                   key=lambda i: (coords[i][1] // h, coords[i][0] // w,
                                  coords[i][1], coords[i][0]))
    groups = [tuple(sorted(order[j * tp:(j + 1) * tp])) for j in range(k)]
    # Chain groups greedily by center proximity (nearest neighbor).
    remaining = list(range(k))
    chain = [remaining.pop(0)]
    centers = [_center([coords[i] for i in g]) for g in groups]
    while remaining:
        last = centers[chain[-1]]
        nxt = min(remaining, key=lambda gi: (_cdist(last, centers[gi]), gi))
        remaining.remove(nxt)
        chain.append(nxt)
    return [groups[gi] for gi in chain]


def _swap_refine(coords: list[Coord], groups: list[tuple[int, ...]],
                 w_inter: float, max_rounds: int = 20) -> list[tuple[int, ...]]:
    """First-improvement pairwise member swaps until a local optimum."""
    groups = [list(g) for g in groups]
    for _ in range(max_rounds):
        improved = False
        base = grouping_objective(coords, [tuple(sorted(g)) for g in groups], w_inter)
        for ka, kb in itertools.combinations(range(len(groups)), 2):
            for ia in range(len(groups[ka])):
                for ib in range(len(groups[kb])):
                    groups[ka][ia], groups[kb][ib] = groups[kb][ib], groups[ka][ia]
                    trial = grouping_objective(
                        coords, [tuple(sorted(g)) for g in groups], w_inter)
                    if trial < base - 1e-12:
                        base = trial
                        improved = True
                    else:
                        groups[ka][ia], groups[kb][ib] = groups[kb][ib], groups[ka][ia]
        if not improved:
            break
    return [tuple(sorted(g)) for g in groups]


def _exact_groups(coords: list[Coord], tp: int, k: int, w_inter: float,
                  incumbent: list[tuple[int, ...]]) -> list[tuple[int, ...]]:
    """Depth-first branch and bound over ordered group chains."""
    n = len(coords)
    best_obj = grouping_objective(coords, incumbent, w_inter)
    best = list(incumbent)
    lb_group = _min_span(tp)
    pin_first = w_inter == 0.0  # label symmetry: lowest PE opens the chain

    combo_cache: dict[frozenset[int], list[tuple[tuple[int, ...], int, tuple[float, float]]]] = {}

    def combos_from(avail: frozenset[int]) -> list[tuple[tuple[int, ...], int, tuple[float, float]]]:
        got = combo_cache.get(avail)
        if got is None:
            got = []
            for c in itertools.combinations(sorted(avail), tp):
                pts = [coords[i] for i in c]
                got.append((c, _span(pts), _center(pts)))
            got.sort(key=lambda t: (t[1], t[0]))
            combo_cache[avail] = got
        return got

    chain: list[tuple[int, ...]] = []

    def dfs(avail: frozenset[int], cost: float, prev_center: tuple[float, float] | None) -> None:
        nonlocal best_obj, best
        depth = len(chain)
        if depth == k:
            # Reversal symmetry: the mirrored chain has equal cost.
            if k > 1 and min(chain[0]) > min(chain[-1]):
                return
            if cost < best_obj - 1e-12:
                best_obj = cost
                best = list(chain)
            return
        remaining_lb = (k - depth) * lb_group
        if cost + remaining_lb >= best_obj - 1e-12:
            return
        for c, span, center in combos_from(avail):
            if pin_first and depth == 0 and c[0] != min(avail):
                continue
            step = span + (w_inter * _cdist(prev_center, center) if prev_center else 0.0)
            new_cost = cost + step
            if new_cost + (k - depth - 1) * lb_group >= best_obj - 1e-12:
                if prev_center is None:
                    break  # combos sorted by span: no later one can be cheaper
                continue
            chain.append(c)
            dfs(avail - frozenset(c), new_cost, center)
            chain.pop()

    dfs(frozenset(range(n)), 0.0, None)
    return best


def tp_group(coords: list[Coord], tp: int, w_inter: float = 0.5, *,
             exact_limit: int = 10) -> TpGrouping:
    """Partition a PE pool into floor(P/tp) chained groups of tp PEs.

    Exact (branch and bound) up to exact_limit PEs; greedy tiling plus swap
    refinement beyond that, flagged via proven_optimal.
    """
    if tp < 1:
        raise ValueError("tp must be >= 1")
    if len(set(coords)) != len(coords):
        raise ValueError("duplicate PE coordinates in pool")
    p = len(coords)
    k = p // tp
    if k == 0:
        raise EmptyGroup(f"pool of {p} PEs cannot form a group of {tp}")
    coords = list(coords)
    greedy = _greedy_groups(coords, tp, k)
    if p <= exact_limit:
        groups = _exact_groups(coords, tp, k, w_inter, greedy)
        proven = True
    else:
        groups = _swap_refine(coords, greedy, w_inter)
        proven = False
    assigned = set(itertools.chain.from_iterable(groups))
    spares = tuple(sorted(set(range(p)) - assigned))
    return TpGrouping(
        coords=tuple(coords),
        groups=tuple(tuple(sorted(g)) for g in groups),
        spares=spares,
        objective=grouping_objective(coords, list(groups), w_inter),
        proven_optimal=proven,
    )


# --- pipeline stage placement -----------------------------------------------


@dataclass(frozen=True)
class StagePlacement:
    """Injective stage -> group assignment with its objective history."""

    stage_groups: tuple[int, ...]
    layer_bounds: tuple[tuple[int, int], ...]  # [lo, hi) per stage
    objective: float
    greedy_objective: float


def _layer_partition(n_layers: int, n_stages: int) -> list[tuple[int, int]]:
    bounds = [round(i * n_layers / n_stages) for i in range(n_stages + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(n_stages)]


def group_center_coord(members: list[MeshCoord], spec: SystemSpec) -> MeshCoord:
    """The member PE closest to the group's flattened bounding-box center."""
    flats = [flat_xy(m, spec) for m in members]
    cx, cy = _center(flats)
    best = min(zip(flats, members), key=lambda fm: (_cdist(fm[0], (cx, cy)), fm[1]))
    return best[1]


def flat_xy(mc: MeshCoord, spec: SystemSpec) -> Coord:
    """Global grid coordinate: chiplet meshes abut edge to edge."""
    c = spec.chiplet_at(mc.chip)
    return (mc.chip[0] * c.pe_cols + mc.pe[0], mc.chip[1] * c.pe_rows + mc.pe[1])


def pool_pe_coords(spec: SystemSpec, role: Role) -> list[MeshCoord]:
    out = []
    for chip in spec.coords_for_role(role):
        c = spec.chiplet_at(chip)
        for py in range(c.pe_rows):
            for px in range(c.pe_cols):
                out.append(MeshCoord(chip=chip, pe=(px, py)))
    return out


def place_stages(grouping: TpGrouping, pool: list[MeshCoord], n_stages: int,
                 layer_costs: list[float], tp: int, act_bytes: int,
                 kv_bytes_per_stage: int, spec: SystemSpec, seed: int, *,
                 ar_bytes: int = 0, iters_per_temp: int = 200,
                 cooling: float = 0.95) -> StagePlacement:
    """Assign pipeline stages to TP groups, minimizing total stage latency
    plus inter-stage transfer cost.

    layer_costs are full-layer latencies (divided by tp here); each layer adds
    two all-reduces on its group. Annealing uses geometric cooling and never
    returns worse than the greedy assignment it starts from.
    """
    n_groups = len(grouping.groups)
    if n_stages < 1:
        raise ValueError("n_stages must be >= 1")
    if n_stages > n_groups:
        raise TooManyStages(f"{n_stages} stages but only {n_groups} groups")
    if len(layer_costs) < n_stages:
        raise ValueError("need at least one layer per stage")

    members_by_group = [
        [pool[i] for i in g] for g in grouping.groups
    ]
    centers = [group_center_coord(m, spec) for m in members_by_group]
    ar_cost = [
        collective_cost(CollectiveKind.ALLREDUCE, members_by_group[g], centers[g],
                        ar_bytes, spec).latency_s if tp > 1 else 0.0
        for g in range(n_groups)
    ]
    bounds = _layer_partition(len(layer_costs), n_stages)
    stage_compute = []
    for lo, hi in bounds:
        compute = sum(layer_costs[lo:hi]) / tp
        stage_compute.append((compute, hi - lo))
    # stage_cost[s][g]: latency of stage s when mapped onto group g
    stage_cost = [
        [compute + layers * 2 * ar_cost[g] for g in range(n_groups)]
        for compute, layers in stage_compute
    ]
    transfer = [[0.0] * n_groups for _ in range(n_groups)]
    for ga in range(n_groups):
        for gb in range(n_groups):
            if ga == gb:
                continue
            noc, nop = manhattan(centers[ga], centers[gb], spec)
            transfer[ga][gb] = link_delay(act_bytes + kv_bytes_per_stage, noc, nop, spec)

    def objective(assign: list[int]) -> float:
        total = sum(stage_cost[s][g] for s, g in enumerate(assign))
        for s in range(len(assign) - 1):
            total += transfer[assign[s]][assign[s + 1]]
        return total

    # Greedy: stages in order take the best unused group.
    assign: list[int] = []
    used: set[int] = set()
    for s in range(n_stages):
        best_g = min(
            (g for g in range(n_groups) if g not in used),
            key=lambda g: (stage_cost[s][g]
                           + (transfer[assign[-1]][g] if assign else 0.0), g),
        )
        assign.append(best_g)
        used.add(best_g)
    greedy_obj = objective(assign)

    rng = random.Random(seed)
    best = list(assign)
    best_obj = greedy_obj
    cur = list(assign)
    cur_obj = greedy_obj
    t0 = max(greedy_obj * 0.1, 1e-12)
    t = t0
    while t > t0 * 1e-3:
        for _ in range(iters_per_temp):
            trial = list(cur)
            if n_stages >= 2 and (n_groups == n_stages or rng.random() < 0.5):
                i, j = rng.sample(range(n_stages), 2)
                trial[i], trial[j] = trial[j], trial[i]
            else:
                unused = [g for g in range(n_groups) if g not in trial]
                if not unused:
                    continue
                trial[rng.randrange(n_stages)] = unused[rng.randrange(len(unused))]
            trial_obj = objective(trial)
            delta = trial_obj - cur_obj
            if delta <= 0 or rng.random() < math.exp(-delta / t):
                cur, cur_obj = trial, trial_obj
                if cur_obj < best_obj:
                    best, best_obj = list(cur), cur_obj
        t *= cooling
    return StagePlacement(
        stage_groups=tuple(best),
        layer_bounds=tuple(bounds),
        objective=best_obj,
        greedy_objective=greedy_obj,
    )


# --- PD plan assembly ---------------------------------------------------------


@dataclass(frozen=True)
class PhasePlan:
    phase: ops.Phase
    tp: int
    pp: int
    stage_members: tuple[tuple[MeshCoord, ...], ...]  # per stage, shard order
    stage_centers: tuple[MeshCoord, ...]
    layer_bounds: tuple[tuple[int, int], ...]
    objective: float

    def stage_of_layer(self, layer: int) -> int:
        for s, (lo, hi) in enumerate(self.layer_bounds):
            if lo <= layer < hi:
                return s
        raise ValueError(f"layer {layer} outside plan bounds")


@dataclass(frozen=True)
class KvPeer:
    pre_stage: int
    pre_coord: MeshCoord
    dec_stage: int
    dec_coord: MeshCoord
    layer_lo: int
    layer_hi: int


@dataclass(frozen=True)
class PdPlan:
    prefill: PhasePlan
    decode: PhasePlan
    kv_peers: tuple[KvPeer, ...]


_layer_cost_lut = CostLut()


def estimate_layer_costs(model: ModelSpec, chiplet: ChipletSpec, phase: ops.Phase,
                         m_tokens: int, ctx_len: int, temp_c: float,
                         tp: int = 1) -> list[float]:
    """Per-layer latency (compute + DRAM, no collectives) on one PE shard."""
    batch = [(m_tokens, ctx_len)] if phase is ops.Phase.PREFILL else \
        [(1, ctx_len)] * m_tokens
    op_list = ops.layer_ops(model, tp, phase, batch)
    total = 0.0
    for op in op_list:
        if op.kind is ops.OpKind.GEMM:
            key = ("layer", op.shape, chiplet.pe, chiplet.dram, chiplet.clock_hz,
                   round(temp_c, 1), model.dtype_bytes)
            res = _layer_cost_lut.get_or_compute(
                key,
                lambda s=op.shape: dataflow.search(
                    s, chiplet.pe, chiplet.dram, temp_c,
                    clock_hz=chiplet.clock_hz, dtype_bytes=model.dtype_bytes))
            total += res.cost.latency_s
        elif op.kind is ops.OpKind.VPU:
            total += vpu_cycles(op.elements, chiplet.pe) / chiplet.clock_hz
    return [total] * model.n_layers


def _uniform_pool_chiplet(spec: SystemSpec, role: Role) -> ChipletSpec:
    names = {spec.placement[c] for c in spec.coords_for_role(role)}
    if not names:
        raise EmptyGroup(f"no {role.value} chiplets in system")
    if len(names) > 1:
        raise ValueError(f"{role.value} pool mixes chiplet types {sorted(names)}")
    return spec.chiplet_types[next(iter(names))]


def _phase_plan(spec: SystemSpec, model: ModelSpec, role: Role, phase: ops.Phase,
                tp: int, pp: int, temp_c: float, seed: int, *,
                ref_tokens: int, ref_ctx: int, w_inter: float,
                exact_limit: int) -> tuple[PhasePlan, TpGrouping, list[MeshCoord]]:
    pool = pool_pe_coords(spec, role)
    chiplet = _uniform_pool_chiplet(spec, role)
    flats = [flat_xy(m, spec) for m in pool]
    grouping = tp_group(flats, tp, w_inter, exact_limit=exact_limit)
    layer_costs = estimate_layer_costs(model, chiplet, phase, ref_tokens, ref_ctx, temp_c)
    act_bytes = ref_tokens * model.d_model * model.dtype_bytes
    ar_bytes = act_bytes
    placement = place_stages(
        grouping, pool, pp, layer_costs, tp, act_bytes,
        kv_bytes_per_stage=0, spec=spec, seed=seed, ar_bytes=ar_bytes)
    stage_members = tuple(
        tuple(pool[i] for i in grouping.groups[g]) for g in placement.stage_groups
    )
    centers = tuple(group_center_coord(list(m), spec) for m in stage_members)
    return (
        PhasePlan(
            phase=phase, tp=tp, pp=pp,
            stage_members=stage_members,
            stage_centers=centers,
            layer_bounds=placement.layer_bounds,
            objective=placement.objective,
        ),
        grouping,
        pool,
    )


def _group_capacity_bytes(members: tuple[MeshCoord, ...], spec: SystemSpec) -> int:
    """Sum of each member PE's vertical DRAM slice."""
    total = 0
    for m in members:
        c = spec.chiplet_at(m.chip)
        total += c.dram.capacity_bytes // c.n_pe
    return total


def build_pd_plan(spec: SystemSpec, model: ModelSpec, *,
                  tp_prefill: int, pp_prefill: int, tp_decode: int, pp_decode: int,
                  kv_budget_decode_bytes: int, kv_scratch_prefill_bytes: int = 0,
                  temp_c: float = 65.0, seed: int = 0, ref_tokens: int = 512,
                  w_inter: float = 0.5, exact_limit: int = 10) -> PdPlan:
    """Build and validate a disaggregated prefill/decode mapping.

    Every stage's weight shard plus its KV budget share must fit the group's
    DRAM slice; violations raise CapacityExceeded naming the stage.
    """
    prefill, _, _ = _phase_plan(
        spec, model, Role.PREFILL, ops.Phase.PREFILL, tp_prefill, pp_prefill,
        temp_c, seed, ref_tokens=ref_tokens, ref_ctx=ref_tokens,
        w_inter=w_inter, exact_limit=exact_limit)
    decode, _, _ = _phase_plan(
        spec, model, Role.DECODE, ops.Phase.DECODE, tp_decode, pp_decode,
        temp_c, seed + 1, ref_tokens=1, ref_ctx=max(1, ref_tokens),
        w_inter=w_inter, exact_limit=exact_limit)
    n_layers = model.n_layers
    per_layer_w = model.weights_per_layer() * model.dtype_bytes
    for plan, kv_budget in ((prefill, kv_scratch_prefill_bytes),
                            (decode, kv_budget_decode_bytes)):
        for s, (lo, hi) in enumerate(plan.layer_bounds):
            need = (hi - lo) * per_layer_w + kv_budget * (hi - lo) // n_layers
            cap = _group_capacity_bytes(plan.stage_members[s], spec)
            if need > cap:
                raise CapacityExceeded(
                    f"{plan.phase.value} stage {s}: needs {need} B "
                    f"(layers {lo}..{hi}), group slice holds {cap} B")
    peers = []
    for ps, pre_members in enumerate(prefill.stage_members):
        plo, phi = prefill.layer_bounds[ps]
        for ds, dec_members in enumerate(decode.stage_members):
            dlo, dhi = decode.layer_bounds[ds]
            lo, hi = max(plo, dlo), min(phi, dhi)
            if lo >= hi:
                continue
            for i, pre_pe in enumerate(pre_members):
                j = i * tp_decode // tp_prefill
                peers.append(KvPeer(
                    pre_stage=ps, pre_coord=pre_pe,
                    dec_stage=ds, dec_coord=dec_members[j],
                    layer_lo=lo, layer_hi=hi))
    return PdPlan(prefill=prefill, decode=decode, kv_peers=tuple(peers))
