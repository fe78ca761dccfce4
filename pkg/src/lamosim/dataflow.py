"""Decode/prefill dataflow search: joint tiling x reuse-policy optimization.

For a GEMM on one PE, the search enumerates power-of-two tile candidates per
dimension (plus the exact dimension) and, for each tiling, every reuse policy
whose SRAM footprint fits:

    INPUT_REUSE   stage A tiles   t_m * t_k * dtype <= sram
    WEIGHT_REUSE  stage B tiles   t_n * t_k * dtype <= sram
    OUTPUT_REUSE  stage C tiles   t_m * t_n * dtype <= sram
    ALL_REUSE     stage all three (sum of the three footprints) <= sram

Cost model (stationary-operand accounting): the staged operand class is
fetched from DRAM exactly once; streamed operands are re-fetched per tile
pass; an unstaged C pays read+write partial traffic per k-step. Latency
overlaps compute with streamed DRAM traffic and adds the staged load time on
top (double buffering hides it behind neither flow entirely).

The search is exhaustive over the candidate space and deterministic: ties
break toward lower energy, then lexicographically smaller (t_m, t_n, t_k),
then policy declaration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .compute import ComputeCost, GemmShape, TileMapping, gemm_cycles
from .dram import AccessKind, MemRequest, mem_access_time
from .hwspec import DramStackSpec, PeSpec


class NoFeasibleMapping(Exception):
    """No (tiling, policy) pair fits the PE's SRAM."""


class ReusePolicy(Enum):
    INPUT_REUSE = "input"
    WEIGHT_REUSE = "weight"
    OUTPUT_REUSE = "output"
    ALL_REUSE = "all"


_POLICY_ORDER = {p: i for i, p in enumerate(ReusePolicy)}


@dataclass(frozen=True)
class MappingCost:
    latency_s: float
    energy_j: float
    compute: ComputeCost
    dram_bytes: int


@dataclass(frozen=True)
class DataflowResult:
    policy: ReusePolicy
    tiling: TileMapping
    cost: MappingCost
    search_space_size: int
    evaluated: int


def _pow2_candidates(dim: int) -> list[int]:
    """Powers of two up to dim, plus dim itself; ascending."""
    vals = [1 << i for i in range(dim.bit_length()) if (1 << i) <= dim]
    if vals[-1] != dim:
        vals.append(dim)
    return vals


def enumerate_tilings(shape: GemmShape, pe: PeSpec) -> list[TileMapping]:
    """Candidate tilings in lexicographic (t_m, t_n, t_k) order."""
    return [
        TileMapping(tm, tn, tk)
        for tm in _pow2_candidates(shape.m)
        for tn in _pow2_candidates(shape.n)
        for tk in _pow2_candidates(shape.k)
    ]


def staged_tile_bytes(policy: ReusePolicy, t: TileMapping, dtype_bytes: int) -> int:
    a = t.t_m * t.t_k
    b = t.t_n * t.t_k
    c = t.t_m * t.t_n
    if policy is ReusePolicy.INPUT_REUSE:
        elems = a
    elif policy is ReusePolicy.WEIGHT_REUSE:
        elems = b
    elif policy is ReusePolicy.OUTPUT_REUSE:
        elems = c
    else:
        elems = a + b + c
    return elems * dtype_bytes


def feasible_policies(t: TileMapping, sram_bytes: int, dtype_bytes: int) -> list[ReusePolicy]:
    """Policies whose staged footprint fits the SRAM, in declaration order."""
    return [
        p for p in ReusePolicy
        if staged_tile_bytes(p, t, dtype_bytes) <= sram_bytes
    ]


def _traffic_elems(policy: ReusePolicy, shape: GemmShape, t: TileMapping) -> tuple[int, int]:
    """(staged_elems, streamed_elems) moved between DRAM and the PE."""
    nm = math.ceil(shape.m / t.t_m)
    nn = math.ceil(shape.n / t.t_n)
    nk = math.ceil(shape.k / t.t_k)
    a_once = shape.m * shape.k
    b_once = shape.n * shape.k
    c_once = shape.m * shape.n
    a_stream = a_once * nn
    b_stream = b_once * nm
    c_stream = c_once * (2 * nk - 1)  # partial read+write per k-step, final write
    if policy is ReusePolicy.INPUT_REUSE:
        return a_once, b_stream + c_stream
    if policy is ReusePolicy.WEIGHT_REUSE:
        return b_once, a_stream + c_stream
    if policy is ReusePolicy.OUTPUT_REUSE:
        return c_once, a_stream + b_stream
    return a_once + b_once + c_once, 0


def evaluate_mapping(shape: GemmShape, policy: ReusePolicy, tiling: TileMapping,
                     pe: PeSpec, dram: DramStackSpec, temp_c: float,
                     clock_hz: float, dtype_bytes: int) -> MappingCost:
    """Latency/energy of one (policy, tiling) candidate on one PE.

    The PE streams over its own DRAM channel slice (n_mc channels).
    """
    comp = gemm_cycles(shape, tiling, pe)
    compute_s = comp.cycles / clock_hz
    staged_e, streamed_e = _traffic_elems(policy, shape, tiling)
    staged_bits = staged_e * dtype_bytes * 8
    streamed_bits = streamed_e * dtype_bytes * 8
    stream_s = 0.0
    energy = comp.energy_j
    if streamed_bits:
        mc = mem_access_time(
            MemRequest(streamed_bits, AccessKind.READ, pe.n_mc), dram, temp_c)
        stream_s = mc.latency_s
        energy += mc.energy_j
    staged_s = 0.0
    if staged_bits:
        mc = mem_access_time(
            MemRequest(staged_bits, AccessKind.READ, pe.n_mc), dram, temp_c)
        staged_s = mc.latency_s
        energy += mc.energy_j
    latency = max(compute_s, stream_s) + staged_s
    return MappingCost(
        latency_s=latency,
        energy_j=energy,
        compute=comp,
        dram_bytes=(staged_e + streamed_e) * dtype_bytes,
    )


def search(shape: GemmShape, pe: PeSpec, dram: DramStackSpec, temp_c: float, *,
           clock_hz: float, dtype_bytes: int = 2,
           policies: tuple[ReusePolicy, ...] = tuple(ReusePolicy)) -> DataflowResult:
    """Exhaustive search over (tiling, policy) candidates, minimizing latency.

    Restricting `policies` turns the search into a fixed-policy baseline.
    Raises NoFeasibleMapping when nothing fits the SRAM.
    """
    tilings = enumerate_tilings(shape, pe)
    space = len(tilings) * len(policies)
    evaluated = 0
    best: tuple[float, float, tuple[int, int, int], int] | None = None
    best_result: tuple[ReusePolicy, TileMapping, MappingCost] | None = None
    for t in tilings:
        for p in policies:
            if staged_tile_bytes(p, t, dtype_bytes) > pe.sram_capacity_bytes:
                continue
            cost = evaluate_mapping(shape, p, t, pe, dram, temp_c,
                                    clock_hz, dtype_bytes)
            evaluated += 1
            key = (cost.latency_s, cost.energy_j, (t.t_m, t.t_n, t.t_k), _POLICY_ORDER[p])
            if best is None or key < best:
                best = key
                best_result = (p, t, cost)
    if best_result is None:
        raise NoFeasibleMapping(
            f"no (tiling, policy) fits {pe.sram_capacity_bytes} B SRAM for "
            f"GEMM ({shape.m},{shape.n},{shape.k}) at dtype {dtype_bytes} B")
    p, t, cost = best_result
    return DataflowResult(policy=p, tiling=t, cost=cost,
                          search_space_size=space, evaluated=evaluated)
