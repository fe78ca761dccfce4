"""Event-driven serving simulator for disaggregated prefill/decode.

Requests flow arrival -> prefill pipeline -> KV migration -> decode pool.
Prefill admits FCFS batches of up to max_prefill_batch requests whenever its
first stage goes idle; a batch traverses the pipeline stages in order, with
activation handoffs between consecutive stage centers. KV pages migrate per
layer as soon as that layer's QKV projection has produced them (all at once
at prefill completion when kv_transfer_at_qkv is off), serialized through one
FIFO per (source chiplet, destination chiplet) pair.

Decode runs iteration-level batching: whenever its first stage goes idle, a
beat forms from every resident request not already in flight (continuous
mode) or from the frozen batch (static mode), each contributing one token
against its own context. Projections batch across the beat; attention runs
per request. Context lengths round up to len_bucket for cost lookups, which
is the same as simulating padded KV pages.

Latency and energy both come from the per-PE dataflow search, the star
collectives, and the link model; the simulator only adds queueing on top.
Prefill itself emits the first token, so ttft is the prefill pipeline exit
and e2e == ttft + sum of decode gaps by construction.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import dataflow, ops
from .comm import CollectiveKind, MeshCoord, collective_cost, link_delay, manhattan
from .compute import CostLut, vpu_cycles
from .dram import effective_bandwidth
from .hwspec import ChipletSpec, ModelSpec, SystemSpec
from .mapping import PdPlan, PhasePlan


class KvOverflow(Exception):
    """A single request's KV exceeds the whole decode KV budget."""


class PlanMismatch(Exception):
    """Plan and model disagree (layer coverage, group sizes, phase roles)."""


@dataclass(frozen=True)
class Request:
    rid: int
    arrival_s: float
    input_len: int
    output_len: int

    def __post_init__(self) -> None:
        if self.input_len < 1 or self.output_len < 1:
            raise ValueError("input_len and output_len must be >= 1")
        if self.arrival_s < 0:
            raise ValueError("arrival_s must be >= 0")


# (mean input tokens, mean output tokens) per workload family
TRACE_MEANS: dict[str, tuple[int, int]] = {
    "code": (2071, 25),
    "reason": (1473, 1293),
    "longbench": (7108, 5),
}

_LEN_SIGMA = 0.5


def synth_trace(source: str, n: int, rate_rps: float, seed: int,
                mean_input: int | None = None,
                mean_output: int | None = None) -> tuple[Request, ...]:
    """Poisson arrivals at rate_rps; lognormal lengths with the family means.

    The lognormal takes mu = ln(mean) - sigma^2/2 so the distribution mean is
    exactly the family mean. source may be any TRACE_MEANS key, or "custom"
    with explicit means.
    """
    if source == "custom":
        if mean_input is None or mean_output is None:
            raise ValueError("custom trace needs mean_input and mean_output")
        mi, mo = mean_input, mean_output
    else:
        try:
            mi, mo = TRACE_MEANS[source]
        except KeyError:
            raise ValueError(f"unknown trace source {source!r}") from None
    if n < 1 or rate_rps <= 0:
        raise ValueError("need n >= 1 and rate_rps > 0")
    rng = np.random.default_rng(seed)
    arrivals = np.cumsum(rng.exponential(1.0 / rate_rps, n))
    mu_i = math.log(mi) - _LEN_SIGMA ** 2 / 2
    mu_o = math.log(mo) - _LEN_SIGMA ** 2 / 2
    ins = rng.lognormal(mu_i, _LEN_SIGMA, n)
    outs = rng.lognormal(mu_o, _LEN_SIGMA, n)
    return tuple(
        Request(rid=i, arrival_s=float(arrivals[i]),
                input_len=max(1, round(float(ins[i]))),
                output_len=max(1, round(float(outs[i]))))
        for i in range(n)
    )


def load_trace_csv(path: str) -> tuple[Request, ...]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return tuple(
        Request(rid=int(r["rid"]), arrival_s=float(r["arrival_s"]),
                input_len=int(r["input_len"]), output_len=int(r["output_len"]))
        for r in rows
    )


def dump_trace_csv(trace: tuple[Request, ...], path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rid", "arrival_s", "input_len", "output_len"])
        for r in trace:
            w.writerow([r.rid, repr(r.arrival_s), r.input_len, r.output_len])


@dataclass(frozen=True)
class SimConfig:
    max_prefill_batch: int = 4
    max_decode_batch: int = 64
    len_bucket: int = 64
    continuous_batching: bool = True
    kv_transfer_at_qkv: bool = True
    kv_budget_bytes: int | None = None

    def __post_init__(self) -> None:
        if self.max_prefill_batch < 1 or self.max_decode_batch < 1:
            raise ValueError("batch limits must be >= 1")
        if self.len_bucket < 1:
            raise ValueError("len_bucket must be >= 1")


@dataclass(frozen=True)
class OpRecord:
    """One executed operator on one PE shard (one layer's worth)."""

    phase: ops.Phase
    kind: str  # "gemm" | "vpu"
    tag: str
    flops: int
    dram_bytes: int
    latency_s: float


@dataclass(frozen=True)
class ActivityInterval:
    """Busy window of one PE, with its energy split for the thermal model."""

    pe: MeshCoord
    start_s: float
    end_s: float
    kind: str  # dominant component: "gemm" | "mem"
    compute_energy_j: float
    dram_energy_j: float


@dataclass(frozen=True)
class RequestMetrics:
    rid: int
    arrival_s: float
    ttft_s: float
    tbt_mean_s: float
    e2e_s: float
    out_tokens: int
    kv_wait_s: float


@dataclass(frozen=True)
class ServingMetrics:
    requests: tuple[RequestMetrics, ...]
    makespan_s: float
    total_tokens: int
    throughput_tok_s: float
    energy_j: float
    tokens_per_joule: float
    kv_overflow: bool
    op_log: tuple[OpRecord, ...]
    activity: tuple[ActivityInterval, ...]

    def ttft_percentile(self, p: float) -> float:
        return _percentile([r.ttft_s for r in self.requests], p)

    def tbt_percentile(self, p: float) -> float:
        vals = [r.tbt_mean_s for r in self.requests if r.out_tokens > 1]
        return _percentile(vals, p) if vals else 0.0

    def e2e_percentile(self, p: float) -> float:
        return _percentile([r.e2e_s for r in self.requests], p)


def _percentile(values: list[float], p: float) -> float:
    """Nearest-rank percentile; p in [0, 100]."""
    if not values:
        raise ValueError("percentile of empty list")
    s = sorted(values)
    k = max(0, min(len(s) - 1, math.ceil(p / 100.0 * len(s)) - 1))
    return s[k]


def summary_dict(m: ServingMetrics) -> dict:
    """Flat scalar summary, for JSON output."""
    has_decode = any(r.out_tokens > 1 for r in m.requests)
    return {
        "requests": len(m.requests),
        "total_tokens": m.total_tokens,
        "makespan_s": m.makespan_s,
        "throughput_tok_s": m.throughput_tok_s,
        "energy_j": m.energy_j,
        "tokens_per_joule": m.tokens_per_joule,
        "kv_overflow": m.kv_overflow,
        "ttft_p50_s": m.ttft_percentile(50) if m.requests else 0.0,
        "ttft_p95_s": m.ttft_percentile(95) if m.requests else 0.0,
        "tbt_p50_s": m.tbt_percentile(50) if has_decode else 0.0,
        "tbt_p95_s": m.tbt_percentile(95) if has_decode else 0.0,
        "e2e_p95_s": m.e2e_percentile(95) if m.requests else 0.0,
    }


def write_request_csv(m: ServingMetrics, path: str) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rid", "arrival_s", "ttft_s", "tbt_mean_s", "e2e_s",
                    "out_tokens", "kv_wait_s"])
        for r in m.requests:
            w.writerow([r.rid, repr(r.arrival_s), repr(r.ttft_s),
                        repr(r.tbt_mean_s), repr(r.e2e_s), r.out_tokens,
                        repr(r.kv_wait_s)])


# --- internal engine ------------------------------------------------------------


_gemm_lut = CostLut()


@dataclass(frozen=True)
class _StageCost:
    """Cost of one pipeline stage executing one batch, per layer and total."""

    duration_s: float
    layer_s: float
    qkv_offset_s: float  # into a layer, when its KV pages exist
    shard_compute_j: float  # per member PE, whole stage
    shard_dram_j: float
    comm_j: float  # collectives, whole group, whole stage
    records: tuple[OpRecord, ...]  # one layer's ops


@dataclass
class _ReqState:
    req: Request
    ttft: float | None = None
    first_tok: float | None = None
    last_tok: float | None = None
    gaps: list[float] = field(default_factory=list)
    ctx: int = 0
    left: int = 0
    in_flight: bool = False
    prefill_done: bool = False
    outstanding_kv: int = 0
    ready_time: float = 0.0
    admit_time: float = 0.0
    done: bool = False


class _StagePipe:
    """Busy flags plus inter-stage queues for one phase's pipeline."""

    def __init__(self, n_stages: int):
        self.busy = [False] * n_stages
        self.queues: list[deque] = [deque() for _ in range(n_stages)]


def _bucket(x: int, b: int) -> int:
    return max(b, math.ceil(x / b) * b)


def _chips_temp(chips: set[tuple[int, int]],
                temps: float | Mapping[tuple[int, int], float]) -> float:
    if isinstance(temps, Mapping):
        return max(temps[c] for c in chips)
    return float(temps)


class _PhaseCtx:
    """Static per-phase facts: stage members, centers, temps, chiplet."""

    def __init__(self, spec: SystemSpec, model: ModelSpec, plan: PhasePlan,
                 temps: float | Mapping[tuple[int, int], float]):
        self.plan = plan
        self.members = [list(m) for m in plan.stage_members]
        self.centers = list(plan.stage_centers)
        chips0 = {m.chip for m in self.members[0]}
        self.chiplet: ChipletSpec = spec.chiplet_at(next(iter(chips0)))
        self.stage_temp = [
            _chips_temp({m.chip for m in mem}, temps) for mem in self.members
        ]
        self.bounds = list(plan.layer_bounds)
        # activation handoff hop counts between consecutive stage centers
        self.hop = [
            manhattan(self.centers[s], self.centers[s + 1], spec)
            for s in range(len(self.centers) - 1)
        ]


class _Sim:
    def __init__(self, spec: SystemSpec, model: ModelSpec, plan: PdPlan,
                 trace: tuple[Request, ...], cfg: SimConfig,
                 temps: float | Mapping[tuple[int, int], float]):
        _check_plan(plan, model)
        self.spec = spec
        self.model = model
        self.cfg = cfg
        self.pre = _PhaseCtx(spec, model, plan.prefill, temps)
        self.dec = _PhaseCtx(spec, model, plan.decode, temps)
        # decode step t attends over prompt + t generated tokens
        self.states = [_ReqState(req=r, ctx=r.input_len + 1, left=r.output_len - 1)
                       for r in sorted(trace, key=lambda r: (r.arrival_s, r.rid))]
        # (pre_stage, shard index) -> [(layer_lo, layer_hi, decode coord)]
        self.peer_map: dict[tuple[int, int], list[tuple[int, int, MeshCoord]]] = {}
        for p in plan.kv_peers:
            i = plan.prefill.stage_members[p.pre_stage].index(p.pre_coord)
            self.peer_map.setdefault((p.pre_stage, i), []).append(
                (p.layer_lo, p.layer_hi, p.dec_coord))
        self.kv_shard_layer_bytes = (
            2 * ops.kv_heads_per_shard(model, plan.prefill.tp)
            * model.d_head * model.dtype_bytes)

        self.now = 0.0
        self._seq = itertools.count()
        self._ev: list[tuple[float, int, Callable[[], None]]] = []
        self.pre_pipe = _StagePipe(plan.prefill.pp)
        self.dec_pipe = _StagePipe(plan.decode.pp)
        self.pre_q: deque[_ReqState] = deque()
        self.pool: list[_ReqState] = []
        self.kv_wait_q: deque[tuple[_ReqState, int]] = deque()
        self.kv_used = 0
        self.kv_overflow = False
        self.static_batch: list[_ReqState] | None = None
        self.dec_beats_active = 0
        self.bridge_free: dict[tuple[tuple[int, int], tuple[int, int]], float] = {}

        self._scost: dict[tuple, _StageCost] = {}
        self.op_log: list[OpRecord] = []
        self.activity: list[ActivityInterval] = []
        self.comm_energy = 0.0
        self.last_event_t = 0.0

    # -- engine --

    def at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._ev, (t, next(self._seq), fn))

    def run(self) -> None:
        for st in self.states:
            self.at(st.req.arrival_s, lambda st=st: self._arrive(st))
        while self._ev:
            self.now, _, fn = heapq.heappop(self._ev)
            fn()
        self.last_event_t = self.now

    # -- costs --

    def _stage_cost(self, ctx: _PhaseCtx, phase: ops.Phase, s: int,
                    batch_key: tuple[tuple[int, int], ...]) -> _StageCost:
        key = (phase, s, batch_key)
        got = self._scost.get(key)
        if got is not None:
            return got
        chiplet = ctx.chiplet
        temp = ctx.stage_temp[s]
        tp = ctx.plan.tp
        lo, hi = ctx.bounds[s]
        n_layers = hi - lo
        op_list = ops.layer_ops(self.model, tp, phase, list(batch_key))
        t_layer = 0.0
        qkv_off = 0.0
        comp_j = dram_j = comm_j = 0.0
        records = []
        for op in op_list:
            if op.kind is ops.OpKind.GEMM:
                lut_key = (op.shape, chiplet.pe, chiplet.dram, chiplet.clock_hz,
                           round(temp, 1), self.model.dtype_bytes)
                res = _gemm_lut.get_or_compute(
                    lut_key,
                    lambda sh=op.shape: dataflow.search(
                        sh, chiplet.pe, chiplet.dram, temp,
                        clock_hz=chiplet.clock_hz,
                        dtype_bytes=self.model.dtype_bytes))
                dt = res.cost.latency_s
                comp_j += res.cost.compute.energy_j
                dram_j += res.cost.energy_j - res.cost.compute.energy_j
                records.append(OpRecord(phase, "gemm", op.tag, op.shape.flops,
                                        res.cost.dram_bytes, dt))
            elif op.kind is ops.OpKind.VPU:
                dt = vpu_cycles(op.elements, chiplet.pe) / chiplet.clock_hz
                comp_j += op.elements * chiplet.pe.pj_per_flop * 1e-12
                records.append(OpRecord(phase, "vpu", op.tag, op.elements, 0, dt))
            else:  # all-reduce on the stage's group
                if tp > 1:
                    cc = collective_cost(CollectiveKind.ALLREDUCE, ctx.members[s],
                                         ctx.centers[s], op.msg_bytes, self.spec)
                    dt = cc.latency_s
                    comm_j += cc.energy_j
                else:
                    dt = 0.0
            t_layer += dt
            if op.tag == "qkv":
                qkv_off = t_layer
        got = _StageCost(
            duration_s=t_layer * n_layers,
            layer_s=t_layer,
            qkv_offset_s=qkv_off,
            shard_compute_j=comp_j * n_layers,
            shard_dram_j=dram_j * n_layers,
            comm_j=comm_j * n_layers,
            records=tuple(records),
        )
        self._scost[key] = got
        return got

    def _run_stage(self, ctx: _PhaseCtx, phase: ops.Phase, s: int,
                   cost: _StageCost) -> None:
        """Book energy, activity, and the op log for one stage execution."""
        kind = "gemm" if cost.shard_compute_j >= cost.shard_dram_j else "mem"
        for m in ctx.members[s]:
            self.activity.append(ActivityInterval(
                pe=m, start_s=self.now, end_s=self.now + cost.duration_s,
                kind=kind, compute_energy_j=cost.shard_compute_j,
                dram_energy_j=cost.shard_dram_j))
        self.comm_energy += cost.comm_j
        self.op_log.extend(cost.records)

    def _handoff(self, ctx: _PhaseCtx, s: int, act_bytes: int) -> float:
        noc, nop = ctx.hop[s]
        self.comm_energy += act_bytes * (
            noc * self.spec.comm_energy_noc_pj_per_byte_hop
            + nop * self.spec.comm_energy_nop_pj_per_byte_hop) * 1e-12
        return link_delay(act_bytes, noc, nop, self.spec)

    # -- prefill --

    def _arrive(self, st: _ReqState) -> None:
        self.pre_q.append(st)
        self._try_prefill_admit()

    def _try_prefill_admit(self) -> None:
        if self.pre_pipe.busy[0] or not self.pre_q:
            return
        job = [self.pre_q.popleft()
               for _ in range(min(self.cfg.max_prefill_batch, len(self.pre_q)))]
        self._start_prefill_stage(0, job)

    def _prefill_batch_key(self, job: list[_ReqState]) -> tuple[tuple[int, int], ...]:
        b = self.cfg.len_bucket
        return tuple(sorted(
            (_bucket(st.req.input_len, b), _bucket(st.req.input_len, b))
            for st in job))

    def _start_prefill_stage(self, s: int, job: list[_ReqState]) -> None:
        self.pre_pipe.busy[s] = True
        cost = self._stage_cost(self.pre, ops.Phase.PREFILL, s,
                                self._prefill_batch_key(job))
        self._run_stage(self.pre, ops.Phase.PREFILL, s, cost)
        if self.cfg.kv_transfer_at_qkv:
            self._schedule_kv_sends(s, job, cost, eager=True)
        self.at(self.now + cost.duration_s,
                lambda: self._end_prefill_stage(s, job))

    def _end_prefill_stage(self, s: int, job: list[_ReqState]) -> None:
        self.pre_pipe.busy[s] = False
        if s + 1 < len(self.pre_pipe.busy):
            act = sum(st.req.input_len for st in job) \
                * self.model.d_model * self.model.dtype_bytes
            delay = self._handoff(self.pre, s, act)
            self.at(self.now + delay, lambda: self._enqueue_prefill(s + 1, job))
        else:
            self._finish_prefill(job)
        if s == 0:
            self._try_prefill_admit()
        elif self.pre_pipe.queues[s]:
            self._start_prefill_stage(s, self.pre_pipe.queues[s].popleft())

    def _enqueue_prefill(self, s: int, job: list[_ReqState]) -> None:
        if self.pre_pipe.busy[s]:
            self.pre_pipe.queues[s].append(job)
        else:
            self._start_prefill_stage(s, job)

    def _finish_prefill(self, job: list[_ReqState]) -> None:
        for st in job:
            st.ttft = self.now - st.req.arrival_s
            st.first_tok = st.last_tok = self.now
            st.prefill_done = True
            if st.req.output_len == 1:
                st.done = True
            elif not self.cfg.kv_transfer_at_qkv:
                pass  # sends scheduled below, readiness follows arrivals
            elif st.outstanding_kv == 0:
                self._mark_ready(st)
        if not self.cfg.kv_transfer_at_qkv:
            for s in range(len(self.pre.members)):
                self._schedule_kv_sends(s, job, None, eager=False)
            for st in job:
                if not st.done and st.outstanding_kv == 0:
                    self._mark_ready(st)

    def _schedule_kv_sends(self, s: int, job: list[_ReqState],
                           cost: _StageCost | None, eager: bool) -> None:
        """Queue this stage's KV pages onto the chiplet-pair bridges.

        Eager mode sends layer by layer as QKV completes inside the running
        stage; otherwise everything leaves at prefill completion (now).
        """
        lo, hi = self.pre.bounds[s]
        for i, src in enumerate(self.pre.members[s]):
            routes = self.peer_map.get((s, i), [])
            for st in job:
                if st.req.output_len == 1:
                    continue
                per_layer = st.req.input_len * self.kv_shard_layer_bytes
                for (plo, phi, dst) in routes:
                    for layer in range(plo, phi):
                        if eager:
                            ready = self.now + (layer - lo) * cost.layer_s \
                                + cost.qkv_offset_s
                        else:
                            ready = self.now
                        st.outstanding_kv += 1
                        self.at(ready, lambda st=st, src=src, dst=dst,
                                b=per_layer: self._bridge_send(st, src, dst, b))

    def _bridge_send(self, st: _ReqState, src: MeshCoord, dst: MeshCoord,
                     nbytes: int) -> None:
        key = (src.chip, dst.chip)
        noc, nop = manhattan(src, dst, self.spec)
        lat = link_delay(nbytes, noc, nop, self.spec)
        self.comm_energy += nbytes * (
            noc * self.spec.comm_energy_noc_pj_per_byte_hop
            + nop * self.spec.comm_energy_nop_pj_per_byte_hop) * 1e-12
        start = max(self.now, self.bridge_free.get(key, 0.0))
        self.bridge_free[key] = start + lat
        self.at(start + lat, lambda: self._kv_arrived(st))

    def _kv_arrived(self, st: _ReqState) -> None:
        st.outstanding_kv -= 1
        if st.outstanding_kv == 0 and st.prefill_done and not st.done:
            self._mark_ready(st)

    # -- decode --

    def _mark_ready(self, st: _ReqState) -> None:
        st.ready_time = self.now
        need = (st.req.input_len + st.req.output_len) \
            * self.model.kv_bytes_per_token()
        budget = self.cfg.kv_budget_bytes
        if budget is not None and need > budget:
            raise KvOverflow(
                f"request {st.req.rid} needs {need} B KV, budget {budget} B")
        if budget is not None and self.kv_used + need > budget:
            self.kv_overflow = True
            self.kv_wait_q.append((st, need))
            return
        self._admit(st, need)

    def _admit(self, st: _ReqState, need: int) -> None:
        self.kv_used += need
        st.admit_time = self.now
        self.pool.append(st)
        self._try_decode_start()

    def _eligible(self) -> list[_ReqState]:
        if self.cfg.continuous_batching:
            src = self.pool
        else:
            if self.static_batch is None and self.pool:
                self.static_batch = self.pool[:self.cfg.max_decode_batch]
            src = self.static_batch or []
        out = [st for st in src if not st.in_flight and not st.done and st.left > 0]
        return out[:self.cfg.max_decode_batch]

    def _try_decode_start(self) -> None:
        if self.dec_pipe.busy[0]:
            return
        if not self.cfg.continuous_batching and self.dec_beats_active > 0:
            return
        beat = self._eligible()
        if not beat:
            return
        for st in beat:
            st.in_flight = True
        self.dec_beats_active += 1
        self._start_decode_stage(0, beat)

    def _decode_batch_key(self, beat: list[_ReqState]) -> tuple[tuple[int, int], ...]:
        b = self.cfg.len_bucket
        return tuple(sorted((1, _bucket(st.ctx, b)) for st in beat))

    def _start_decode_stage(self, s: int, beat: list[_ReqState]) -> None:
        self.dec_pipe.busy[s] = True
        cost = self._stage_cost(self.dec, ops.Phase.DECODE, s,
                                self._decode_batch_key(beat))
        self._run_stage(self.dec, ops.Phase.DECODE, s, cost)
        self.at(self.now + cost.duration_s,
                lambda: self._end_decode_stage(s, beat))

    def _end_decode_stage(self, s: int, beat: list[_ReqState]) -> None:
        self.dec_pipe.busy[s] = False
        if s + 1 < len(self.dec_pipe.busy):
            act = len(beat) * self.model.d_model * self.model.dtype_bytes
            delay = self._handoff(self.dec, s, act)
            self.at(self.now + delay, lambda: self._enqueue_decode(s + 1, beat))
        else:
            self._finish_beat(beat)
        if self.dec_pipe.queues[s]:
            self._start_decode_stage(s, self.dec_pipe.queues[s].popleft())
        else:
            self._try_decode_start()

    def _enqueue_decode(self, s: int, beat: list[_ReqState]) -> None:
        if self.dec_pipe.busy[s]:
            self.dec_pipe.queues[s].append(beat)
        else:
            self._start_decode_stage(s, beat)

    def _finish_beat(self, beat: list[_ReqState]) -> None:
        self.dec_beats_active -= 1
        for st in beat:
            st.gaps.append(self.now - st.last_tok)
            st.last_tok = self.now
            st.left -= 1
            st.ctx += 1
            st.in_flight = False
            if st.left == 0:
                st.done = True
                self._retire(st)
        if self.static_batch is not None and all(
                st.done for st in self.static_batch):
            self.static_batch = None
        self._try_decode_start()

    def _retire(self, st: _ReqState) -> None:
        self.pool.remove(st)
        need = (st.req.input_len + st.req.output_len) \
            * self.model.kv_bytes_per_token()
        self.kv_used -= need
        while self.kv_wait_q:
            nxt, nxt_need = self.kv_wait_q[0]
            if self.cfg.kv_budget_bytes is not None \
                    and self.kv_used + nxt_need > self.cfg.kv_budget_bytes:
                break
            self.kv_wait_q.popleft()
            self._admit(nxt, nxt_need)

    # -- results --

    def metrics(self, spec: SystemSpec) -> ServingMetrics:
        unfinished = [st.req.rid for st in self.states if not st.done]
        if unfinished:
            raise PlanMismatch(f"requests never completed: {unfinished[:5]}")
        reqs = []
        for st in self.states:
            gaps = sum(st.gaps)
            tbt = gaps / len(st.gaps) if st.gaps else 0.0
            reqs.append(RequestMetrics(
                rid=st.req.rid, arrival_s=st.req.arrival_s, ttft_s=st.ttft,
                tbt_mean_s=tbt, e2e_s=st.ttft + gaps,
                out_tokens=st.req.output_len,
                kv_wait_s=(st.admit_time - st.ready_time
                           if st.req.output_len > 1 else 0.0)))
        makespan = self.last_event_t
        total_tokens = sum(r.out_tokens for r in reqs)
        static_w = 0.0
        for coord in spec.placement:
            c = spec.chiplet_at(coord)
            static_w += c.n_pe * c.power.leak_base_w_per_pe
            static_w += c.dram.n_layer * (c.power.dram_static_w_per_layer
                                          + c.power.refresh_w_per_layer)
        dyn = sum(a.compute_energy_j + a.dram_energy_j for a in self.activity)
        energy = dyn + self.comm_energy + static_w * makespan
        return ServingMetrics(
            requests=tuple(reqs),
            makespan_s=makespan,
            total_tokens=total_tokens,
            throughput_tok_s=total_tokens / makespan if makespan > 0 else 0.0,
            energy_j=energy,
            tokens_per_joule=total_tokens / energy if energy > 0 else 0.0,
            kv_overflow=self.kv_overflow,
            op_log=tuple(self.op_log),
            activity=tuple(self.activity),
        )


def _check_plan(plan: PdPlan, model: ModelSpec) -> None:
    for phase_plan, phase in ((plan.prefill, ops.Phase.PREFILL),
                              (plan.decode, ops.Phase.DECODE)):
        if phase_plan.phase is not phase:
            raise PlanMismatch(f"{phase.value} plan carries {phase_plan.phase}")
        if phase_plan.layer_bounds[-1][1] != model.n_layers:
            raise PlanMismatch(
                f"{phase.value} plan covers {phase_plan.layer_bounds[-1][1]} "
                f"layers, model has {model.n_layers}")
        for s, members in enumerate(phase_plan.stage_members):
            if len(members) != phase_plan.tp:
                raise PlanMismatch(
                    f"{phase.value} stage {s} has {len(members)} PEs, tp is "
                    f"{phase_plan.tp}")


def simulate(spec: SystemSpec, model: ModelSpec, plan: PdPlan,
             trace: tuple[Request, ...], cfg: SimConfig = SimConfig(),
             temps: float | Mapping[tuple[int, int], float] = 65.0) -> ServingMetrics:
    """Run the trace through the plan and return per-request plus aggregate
    metrics. temps is a uniform value or per-chiplet map; a stage spanning
    several chiplets sees the hottest one."""
    sim = _Sim(spec, model, plan, trace, cfg, temps)
    sim.run()
    return sim.metrics(spec)


def roofline_check(metrics: ServingMetrics, spec: SystemSpec, plan: PdPlan,
                   temps: float | Mapping[tuple[int, int], float] = 65.0,
                   slack: float = 1.01) -> list[str]:
    """Operators whose achieved per-PE rate beats min(compute, AI * bw).

    Returns human-readable violation strings; empty means every logged
    operator sits on or under the roof.
    """
    out = []
    by_phase = {}
    for phase_plan in (plan.prefill, plan.decode):
        chips = {m.chip for s in phase_plan.stage_members for m in s}
        chiplet = spec.chiplet_at(next(iter(chips)))
        temp = _chips_temp(chips, temps)
        pe = chiplet.pe
        peak = 2.0 * pe.sa_rows * pe.sa_cols * pe.n_core * chiplet.clock_hz \
            * chiplet.flops_scale
        bw = effective_bandwidth(chiplet.dram, temp) \
            * pe.n_mc / chiplet.dram.channels
        vpu_peak = pe.vector_regs * chiplet.clock_hz
        by_phase[phase_plan.phase] = (peak, bw, vpu_peak)
    for i, rec in enumerate(metrics.op_log):
        if rec.latency_s <= 0.0:
            continue
        peak, bw, vpu_peak = by_phase[rec.phase]
        achieved = rec.flops / rec.latency_s
        if rec.kind == "vpu":
            roof = vpu_peak
        elif rec.dram_bytes > 0:
            ai = rec.flops / rec.dram_bytes
            roof = min(peak, ai * bw)
        else:
            roof = peak
        if achieved > roof * slack:
            out.append(
                f"op {i} {rec.phase.value}/{rec.tag}: {achieved:.3e} flop/s "
                f"exceeds roof {roof:.3e}")
    return out
