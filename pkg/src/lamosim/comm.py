"""Two-level mesh communication: on-chip NoC and package-level NoP.

Link cost is linear: t = alpha * bytes + beta * hops, with separate constants
per level. Routes are dimension-ordered (x then y). Inside the terminal
chiplets only the distance to the facing edge along the crossing axis counts
(edge ports span the whole edge); each boundary crossing additionally costs
`edge_hops` NoC hops to reach the die-to-die port.

Collectives are stars around a center PE: every non-center member's stream is
serialized through the center's port (alpha term per member, at the member's
bottleneck level), and the slowest member sets the beta term. AllReduce is
exactly Reduce followed by Multicast.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .hwspec import SystemSpec


class EmptyGroup(ValueError):
    """Collective invoked on an empty member set."""


class CollectiveKind(Enum):
    REDUCE = "reduce"
    MULTICAST = "multicast"
    ALLREDUCE = "allreduce"


@dataclass(frozen=True, order=True)
class MeshCoord:
    """A PE address: chiplet mesh coordinate plus PE grid coordinate."""

    chip: tuple[int, int]
    pe: tuple[int, int]


@dataclass(frozen=True)
class CommCost:
    latency_s: float
    energy_j: float
    noc_hops: int
    nop_hops: int


def manhattan(a: MeshCoord, b: MeshCoord, spec: SystemSpec) -> tuple[int, int]:
    """(noc_hops, nop_hops) between two PEs under dimension-ordered routing."""
    if a.chip == b.chip:
        noc = abs(a.pe[0] - b.pe[0]) + abs(a.pe[1] - b.pe[1])
        return noc, 0
    dx = b.chip[0] - a.chip[0]
    dy = b.chip[1] - a.chip[1]
    nop = abs(dx) + abs(dy)
    src = spec.chiplet_at(a.chip)
    dst = spec.chiplet_at(b.chip)
    # Both terminal PEs are measured to their facing edge along the first
    # differing axis (edge ports span the whole edge), keeping hops symmetric.
    if dx != 0:
        exit_d = (src.pe_cols - 1 - a.pe[0]) if dx > 0 else a.pe[0]
        entry_d = b.pe[0] if dx > 0 else (dst.pe_cols - 1 - b.pe[0])
    else:
        exit_d = (src.pe_rows - 1 - a.pe[1]) if dy > 0 else a.pe[1]
        entry_d = b.pe[1] if dy > 0 else (dst.pe_rows - 1 - b.pe[1])
    noc = exit_d + entry_d + spec.edge_hops * nop
    return noc, nop


def link_delay(msg_bytes: int, noc_hops: int, nop_hops: int, spec: SystemSpec) -> float:
    """Point-to-point transfer time. The serialization rate is set by the
    slowest level on the path."""
    if msg_bytes < 0 or noc_hops < 0 or nop_hops < 0:
        raise ValueError("msg_bytes and hop counts must be >= 0")
    alpha = spec.alpha_nop_s_per_byte if nop_hops > 0 else spec.alpha_noc_s_per_byte
    return (
        alpha * msg_bytes
        + spec.beta_noc_s_per_hop * noc_hops
        + spec.beta_nop_s_per_hop * nop_hops
    )


def _path_cost(member: MeshCoord, center: MeshCoord, msg_bytes: int,
               spec: SystemSpec) -> tuple[float, float, float, int, int]:
    """(alpha_term, beta_term, energy, noc, nop) for one member<->center stream."""
    noc, nop = manhattan(member, center, spec)
    alpha = spec.alpha_nop_s_per_byte if nop > 0 else spec.alpha_noc_s_per_byte
    beta = spec.beta_noc_s_per_hop * noc + spec.beta_nop_s_per_hop * nop
    energy = msg_bytes * (
        noc * spec.comm_energy_noc_pj_per_byte_hop
        + nop * spec.comm_energy_nop_pj_per_byte_hop
    ) * 1e-12
    return alpha * msg_bytes, beta, energy, noc, nop


def _bounding_box(group: list[MeshCoord]) -> tuple[tuple[int, int], tuple[int, int],
                                                   tuple[int, int], tuple[int, int]]:
    cx = [g.chip[0] for g in group]
    cy = [g.chip[1] for g in group]
    px = [g.pe[0] for g in group]
    py = [g.pe[1] for g in group]
    return (min(cx), max(cx)), (min(cy), max(cy)), (min(px), max(px)), (min(py), max(py))


def collective_cost(kind: CollectiveKind, group: list[MeshCoord], center: MeshCoord,
                    msg_bytes: int, spec: SystemSpec) -> CommCost:
    """Star-collective cost over the member set.

    Latency = sum of per-member serialized alpha terms + the largest member
    beta term. Reduce and Multicast are symmetric under this model; AllReduce
    composes both. A singleton group costs zero.
    """
    if not group:
        raise EmptyGroup("collective over an empty group")
    if msg_bytes < 0:
        raise ValueError("msg_bytes must be >= 0")
    (cx0, cx1), (cy0, cy1), _, _ = _bounding_box(group)
    if center in group:
        pass  # members always qualify
    elif not (cx0 <= center.chip[0] <= cx1 and cy0 <= center.chip[1] <= cy1):
        raise ValueError("collective center must lie inside the group bounding box")
    alpha_total = 0.0
    beta_max = 0.0
    energy = 0.0
    max_noc = 0
    max_nop = 0
    for member in group:
        if member == center:
            continue
        a, b, e, noc, nop = _path_cost(member, center, msg_bytes, spec)
        alpha_total += a
        beta_max = max(beta_max, b)
        energy += e
        max_noc = max(max_noc, noc)
        max_nop = max(max_nop, nop)
    one_way = alpha_total + beta_max
    if kind is CollectiveKind.ALLREDUCE:
        return CommCost(2.0 * one_way, 2.0 * energy, max_noc, max_nop)
    return CommCost(one_way, energy, max_noc, max_nop)
