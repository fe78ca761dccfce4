"""Hardware and model specifications.

Frozen dataclasses describing DRAM stacks, processing elements, chiplets,
systems, cooling, and transformer models, plus strict JSON (de)serialization
and system-level validation. Every other module consumes these types; none of
them mutates a spec after construction.

JSON configs carry a `"schema": 1` field, use unit-suffixed field names
(`t_rcd_ns`, `capacity_bytes`), and reject unknown keys so typos fail loudly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any

SCHEMA_VERSION = 1

# Violation kinds reported by validate_system.
AREA_EXCEEDED = "AreaExceeded"
POWER_EXCEEDED = "PowerExceeded"
INCONSISTENT_CAPACITY = "InconsistentCapacity"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration input."""


@dataclass(frozen=True)
class Violation:
    kind: str
    where: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind} at {self.where}: {self.detail}"


class SystemValidationError(Exception):
    """Raised by validate_system with the complete list of violations."""

    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class Role(Enum):
    PREFILL = "prefill"
    DECODE = "decode"


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class DramStackSpec:
    """One 3D DRAM stack: geometry, timing, and energy constants.

    Timing fields are nanoseconds, capacities bytes, energies picojoules.
    `t_rfi_base_ns` is the refresh interval at or below
    `retention_base_temp_c`; it halves for every further 10 degrees.
    """

    n_layer: int
    n_bank: int
    n_io_bits: int
    burst_len: int
    page_size_bytes: int
    capacity_bytes: int
    t_rcd_ns: float
    t_cas_ns: float
    t_rp_ns: float
    t_rfc_ns: float
    t_rfi_base_ns: float
    io_clock_hz: float
    energy_per_bit_pj: float
    retention_base_temp_c: float = 85.0
    tsv_delay_ns: float = 0.0
    refresh_energy_per_cmd_pj: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_layer", "n_bank", "n_io_bits", "burst_len", "page_size_bytes"):
            _require(getattr(self, name) >= 1, f"dram.{name} must be >= 1")
        _require(self.capacity_bytes >= 1, "dram.capacity_bytes must be >= 1")
        _require(
            self.capacity_bytes % (self.n_layer * self.n_bank) == 0,
            "dram.capacity_bytes must split evenly over n_layer * n_bank banks",
        )
        for name in ("t_rcd_ns", "t_cas_ns", "t_rp_ns", "tsv_delay_ns"):
            _require(getattr(self, name) >= 0.0, f"dram.{name} must be >= 0")
        _require(self.t_rfc_ns > 0.0, "dram.t_rfc_ns must be > 0")
        _require(
            self.t_rfc_ns < self.t_rfi_base_ns,
            "dram.t_rfc_ns must be < t_rfi_base_ns (refresh cannot saturate at base temp)",
        )
        _require(self.io_clock_hz > 0.0, "dram.io_clock_hz must be > 0")
        _require(self.energy_per_bit_pj > 0.0, "dram.energy_per_bit_pj must be > 0")
        _require(self.refresh_energy_per_cmd_pj >= 0.0, "dram.refresh_energy_per_cmd_pj must be >= 0")

    @property
    def bank_capacity_bytes(self) -> int:
        return self.capacity_bytes // (self.n_layer * self.n_bank)

    @property
    def channels(self) -> int:
        """Independently addressable bank channels in the stack."""
        return self.n_layer * self.n_bank


@dataclass(frozen=True)
class PeSpec:
    """One processing element: systolic array, SRAM, VPU, memory controllers."""

    n_core: int
    sa_rows: int
    sa_cols: int
    base_sa_rows: int
    sram_capacity_bytes: int
    sram_banks: int
    vector_regs: int
    noc_flit_bits: int
    n_mc: int
    pj_per_flop: float = 0.5

    def __post_init__(self) -> None:
        for name in ("n_core", "sa_rows", "sa_cols", "base_sa_rows", "sram_banks",
                     "vector_regs", "noc_flit_bits", "n_mc"):
            _require(getattr(self, name) >= 1, f"pe.{name} must be >= 1")
        _require(self.sram_capacity_bytes >= 1, "pe.sram_capacity_bytes must be >= 1")
        _require(
            self.sa_rows % self.base_sa_rows == 0,
            "pe.base_sa_rows must divide sa_rows",
        )
        _require(self.pj_per_flop > 0.0, "pe.pj_per_flop must be > 0")

    @property
    def n_base_sa(self) -> int:
        return self.sa_rows // self.base_sa_rows


@dataclass(frozen=True)
class AreaConsts:
    """Constant-per-component area table (gate-level estimation stand-in)."""

    pe_mm2: float
    dram_die_mm2: float
    misc_mm2: float = 0.0

    def __post_init__(self) -> None:
        _require(self.pe_mm2 > 0.0, "area.pe_mm2 must be > 0")
        _require(self.dram_die_mm2 > 0.0, "area.dram_die_mm2 must be > 0")
        _require(self.misc_mm2 >= 0.0, "area.misc_mm2 must be >= 0")


@dataclass(frozen=True)
class PowerConsts:
    """Constant-per-component power table.

    `leak_base_w_per_pe` is logic leakage per PE at 65 C; thermal scales it by
    (1 + 0.005 * (T - 65)). `refresh_w_per_layer` is refresh power per DRAM
    layer at the base refresh rate; it scales with the refresh duty factor.
    """

    leak_base_w_per_pe: float
    dram_static_w_per_layer: float
    refresh_w_per_layer: float = 0.0

    def __post_init__(self) -> None:
        _require(self.leak_base_w_per_pe >= 0.0, "power.leak_base_w_per_pe must be >= 0")
        _require(self.dram_static_w_per_layer >= 0.0, "power.dram_static_w_per_layer must be >= 0")
        _require(self.refresh_w_per_layer >= 0.0, "power.refresh_w_per_layer must be >= 0")


@dataclass(frozen=True)
class ChipletSpec:
    """A logic die plus its DRAM stack, typed by serving role."""

    role: Role
    pe_rows: int
    pe_cols: int
    pe: PeSpec
    dram: DramStackSpec
    clock_hz: float
    area_budget_mm2: float
    tdp_w: float
    area: AreaConsts
    power: PowerConsts
    flops_scale: float = 1.0

    def __post_init__(self) -> None:
        _require(self.pe_rows >= 1 and self.pe_cols >= 1, "chiplet PE grid dims must be >= 1")
        _require(self.clock_hz > 0.0, "chiplet.clock_hz must be > 0")
        _require(self.area_budget_mm2 > 0.0, "chiplet.area_budget_mm2 must be > 0")
        _require(self.tdp_w > 0.0, "chiplet.tdp_w must be > 0")
        _require(self.flops_scale > 0.0, "chiplet.flops_scale must be > 0")

    @property
    def n_pe(self) -> int:
        return self.pe_rows * self.pe_cols

    def logic_area_mm2(self) -> float:
        return self.n_pe * self.area.pe_mm2 + self.area.misc_mm2


@dataclass(frozen=True)
class ChipletMetrics:
    """Derived peaks for one chiplet."""

    peak_flops: float
    peak_bw_bytes: float
    capacity_bytes: int
    peak_power_w: float
    ai_knee: float  # FLOP/byte where compute and memory roofs meet


def derive_chiplet_metrics(c: ChipletSpec) -> ChipletMetrics:
    """Peak compute, bandwidth, capacity, and power for one chiplet.

    peak_flops = n_pe * n_core * 2 * sa_rows * sa_cols * clock * flops_scale
    peak_bw    = n_layer * n_bank * n_io_bits * io_clock / 8
    Peak power = dynamic at peak (compute pJ/FLOP + DRAM pJ/bit) plus the
    static table entries at the 65 C reference.
    """
    pe = c.pe
    peak_flops = (
        c.n_pe * pe.n_core * 2.0 * pe.sa_rows * pe.sa_cols * c.clock_hz * c.flops_scale
    )
    d = c.dram
    peak_bw = d.n_layer * d.n_bank * d.n_io_bits * d.io_clock_hz / 8.0
    compute_w = peak_flops * pe.pj_per_flop * 1e-12
    dram_w = peak_bw * 8.0 * d.energy_per_bit_pj * 1e-12
    static_w = (
        c.n_pe * c.power.leak_base_w_per_pe
        + d.n_layer * (c.power.dram_static_w_per_layer + c.power.refresh_w_per_layer)
    )
    peak_power = compute_w + dram_w + static_w
    return ChipletMetrics(
        peak_flops=peak_flops,
        peak_bw_bytes=peak_bw,
        capacity_bytes=d.capacity_bytes,
        peak_power_w=peak_power,
        ai_knee=peak_flops / peak_bw,
    )


@dataclass(frozen=True)
class FlowLevel:
    """One coolant flow setting: coldplate resistance scale and pump power."""

    r_scale: float
    pump_w: float

    def __post_init__(self) -> None:
        _require(self.r_scale > 0.0, "cooling flow r_scale must be > 0")
        _require(self.pump_w >= 0.0, "cooling flow pump_w must be >= 0")


@dataclass(frozen=True)
class CoolingSpec:
    """Liquid-cooling envelope: RC ladder constants and flow levels.

    Heat path per chiplet column: logic die -> DRAM layers -> coldplate ->
    ambient. Resistances are K/W. Flow levels must come with strictly
    decreasing coldplate resistance and non-decreasing pump power.
    """

    ambient_c: float
    r_coldplate: float
    r_per_dram_layer: float
    r_bond: float  # logic-to-stack interface
    r_lateral: float
    flow_levels: tuple[FlowLevel, ...]
    t_limit_c: float = 105.0
    heat_capacity_j_per_k: float = 50.0  # per block, transient mode only

    def __post_init__(self) -> None:
        _require(self.r_coldplate > 0.0, "cooling.r_coldplate must be > 0")
        _require(self.r_per_dram_layer > 0.0, "cooling.r_per_dram_layer must be > 0")
        _require(self.r_bond >= 0.0, "cooling.r_bond must be >= 0")
        _require(self.r_lateral > 0.0, "cooling.r_lateral must be > 0")
        _require(len(self.flow_levels) >= 1, "cooling needs at least one flow level")
        _require(self.heat_capacity_j_per_k > 0.0, "cooling.heat_capacity_j_per_k must be > 0")
        scales = [f.r_scale for f in self.flow_levels]
        pumps = [f.pump_w for f in self.flow_levels]
        _require(
            all(a > b for a, b in zip(scales, scales[1:])),
            "cooling flow levels must have strictly decreasing r_scale",
        )
        _require(
            all(a <= b for a, b in zip(pumps, pumps[1:])),
            "cooling flow levels must have non-decreasing pump_w",
        )


@dataclass(frozen=True)
class SystemSpec:
    """Chiplets placed on a 2D package mesh plus interconnect constants.

    `placement` maps mesh coordinates to names in `chiplet_types`. Interconnect
    cost model: t = alpha * bytes + beta * hops at each level; crossing a
    chiplet boundary costs `edge_hops` extra on-chip hops per crossing.
    """

    chiplet_types: dict[str, ChipletSpec]
    placement: dict[tuple[int, int], str]
    alpha_noc_s_per_byte: float
    alpha_nop_s_per_byte: float
    beta_noc_s_per_hop: float
    beta_nop_s_per_hop: float
    edge_hops: int
    rack_power_limit_w: float
    cooling: CoolingSpec
    comm_energy_noc_pj_per_byte_hop: float = 0.1
    comm_energy_nop_pj_per_byte_hop: float = 0.5

    def __post_init__(self) -> None:
        _require(len(self.placement) >= 1, "system placement must not be empty")
        for coord, name in self.placement.items():
            _require(name in self.chiplet_types, f"placement at {coord} references unknown chiplet type {name!r}")
        for a in ("alpha_noc_s_per_byte", "alpha_nop_s_per_byte",
                  "beta_noc_s_per_hop", "beta_nop_s_per_hop"):
            _require(getattr(self, a) >= 0.0, f"system.{a} must be >= 0")
        _require(self.edge_hops >= 0, "system.edge_hops must be >= 0")
        _require(self.rack_power_limit_w > 0.0, "system.rack_power_limit_w must be > 0")

    def chiplet_at(self, coord: tuple[int, int]) -> ChipletSpec:
        return self.chiplet_types[self.placement[coord]]

    def coords_for_role(self, role: Role) -> list[tuple[int, int]]:
        return sorted(c for c, n in self.placement.items() if self.chiplet_types[n].role is role)


class AttnVariant(Enum):
    MHA = "mha"
    GQA = "gqa"
    MLA = "mla"


@dataclass(frozen=True)
class ModelSpec:
    """Decoder-only transformer geometry. Footprints cover decoder blocks only
    (qkv/o projections and the two FFN matrices); embeddings are excluded."""

    name: str
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    d_model: int
    d_ffn: int
    attn_variant: AttnVariant
    dtype_bytes: int

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "n_kv_heads", "d_head", "d_model", "d_ffn", "dtype_bytes"):
            _require(getattr(self, name) >= 1, f"model.{name} must be >= 1")
        _require(self.d_model == self.n_heads * self.d_head, "model.d_model must equal n_heads * d_head")
        _require(self.n_heads % self.n_kv_heads == 0, "model.n_kv_heads must divide n_heads")
        if self.attn_variant is AttnVariant.MHA:
            _require(self.n_kv_heads == self.n_heads, "MHA requires n_kv_heads == n_heads")

    def weights_per_layer(self) -> int:
        """Parameter count of one decoder block."""
        qkv = self.d_model * (self.d_model + 2 * self.n_kv_heads * self.d_head)
        o = self.d_model * self.d_model
        ffn = 2 * self.d_model * self.d_ffn
        return qkv + o + ffn

    def weight_bytes(self) -> int:
        return self.n_layers * self.weights_per_layer() * self.dtype_bytes

    def kv_bytes_per_token(self) -> int:
        return 2 * self.n_layers * self.n_kv_heads * self.d_head * self.dtype_bytes

    def param_count(self) -> int:
        return self.n_layers * self.weights_per_layer()


@dataclass(frozen=True)
class ValidatedSystem:
    """A SystemSpec together with per-chiplet derived metrics and pool totals."""

    spec: SystemSpec
    metrics: dict[str, ChipletMetrics]
    prefill_coords: tuple[tuple[int, int], ...]
    decode_coords: tuple[tuple[int, int], ...]
    total_peak_power_w: float

    def pool_capacity_bytes(self, role: Role) -> int:
        coords = self.prefill_coords if role is Role.PREFILL else self.decode_coords
        return sum(self.spec.chiplet_at(c).dram.capacity_bytes for c in coords)


def chiplet_violations(name: str, c: ChipletSpec) -> list[Violation]:
    """Budget checks for a single chiplet, independent of any system."""
    m = derive_chiplet_metrics(c)
    out: list[Violation] = []
    logic = c.logic_area_mm2()
    if logic > c.area.dram_die_mm2:
        out.append(Violation(
            AREA_EXCEEDED, name,
            f"logic die {logic:.1f} mm2 exceeds DRAM die footprint {c.area.dram_die_mm2:.1f} mm2"))
    die_area = max(logic, c.area.dram_die_mm2)
    if die_area > c.area_budget_mm2:
        out.append(Violation(
            AREA_EXCEEDED, name,
            f"die area {die_area:.1f} mm2 exceeds budget {c.area_budget_mm2:.1f} mm2"))
    if m.peak_power_w > c.tdp_w:
        out.append(Violation(
            POWER_EXCEEDED, name,
            f"derived peak power {m.peak_power_w:.1f} W exceeds tdp {c.tdp_w:.1f} W"))
    if c.pe.n_mc * c.n_pe > c.dram.channels:
        out.append(Violation(
            INCONSISTENT_CAPACITY, name,
            f"{c.n_pe} PEs x {c.pe.n_mc} MCs exceed {c.dram.channels} DRAM channels"))
    return out


def validate_system(spec: SystemSpec, model: ModelSpec | None = None) -> ValidatedSystem:
    """Check area/power/capacity limits for every chiplet and the rack.

    Raises SystemValidationError carrying the complete violation list; on
    success returns the spec with derived metrics populated. If `model` is
    given, each role pool must hold at least one full copy of its weights.
    """
    violations: list[Violation] = []
    metrics: dict[str, ChipletMetrics] = {}
    for name, c in sorted(spec.chiplet_types.items()):
        metrics[name] = derive_chiplet_metrics(c)
        violations.extend(chiplet_violations(name, c))
    total_power = sum(
        metrics[spec.placement[coord]].peak_power_w for coord in spec.placement
    )
    if total_power > spec.rack_power_limit_w:
        violations.append(Violation(
            POWER_EXCEEDED, "rack",
            f"summed chiplet peak power {total_power:.0f} W exceeds rack limit "
            f"{spec.rack_power_limit_w:.0f} W"))
    prefill = tuple(spec.coords_for_role(Role.PREFILL))
    decode = tuple(spec.coords_for_role(Role.DECODE))
    if model is not None:
        wb = model.weight_bytes()
        for role, coords in ((Role.PREFILL, prefill), (Role.DECODE, decode)):
            cap = sum(spec.chiplet_at(c).dram.capacity_bytes for c in coords)
            if coords and wb > cap:
                violations.append(Violation(
                    INCONSISTENT_CAPACITY, f"{role.value}-pool",
                    f"weights {wb} B exceed pool capacity {cap} B"))
    if violations:
        raise SystemValidationError(violations)
    return ValidatedSystem(
        spec=spec,
        metrics=metrics,
        prefill_coords=prefill,
        decode_coords=decode,
        total_peak_power_w=total_power,
    )


# --- strict JSON (de)serialization -----------------------------------------

def _check_keys(d: dict[str, Any], allowed: set[str], ctx: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{ctx}: expected an object, got {type(d).__name__}")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown fields {sorted(unknown)}")


def _dataclass_fields(cls: type) -> dict[str, Any]:
    return {f.name: f for f in fields(cls)}


def _parse_simple(cls: type, d: dict[str, Any], ctx: str) -> Any:
    """Build a flat dataclass from a dict, type-coercing ints/floats."""
    fmap = _dataclass_fields(cls)
    _check_keys(d, set(fmap), ctx)
    kwargs: dict[str, Any] = {}
    for name, f in fmap.items():
        if name not in d:
            continue  # fall back to the dataclass default (missing required -> TypeError below)
        v = d[name]
        if f.type in ("int",) and isinstance(v, float) and v.is_integer():
            v = int(v)
        kwargs[name] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{ctx}: {e}") from None


def parse_dram(d: dict[str, Any], ctx: str = "dram") -> DramStackSpec:
    return _parse_simple(DramStackSpec, d, ctx)


def parse_pe(d: dict[str, Any], ctx: str = "pe") -> PeSpec:
    return _parse_simple(PeSpec, d, ctx)


def parse_chiplet(d: dict[str, Any], ctx: str = "chiplet") -> ChipletSpec:
    allowed = {"role", "pe_rows", "pe_cols", "pe", "dram", "clock_hz",
               "area_budget_mm2", "tdp_w", "area", "power", "flops_scale"}
    _check_keys(d, allowed, ctx)
    try:
        role = Role(d["role"])
    except (KeyError, ValueError):
        raise ConfigError(f"{ctx}: role must be one of {[r.value for r in Role]}") from None
    kwargs = dict(
        role=role,
        pe_rows=d.get("pe_rows"),
        pe_cols=d.get("pe_cols"),
        pe=parse_pe(d.get("pe", {}), f"{ctx}.pe"),
        dram=parse_dram(d.get("dram", {}), f"{ctx}.dram"),
        clock_hz=d.get("clock_hz"),
        area_budget_mm2=d.get("area_budget_mm2"),
        tdp_w=d.get("tdp_w"),
        area=_parse_simple(AreaConsts, d.get("area", {}), f"{ctx}.area"),
        power=_parse_simple(PowerConsts, d.get("power", {}), f"{ctx}.power"),
    )
    if "flops_scale" in d:
        kwargs["flops_scale"] = d["flops_scale"]
    try:
        return ChipletSpec(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{ctx}: {e}") from None


def parse_cooling(d: dict[str, Any], ctx: str = "cooling") -> CoolingSpec:
    allowed = {"ambient_c", "r_coldplate", "r_per_dram_layer", "r_bond",
               "r_lateral", "flow_levels", "t_limit_c", "heat_capacity_j_per_k"}
    _check_keys(d, allowed, ctx)
    levels = d.get("flow_levels", [])
    if not isinstance(levels, list):
        raise ConfigError(f"{ctx}.flow_levels: expected a list")
    flow = tuple(
        _parse_simple(FlowLevel, lv, f"{ctx}.flow_levels[{i}]") for i, lv in enumerate(levels)
    )
    kwargs = {k: d[k] for k in allowed if k in d and k != "flow_levels"}
    try:
        return CoolingSpec(flow_levels=flow, **kwargs)
    except TypeError as e:
        raise ConfigError(f"{ctx}: {e}") from None


def parse_system(d: dict[str, Any]) -> SystemSpec:
    allowed = {"schema", "chiplet_types", "placement", "alpha_noc_s_per_byte",
               "alpha_nop_s_per_byte", "beta_noc_s_per_hop", "beta_nop_s_per_hop",
               "edge_hops", "rack_power_limit_w", "cooling",
               "comm_energy_noc_pj_per_byte_hop", "comm_energy_nop_pj_per_byte_hop"}
    _check_keys(d, allowed, "system")
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"system: schema must be {SCHEMA_VERSION}")
    types_in = d.get("chiplet_types", {})
    if not isinstance(types_in, dict):
        raise ConfigError("system.chiplet_types: expected an object")
    chiplet_types = {
        name: parse_chiplet(cd, f"system.chiplet_types.{name}")
        for name, cd in types_in.items()
    }
    placement: dict[tuple[int, int], str] = {}
    for i, entry in enumerate(d.get("placement", [])):
        _check_keys(entry, {"at", "type"}, f"system.placement[{i}]")
        at = entry.get("at")
        if (not isinstance(at, list)) or len(at) != 2:
            raise ConfigError(f"system.placement[{i}].at: expected [x, y]")
        coord = (int(at[0]), int(at[1]))
        if coord in placement:
            raise ConfigError(f"system.placement[{i}]: duplicate coordinate {coord}")
        placement[coord] = entry.get("type", "")
    kwargs = {k: d[k] for k in allowed if k in d and k not in
              ("schema", "chiplet_types", "placement", "cooling")}
    try:
        return SystemSpec(
            chiplet_types=chiplet_types,
            placement=placement,
            cooling=parse_cooling(d.get("cooling", {})),
            **kwargs,
        )
    except TypeError as e:
        raise ConfigError(f"system: {e}") from None


def parse_model(d: dict[str, Any]) -> ModelSpec:
    allowed = {"schema", "name", "n_layers", "n_heads", "n_kv_heads", "d_head",
               "d_model", "d_ffn", "attn_variant", "dtype_bytes"}
    _check_keys(d, allowed, "model")
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"model: schema must be {SCHEMA_VERSION}")
    try:
        variant = AttnVariant(d.get("attn_variant", ""))
    except ValueError:
        raise ConfigError(
            f"model: attn_variant must be one of {[v.value for v in AttnVariant]}") from None
    kwargs = {k: d[k] for k in allowed if k in d and k not in ("schema", "attn_variant")}
    try:
        return ModelSpec(attn_variant=variant, **kwargs)
    except TypeError as e:
        raise ConfigError(f"model: {e}") from None


def dram_to_dict(d: DramStackSpec) -> dict[str, Any]:
    return {f.name: getattr(d, f.name) for f in fields(DramStackSpec)}


def pe_to_dict(p: PeSpec) -> dict[str, Any]:
    return {f.name: getattr(p, f.name) for f in fields(PeSpec)}


def chiplet_to_dict(c: ChipletSpec) -> dict[str, Any]:
    return {
        "role": c.role.value,
        "pe_rows": c.pe_rows,
        "pe_cols": c.pe_cols,
        "pe": pe_to_dict(c.pe),
        "dram": dram_to_dict(c.dram),
        "clock_hz": c.clock_hz,
        "area_budget_mm2": c.area_budget_mm2,
        "tdp_w": c.tdp_w,
        "area": {f.name: getattr(c.area, f.name) for f in fields(AreaConsts)},
        "power": {f.name: getattr(c.power, f.name) for f in fields(PowerConsts)},
        "flops_scale": c.flops_scale,
    }


def system_to_dict(s: SystemSpec) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "chiplet_types": {n: chiplet_to_dict(c) for n, c in sorted(s.chiplet_types.items())},
        "placement": [
            {"at": [x, y], "type": s.placement[(x, y)]}
            for (x, y) in sorted(s.placement)
        ],
        "alpha_noc_s_per_byte": s.alpha_noc_s_per_byte,
        "alpha_nop_s_per_byte": s.alpha_nop_s_per_byte,
        "beta_noc_s_per_hop": s.beta_noc_s_per_hop,
        "beta_nop_s_per_hop": s.beta_nop_s_per_hop,
        "edge_hops": s.edge_hops,
        "rack_power_limit_w": s.rack_power_limit_w,
        "cooling": {
            "ambient_c": s.cooling.ambient_c,
            "r_coldplate": s.cooling.r_coldplate,
            "r_per_dram_layer": s.cooling.r_per_dram_layer,
            "r_bond": s.cooling.r_bond,
            "r_lateral": s.cooling.r_lateral,
            "flow_levels": [
                {"r_scale": f.r_scale, "pump_w": f.pump_w} for f in s.cooling.flow_levels
            ],
            "t_limit_c": s.cooling.t_limit_c,
            "heat_capacity_j_per_k": s.cooling.heat_capacity_j_per_k,
        },
        "comm_energy_noc_pj_per_byte_hop": s.comm_energy_noc_pj_per_byte_hop,
        "comm_energy_nop_pj_per_byte_hop": s.comm_energy_nop_pj_per_byte_hop,
    }


def model_to_dict(m: ModelSpec) -> dict[str, Any]:
    return {
        "schema": SCHEMA_VERSION,
        "name": m.name,
        "n_layers": m.n_layers,
        "n_heads": m.n_heads,
        "n_kv_heads": m.n_kv_heads,
        "d_head": m.d_head,
        "d_model": m.d_model,
        "d_ffn": m.d_ffn,
        "attn_variant": m.attn_variant.value,
        "dtype_bytes": m.dtype_bytes,
    }


def load_system(path: str) -> SystemSpec:
    with open(path) as f:
        return parse_system(json.load(f))


def load_model(path: str) -> ModelSpec:
    with open(path) as f:
        return parse_model(json.load(f))


def dump_json(obj: dict[str, Any]) -> str:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
