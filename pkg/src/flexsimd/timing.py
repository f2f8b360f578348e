"""Trace-driven, cycle-approximate in-order two-issue pipeline with caches.

Timing is decoupled from functional execution: the VM produces a dynamic
instruction stream (with touched addresses), and this model replays it against
functional-unit, port, and cache constraints. A k-lane vector op occupies one
vector unit for the same latency as its scalar counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

from .hostvm import HostOp, TraceEvent


@dataclass
class TimingConfig:
    issue_width: int = 2
    # Scalar functional units (count, latency); mul/div units share hardware.
    int_simple_units: int = 2
    int_simple_lat: int = 1
    int_muldiv_units: int = 2
    int_mul_lat: int = 3
    int_div_lat: int = 10
    fp_simple_units: int = 2
    fp_simple_lat: int = 2
    fp_muldiv_units: int = 2
    fp_mul_lat: int = 4
    fp_div_lat: int = 20
    # Vector functional units: one of each class, same latencies.
    vec_simple_units: int = 1
    vec_muldiv_units: int = 1
    # Register files (informational; enforced at translation time).
    int_regs: int = 128
    vec_regs: int = 128
    fp_regs: int = 32
    # Memory system.
    ls_ports: int = 1
    l1i_size_kb: int = 64
    l1i_ways: int = 4
    l1i_line: int = 64
    l1i_hit: int = 1
    l1d_size_kb: int = 64
    l1d_ways: int = 4
    l1d_line: int = 64
    l1d_hit: int = 1
    l2_size_kb: int = 512
    l2_ways: int = 8
    l2_line: int = 64
    l2_hit: int = 6
    mem_latency: int = 128
    # Cost per guest instruction executed in interpretation mode.
    interp_cost: int = 4

    @classmethod
    def from_file(cls, path: str) -> "TimingConfig":
        cfg = cls()
        valid = {f.name for f in fields(cls)}
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, val = line.partition("=")
                key = key.strip()
                if not sep or key not in valid:
                    raise ValueError(f"{path}:{line_no}: unknown timing parameter {key!r}")
                setattr(cfg, key, int(val.strip()))
        return cfg


class Cache:
    """Set-associative LRU cache level."""

    def __init__(self, size_kb: int, ways: int, line: int, hit_lat: int, name: str = ""):
        self.line = line
        self.ways = ways
        self.hit_lat = hit_lat
        self.name = name
        self.n_sets = max(1, (size_kb * 1024) // (line * ways))
        self.sets: list[list[int]] = [[] for _ in range(self.n_sets)]
        self.hits = 0
        self.misses = 0

    def access(self, addr: int) -> bool:
        tag = addr // self.line
        ways = self.sets[tag % self.n_sets]
        if tag in ways:
            ways.remove(tag)
            ways.append(tag)
            self.hits += 1
            return True
        ways.append(tag)
        if len(ways) > self.ways:
            ways.pop(0)  # least recently used
        self.misses += 1
        return False


class CacheHierarchy:
    def __init__(self, cfg: TimingConfig):
        self.cfg = cfg
        self.l1i = Cache(cfg.l1i_size_kb, cfg.l1i_ways, cfg.l1i_line, cfg.l1i_hit, "l1i")
        self.l1d = Cache(cfg.l1d_size_kb, cfg.l1d_ways, cfg.l1d_line, cfg.l1d_hit, "l1d")
        self.l2 = Cache(cfg.l2_size_kb, cfg.l2_ways, cfg.l2_line, cfg.l2_hit, "l2")

    def _through(self, first: Cache, addr: int) -> int:
        lat = first.hit_lat
        if not first.access(addr):
            lat += self.l2.hit_lat
            if not self.l2.access(addr):
                lat += self.cfg.mem_latency
        return lat

    def data_access(self, addr: int, is_write: bool = False) -> int:
        # Write-allocate, write-back: writes walk the same path as reads.
        return self._through(self.l1d, addr)

    def ifetch(self, addr: int) -> int:
        return self._through(self.l1i, addr)


def cache_access(hier: CacheHierarchy, addr: int, is_write: bool = False) -> tuple[str, int]:
    """One data access: returns ('hit'|'miss', cumulative latency)."""
    before = hier.l1d.hits
    lat = hier.data_access(addr, is_write)
    return ("hit" if hier.l1d.hits > before else "miss", lat)


_MEM_OPS = {HostOp.VLD, HostOp.VST, HostOp.SLD, HostOp.SST, HostOp.ILD, HostOp.IST}
_LOAD_OPS = {HostOp.VLD, HostOp.SLD, HostOp.ILD}


def _fu_class(op: Optional[HostOp]) -> str:
    if op in _MEM_OPS:
        return "mem"
    if op in (HostOp.VMUL, HostOp.VDIV):
        return "vec_muldiv"
    if op in (HostOp.VADD, HostOp.VSUB, HostOp.PACK, HostOp.SHUF,
              HostOp.VSPLAT, HostOp.EXTRACT):
        return "vec_simple"
    if op in (HostOp.SMUL, HostOp.SDIV):
        return "fp_muldiv"
    if op in (HostOp.SADD, HostOp.SSUB, HostOp.SMOV, HostOp.SCVT, HostOp.FCMP):
        return "fp_simple"
    if op in (HostOp.IMUL, HostOp.IDIV):
        return "int_muldiv"
    return "int_simple"


def _fu_units(cls: str, cfg: TimingConfig) -> int:
    return {
        "int_simple": cfg.int_simple_units,
        "int_muldiv": cfg.int_muldiv_units,
        "fp_simple": cfg.fp_simple_units,
        "fp_muldiv": cfg.fp_muldiv_units,
        "vec_simple": cfg.vec_simple_units,
        "vec_muldiv": cfg.vec_muldiv_units,
        "mem": cfg.ls_ports,
    }[cls]


def _latency(ev: TraceEvent, cfg: TimingConfig, hier: CacheHierarchy) -> int:
    op = ev.op
    if op in _MEM_OPS:
        if not ev.addrs:
            return cfg.l1d_hit
        lat = 0
        seen_lines = set()
        for addr, _w in ev.addrs:
            line = addr // cfg.l1d_line
            if line in seen_lines:
                continue
            seen_lines.add(line)
            lat = max(lat, hier.data_access(addr, op not in _LOAD_OPS))
        return lat
    if op in (HostOp.VMUL, HostOp.SMUL):
        return cfg.fp_mul_lat
    if op in (HostOp.VDIV, HostOp.SDIV):
        return cfg.fp_div_lat
    if op in (HostOp.VADD, HostOp.VSUB, HostOp.SADD, HostOp.SSUB, HostOp.SMOV,
              HostOp.SCVT, HostOp.FCMP, HostOp.PACK, HostOp.SHUF,
              HostOp.VSPLAT, HostOp.EXTRACT):
        return cfg.fp_simple_lat
    if op is HostOp.IMUL:
        return cfg.int_mul_lat
    if op is HostOp.IDIV:
        return cfg.int_div_lat
    return cfg.int_simple_lat


@dataclass
class CycleReport:
    total_cycles: int = 0
    fu_busy: dict = field(default_factory=dict)
    cache_stats: dict = field(default_factory=dict)  # level -> (hits, misses)
    stalls: dict = field(default_factory=dict)  # 'raw' | 'structural' | 'memory'
    interp_cycles: int = 0
    instructions: int = 0


def simulate(events: list[TraceEvent], cfg: Optional[TimingConfig] = None) -> CycleReport:
    """In-order issue of at most `issue_width` instructions per cycle, subject
    to functional-unit availability and operand readiness; fully pipelined
    units; loads and stores pass through the cache hierarchy."""
    cfg = cfg or TimingConfig()
    hier = CacheHierarchy(cfg)
    report = CycleReport(stalls={"raw": 0, "structural": 0, "memory": 0})

    res_ready: dict = {}
    loaded_res: set = set()  # resources last written by a load
    cycle = 0
    issued = 0
    fu_used: dict[str, int] = {}
    fetch_ready: Optional[int] = None
    i = 0
    n = len(events)

    while i < n:
        ev = events[i]
        if ev.interp:
            cycle += cfg.interp_cost
            report.interp_cycles += cfg.interp_cost
            report.instructions += 1
            issued = 0
            fu_used = {}
            fetch_ready = None
            i += 1
            continue

        if fetch_ready is None:
            extra = 0
            if ev.code_addr is not None:
                extra = hier.ifetch(ev.code_addr) - cfg.l1i_hit
            fetch_ready = cycle + max(0, extra)

        stall = None
        if fetch_ready > cycle:
            stall = "memory"
        elif issued >= cfg.issue_width:
            stall = "width"
        else:
            cls = _fu_class(ev.op)
            if fu_used.get(cls, 0) >= _fu_units(cls, cfg):
                stall = "structural"
            else:
                for r in ev.ruses:
                    if res_ready.get(r, 0) > cycle:
                        stall = "memory" if r in loaded_res else "raw"
                        break
                else:
                    for r in ev.rdefs:
                        if res_ready.get(r, 0) > cycle:
                            stall = "structural"  # write-after-write on a pending result
                            break
        if stall is not None:
            if stall != "width":
                report.stalls[stall] = report.stalls.get(stall, 0) + 1
            cycle += 1
            issued = 0
            fu_used = {}
            continue

        lat = _latency(ev, cfg, hier)
        cls = _fu_class(ev.op)
        is_load = ev.op in _LOAD_OPS
        for r in ev.rdefs:
            res_ready[r] = cycle + lat
            if is_load:
                loaded_res.add(r)
            else:
                loaded_res.discard(r)
        fu_used[cls] = fu_used.get(cls, 0) + 1
        report.fu_busy[cls] = report.fu_busy.get(cls, 0) + 1
        issued += 1
        report.instructions += 1
        fetch_ready = None
        i += 1

    drain = max(res_ready.values(), default=0)
    report.total_cycles = max(cycle, drain)
    report.cache_stats = {
        "l1i": (hier.l1i.hits, hier.l1i.misses),
        "l1d": (hier.l1d.hits, hier.l1d.misses),
        "l2": (hier.l2.hits, hier.l2.misses),
    }
    return report
