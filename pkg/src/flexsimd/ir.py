"""Translation IR: superblocks, SSA values, and the dependence graph types."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .guest import DType, GuestInstruction, Reg


class IROp(Enum):
    LD = "LD"
    ST = "ST"
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    DIV = "DIV"
    MOV = "MOV"
    CVT = "CVT"
    CMP = "CMP"
    ASSERT = "ASSERT"
    EXIT = "EXIT"
    # Pseudo ops introduced by the vectorizer.
    GATHER = "GATHER"    # collect scalar values into one vector register
    EXTRACT = "EXTRACT"  # move one vector element out to a scalar position
    SPLAT = "SPLAT"      # broadcast one value across lanes


ARITH_IROPS = {IROp.ADD, IROp.SUB, IROp.MUL, IROp.DIV}
MEM_IROPS = {IROp.LD, IROp.ST}


@dataclass(frozen=True)
class Const:
    value: float | int

    def __str__(self) -> str:
        return f"#{self.value}"


Src = int | Const  # SSA value id or immediate


@dataclass
class TraceOp:
    """One guest instruction on the followed superblock path (pre-SSA)."""

    gi: GuestInstruction
    guest_pc: int
    kind: str = "op"  # 'op' | 'assert' | 'exit'
    expect_taken: Optional[bool] = None  # asserts: direction the path assumed
    exit_kind: Optional[str] = None  # 'br' | 'jmp' | 'halt'
    exit_taken_pc: Optional[int] = None
    exit_fall_pc: Optional[int] = None
    copy_index: int = 0  # unroll copy this op belongs to


@dataclass
class Value:
    vid: int
    kind: str  # 'i' | 'f' | 'flag'
    source: tuple  # ('input', Reg) | ('input-flags',) | ('def', iid)
    dtype: Optional[DType] = None


@dataclass
class IRInst:
    iid: int
    op: IROp
    dtype: Optional[DType] = None
    dst: Optional[int] = None
    srcs: list[Src] = field(default_factory=list)
    addr: Optional[tuple[Src, int]] = None  # (base value/const, byte offset)
    cond: Optional[str] = None  # comparison relation for ASSERT / EXIT br
    expect_taken: Optional[bool] = None
    exit_kind: Optional[str] = None
    exit_taken_pc: Optional[int] = None
    exit_fall_pc: Optional[int] = None
    assert_id: Optional[int] = None
    guest_pc: Optional[int] = None
    fp: bool = False
    copy_index: int = 0
    # Selective-write rewrite target: (group id, lane) when this scalar result
    # is written straight into a shared vector register element.
    swr_slot: Optional[tuple[int, int]] = None
    # Exits commit the register state captured at their trace position.
    exit_env: Optional[dict] = None  # Reg -> Src
    exit_flags: Optional[Src] = None

    @property
    def is_mem(self) -> bool:
        return self.op in MEM_IROPS

    @property
    def is_store(self) -> bool:
        return self.op is IROp.ST

    def render(self) -> str:
        def s(x):
            return str(x) if isinstance(x, Const) else f"v{x}"

        dt = f".{self.dtype.value}" if self.dtype else ""
        if self.op is IROp.ASSERT:
            want = "taken" if self.expect_taken else "not-taken"
            return f"assert a{self.assert_id}: {self.cond} {s(self.srcs[0])} {want}"
        if self.op is IROp.EXIT:
            if self.exit_kind == "halt":
                return "exit halt"
            if self.exit_kind == "jmp":
                return f"exit jmp -> {self.exit_taken_pc}"
            return f"exit br {self.cond} {s(self.srcs[0])} ? {self.exit_taken_pc} : {self.exit_fall_pc}"
        if self.op is IROp.LD:
            return f"v{self.dst} = LD{dt} [{s(self.addr[0])}{self.addr[1]:+d}]"
        if self.op is IROp.ST:
            return f"ST{dt} [{s(self.addr[0])}{self.addr[1]:+d}], {s(self.srcs[0])}"
        if self.op is IROp.CMP:
            return f"v{self.dst} = CMP{dt} {s(self.srcs[0])}, {s(self.srcs[1])}"
        args = ", ".join(s(x) for x in self.srcs)
        return f"v{self.dst} = {self.op.value}{dt} {args}"


@dataclass
class Superblock:
    """Single-entry optimization region carved out of the guest program."""

    sb_id: int
    seed_pc: int
    guest_blocks: list[int]
    trace: list[TraceOp]
    region: set[int]  # guest pcs covered by this superblock
    unroll_factor: int = 1
    multi_exit: bool = False
    loop_header: Optional[int] = None  # set when the block is a single-block loop

    # Populated by to_ssa and later stages.
    ir: list[IRInst] = field(default_factory=list)
    values: dict[int, Value] = field(default_factory=dict)
    reg_out: dict[Reg, Src] = field(default_factory=dict)
    flags_out: Optional[Src] = None
    next_vid: int = 0

    @property
    def asserts(self) -> list[IRInst]:
        return [i for i in self.ir if i.op is IROp.ASSERT]

    def new_value(self, kind: str, source: tuple, dtype: Optional[DType] = None) -> int:
        vid = self.next_vid
        self.next_vid += 1
        self.values[vid] = Value(vid, kind, source, dtype)
        return vid

    def render(self) -> str:
        lines = [
            f"superblock sb{self.sb_id} @pc={self.seed_pc} blocks={self.guest_blocks} "
            f"unroll={self.unroll_factor} multi_exit={self.multi_exit}"
        ]
        if self.ir:
            for inst in self.ir:
                lines.append(f"  [{inst.iid:3d}] {inst.render()}  (pc {inst.guest_pc})")
        else:
            for top in self.trace:
                tag = {"op": "  ", "assert": "A ", "exit": "X "}[top.kind]
                lines.append(f"  {tag}{top.gi.render()}  (pc {top.guest_pc}, copy {top.copy_index})")
        outs = ", ".join(f"{r}<-{'#' + str(v.value) if isinstance(v, Const) else 'v' + str(v)}"
                         for r, v in sorted(self.reg_out.items()))
        if outs:
            lines.append(f"  out: {outs}")
        return "\n".join(lines)


@dataclass
class DepGraph:
    """Data dependences plus a classification for every memory pair."""

    nodes: list[int]
    true_edges: set[tuple[int, int]] = field(default_factory=set)
    mem_edges: list[tuple[int, int, str]] = field(default_factory=list)  # ordering edges
    alias: dict[tuple[int, int], str] = field(default_factory=dict)  # all mem pairs
    addr_of: dict[int, Optional[tuple[Optional[int], int]]] = field(default_factory=dict)
    succs: dict[int, set[int]] = field(default_factory=dict)
    preds: dict[int, set[int]] = field(default_factory=dict)

    def add_true_edge(self, a: int, b: int) -> None:
        if (a, b) in self.true_edges:
            return
        self.true_edges.add((a, b))
        self.succs.setdefault(a, set()).add(b)
        self.preds.setdefault(b, set()).add(a)

    def hard_edges(self) -> list[tuple[int, int]]:
        """Edges that can never be broken: true deps plus must-alias ordering."""
        edges = list(self.true_edges)
        edges.extend((a, b) for a, b, kind in self.mem_edges if kind == "must")
        return edges

    def may_edges(self) -> list[tuple[int, int]]:
        return [(a, b) for a, b, kind in self.mem_edges if kind == "may"]
