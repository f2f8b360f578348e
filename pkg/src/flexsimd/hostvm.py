"""Flexible host SIMD ISA and its functional VM.

The host ISA has three distinguishing features: vector instructions carry the
enabled-lane count directly in the encoding, scalar instructions carry a
destination-lane immediate so they can write any element of a vector register,
and a two-source PACK instruction writes exactly two selected destination
elements. Execution is checkpointed; assert and speculation failures roll the
architectural state back bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from . import fpmath
from .fpmath import SimFault
from .guest import ArchState, DType, Reg

MAX_LANES = 16  # 512-bit path, 32-bit elements
NUM_HOST_INT_REGS = 128
NUM_HOST_VEC_REGS = 128


class HostOp(Enum):
    VADD = "VADD"
    VSUB = "VSUB"
    VMUL = "VMUL"
    VDIV = "VDIV"
    VLD = "VLD"
    VST = "VST"
    SADD = "SADD"
    SSUB = "SSUB"
    SMUL = "SMUL"
    SDIV = "SDIV"
    SLD = "SLD"
    SST = "SST"
    SMOV = "SMOV"
    SCVT = "SCVT"
    FCMP = "FCMP"
    PACK = "PACK"
    SHUF = "SHUF"
    VSPLAT = "VSPLAT"
    EXTRACT = "EXTRACT"
    IADD = "IADD"
    ISUB = "ISUB"
    IMUL = "IMUL"
    IDIV = "IDIV"
    IMOV = "IMOV"
    ICMP = "ICMP"
    ILD = "ILD"
    IST = "IST"
    ASSERT = "ASSERT"
    EXIT = "EXIT"
    HALT = "HALT"


VECTOR_OPS = {HostOp.VADD, HostOp.VSUB, HostOp.VMUL, HostOp.VDIV, HostOp.VLD, HostOp.VST}
PERM_OPS = {HostOp.PACK, HostOp.SHUF, HostOp.VSPLAT, HostOp.EXTRACT}
SELECTIVE_SCALAR_OPS = {HostOp.SADD, HostOp.SSUB, HostOp.SMUL, HostOp.SDIV,
                        HostOp.SLD, HostOp.SMOV, HostOp.SCVT}
_FP_BINOPS = {HostOp.VADD: "ADD", HostOp.VSUB: "SUB", HostOp.VMUL: "MUL", HostOp.VDIV: "DIV",
              HostOp.SADD: "ADD", HostOp.SSUB: "SUB", HostOp.SMUL: "MUL", HostOp.SDIV: "DIV"}
_INT_BINOPS = {HostOp.IADD: "ADD", HostOp.ISUB: "SUB", HostOp.IMUL: "MUL", HostOp.IDIV: "DIV"}


# Source locations: ('i', idx) int register, ('v', idx, lane) vector element,
# ('v', idx, None) whole vector register, ('imm', value) immediate.
Loc = tuple


def fmt_loc(loc: Loc) -> str:
    if loc[0] == "i":
        return f"i{loc[1]}"
    if loc[0] == "imm":
        return f"#{loc[1]}"
    if loc[2] is None:
        return f"v{loc[1]}"
    return f"v{loc[1]}[{loc[2]}]"


@dataclass
class HostInstruction:
    op: HostOp
    dtype: Optional[DType] = None
    dst: Optional[Loc] = None  # ('i', idx) or ('v', idx)
    srcs: list[Loc] = field(default_factory=list)
    mask_k: Optional[int] = None
    dest_lane: Optional[int] = None
    pack_imm: Optional[tuple[int, int, int, int]] = None  # (n0, n1, n2, n3)
    shuf: Optional[tuple[int, int]] = None  # (source-b element, destination element)
    addr: Optional[tuple[Loc, int]] = None
    cond: Optional[str] = None
    expect_taken: Optional[bool] = None
    assert_id: Optional[int] = None
    exit_kind: Optional[str] = None
    exit_taken_pc: Optional[int] = None
    exit_fall_pc: Optional[int] = None
    live_out: list[tuple] = field(default_factory=list)  # exits: (guest Reg | 'flags', loc)
    speculative: bool = False
    spec_pairs: list[int] = field(default_factory=list)  # runtime-checked pair ids
    acct: str = "other"  # 'vec' | 'scalar_fp' | 'perm' | 'unvec_fp' | 'other'
    covers: int = 0  # guest FP instructions this instruction accounts for
    rdefs: list = field(default_factory=list)  # resources written (for timing)
    ruses: list = field(default_factory=list)  # resources read

    def __post_init__(self):
        if self.op is HostOp.PACK:
            n0, n1, n2, n3 = self.pack_imm
            if n1 == n3:
                raise ValueError("PACK immediate selects one destination element twice")
            if any(n >= MAX_LANES or n < 0 for n in (n0, n1, n2, n3)):
                raise ValueError("PACK immediate nibble out of range")

    def render(self) -> str:
        name = ("SPEC_" if self.speculative else "") + self.op.value
        dt = f".{self.dtype.value}" if self.dtype else ""
        parts = []
        if self.op is HostOp.ASSERT:
            want = "taken" if self.expect_taken else "not-taken"
            return f"ASSERT a{self.assert_id} {self.cond} {fmt_loc(self.srcs[0])}, {want}"
        if self.op is HostOp.EXIT:
            if self.exit_kind == "jmp":
                return f"EXIT jmp -> {self.exit_taken_pc}"
            tag = "side" if self.exit_kind == "side" else "br"
            return (f"EXIT {tag} {self.cond} {fmt_loc(self.srcs[0])} "
                    f"? {self.exit_taken_pc} : {self.exit_fall_pc}")
        if self.op is HostOp.HALT:
            return "HALT"
        if self.dst is not None:
            d = fmt_loc((*self.dst, None)) if self.dst[0] == "v" and len(self.dst) == 2 else fmt_loc(self.dst)
            if self.dest_lane is not None:
                d = f"v{self.dst[1]}[{self.dest_lane}]"
            parts.append(d)
        if self.addr is not None:
            base, off = self.addr
            parts.append(f"[{fmt_loc(base)}{off:+d}]")
        parts.extend(fmt_loc(s) for s in self.srcs)
        tail = ""
        if self.mask_k is not None:
            tail += f", k={self.mask_k}"
        if self.pack_imm is not None:
            n0, n1, n2, n3 = self.pack_imm
            tail += f", imm=({n0}->{n1}, {n2}->{n3})"
        if self.shuf is not None:
            tail += f", b[{self.shuf[0]}]->d{self.shuf[1]}"
        return f"{name}{dt} " + ", ".join(parts) + tail


@dataclass
class HostProgram:
    sb_id: int
    entry_pc: int
    code: list[HostInstruction]
    live_in: list[tuple] = field(default_factory=list)   # (guest Reg | 'flags', loc)
    live_out: list[tuple] = field(default_factory=list)  # (guest Reg | 'flags', loc)
    guest_region: set[int] = field(default_factory=set)
    spec_pairs: list[tuple[int, int]] = field(default_factory=list)  # code index pairs
    unroll_factor: int = 1
    multi_exit: bool = False
    mode: str = "scalar"
    code_base: int = 0  # synthetic code address for instruction fetch modeling

    def render(self) -> str:
        lines = [f"host sb{self.sb_id} @pc={self.entry_pc} mode={self.mode} "
                 f"unroll={self.unroll_factor} instrs={len(self.code)}"]
        for i, hi in enumerate(self.code):
            lines.append(f"  {i:3d}: {hi.render()}")
        return "\n".join(lines)

    def count(self, *ops: HostOp) -> int:
        return sum(1 for hi in self.code if hi.op in ops)

    def perm_count(self) -> int:
        return sum(1 for hi in self.code if hi.acct == "perm")


@dataclass
class Checkpoint:
    arch: ArchState
    int_regs: list[int]
    vregs: list[list[float]]
    entry_pc: int


@dataclass
class Outcome:
    kind: str  # 'completed' | 'assert_failed' | 'spec_failed' | 'fault'
    next_pc: Optional[int] = None
    halted: bool = False
    assert_id: Optional[int] = None
    detail: str = ""


@dataclass
class TraceEvent:
    """One dynamic instruction, as consumed by the timing and metrics stages."""

    name: str
    acct: str
    covers: int = 0
    mask_k: Optional[int] = None
    op: Optional[HostOp] = None
    dtype: Optional[DType] = None
    rdefs: tuple = ()
    ruses: tuple = ()
    addrs: tuple = ()  # (byte address, width) pairs touched
    code_addr: Optional[int] = None
    interp: bool = False


class HostVM:
    """Functional executor for translated superblocks."""

    def __init__(self, physical_bits: int = 512):
        self.physical_bits = physical_bits
        self.int_regs = [0] * NUM_HOST_INT_REGS
        self.vregs = [[0.0] * MAX_LANES for _ in range(NUM_HOST_VEC_REGS)]

    def checkpoint(self, state: ArchState) -> Checkpoint:
        return Checkpoint(
            arch=state.copy(),
            int_regs=list(self.int_regs),
            vregs=[list(v) for v in self.vregs],
            entry_pc=state.pc,
        )

    def restore(self, cp: Checkpoint, state: ArchState) -> None:
        state.int_regs[:] = cp.arch.int_regs
        state.fp_regs[:] = cp.arch.fp_regs
        state.memory[:] = cp.arch.memory
        state.pc = cp.arch.pc
        state.flags = cp.arch.flags
        state.halted = cp.arch.halted
        self.int_regs[:] = cp.int_regs
        for reg, vals in zip(self.vregs, cp.vregs):
            reg[:] = vals

    # -- operand access -----------------------------------------------------

    def read(self, loc: Loc):
        if loc[0] == "imm":
            return loc[1]
        if loc[0] == "i":
            return self.int_regs[loc[1]]
        return self.vregs[loc[1]][loc[2]]

    def _addr(self, instr: HostInstruction) -> int:
        base, off = instr.addr
        return self.read(base) + off

    # -- instruction semantics ----------------------------------------------

    def exec_masked_vector(self, instr: HostInstruction, memory: bytearray,
                           addrs: Optional[list] = None) -> None:
        """Vector op over lanes 0..k-1; lanes >= k stay bit-identical."""
        k = instr.mask_k
        dt = instr.dtype
        w = dt.width_bytes
        if instr.op is HostOp.VLD:
            base = self._addr(instr)
            dst = self.vregs[instr.dst[1]]
            for lane in range(k):
                dst[lane] = fpmath.load_value(memory, base + lane * w, dt.kind, dt.width_bits)
            if addrs is not None:
                addrs.extend((base + lane * w, w) for lane in range(k))
            return
        if instr.op is HostOp.VST:
            base = self._addr(instr)
            src = self.vregs[instr.srcs[0][1]]
            for lane in range(k):
                fpmath.store_value(memory, base + lane * w, dt.kind, dt.width_bits, src[lane])
            if addrs is not None:
                addrs.extend((base + lane * w, w) for lane in range(k))
            return
        op = _FP_BINOPS[instr.op]
        a = self.vregs[instr.srcs[0][1]]
        b = self.vregs[instr.srcs[1][1]]
        dst = self.vregs[instr.dst[1]]
        results = [fpmath.fp_binop(op, dt.width_bits, a[lane], b[lane]) for lane in range(k)]
        dst[:k] = results

    def exec_selective_scalar(self, instr: HostInstruction, memory: Optional[bytearray] = None,
                              addrs: Optional[list] = None) -> None:
        """Scalar op writing only the destination-lane element of a vector register."""
        dt = instr.dtype
        lane = instr.dest_lane or 0
        if instr.op is HostOp.SLD:
            addr = self._addr(instr)
            value = fpmath.load_value(memory, addr, dt.kind, dt.width_bits)
            if addrs is not None:
                addrs.append((addr, dt.width_bytes))
        elif instr.op is HostOp.SMOV:
            # Register moves copy raw 64-bit contents; narrowing only happens
            # at arithmetic, converts, and memory boundaries.
            value = self.read(instr.srcs[0])
        elif instr.op is HostOp.SCVT:
            from .guest import convert

            value = convert(dt, self.read(instr.srcs[0]))
        else:
            op = _FP_BINOPS[instr.op]
            a, b = (self.read(s) for s in instr.srcs)
            value = fpmath.fp_binop(op, dt.width_bits, a, b)
        self.vregs[instr.dst[1]][lane] = value

    def exec_pack(self, instr: HostInstruction) -> None:
        """dst[n1] := s1[n0]; dst[n3] := s2[n2]; every other element preserved."""
        n0, n1, n2, n3 = instr.pack_imm
        v1 = self.vregs[instr.srcs[0][1]][n0]
        v2 = self.vregs[instr.srcs[1][1]][n2]
        dst = self.vregs[instr.dst[1]]
        dst[n1] = v1
        dst[n3] = v2

    def exec_shuf(self, instr: HostInstruction) -> None:
        """Conventional two-source shuffle/blend: writes the whole register."""
        src_lane, dst_lane = instr.shuf
        a = self.vregs[instr.srcs[0][1]]
        b_val = self.vregs[instr.srcs[1][1]][src_lane]
        result = list(a)
        result[dst_lane] = b_val
        self.vregs[instr.dst[1]][:] = result

    def _exec(self, instr: HostInstruction, state: ArchState, addrs: list) -> None:
        op = instr.op
        if op in VECTOR_OPS:
            self.exec_masked_vector(instr, state.memory, addrs)
        elif op in SELECTIVE_SCALAR_OPS:
            self.exec_selective_scalar(instr, state.memory, addrs)
        elif op is HostOp.SST:
            addr = self._addr(instr)
            fpmath.store_value(state.memory, addr, instr.dtype.kind, instr.dtype.width_bits,
                               self.read(instr.srcs[0]))
            addrs.append((addr, instr.dtype.width_bytes))
        elif op is HostOp.PACK:
            self.exec_pack(instr)
        elif op is HostOp.SHUF:
            self.exec_shuf(instr)
        elif op is HostOp.VSPLAT:
            value = self.read(instr.srcs[0])
            reg = self.vregs[instr.dst[1]]
            reg[:] = [value] * MAX_LANES
        elif op is HostOp.EXTRACT:
            value = self.vregs[instr.srcs[0][1]][instr.srcs[0][2]]
            reg = self.vregs[instr.dst[1]]
            reg[:] = [0.0] * MAX_LANES
            reg[0] = value
        elif op is HostOp.FCMP:
            a, b = (self.read(s) for s in instr.srcs)
            self.int_regs[instr.dst[1]] = fpmath.compare(a, b)
        elif op is HostOp.ICMP:
            a, b = (self.read(s) for s in instr.srcs)
            self.int_regs[instr.dst[1]] = fpmath.compare(a, b)
        elif op is HostOp.IMOV:
            self.int_regs[instr.dst[1]] = fpmath.wrap_i32(int(self.read(instr.srcs[0])))
        elif op in _INT_BINOPS:
            a, b = (self.read(s) for s in instr.srcs)
            self.int_regs[instr.dst[1]] = fpmath.int_binop(_INT_BINOPS[op], a, b)
        elif op is HostOp.ILD:
            addr = self._addr(instr)
            self.int_regs[instr.dst[1]] = fpmath.load_value(state.memory, addr, "i", 32)
            addrs.append((addr, 4))
        elif op is HostOp.IST:
            addr = self._addr(instr)
            fpmath.store_value(state.memory, addr, "i", 32, self.read(instr.srcs[0]))
            addrs.append((addr, 4))
        else:
            raise SimFault(f"host VM cannot execute {op}")

    # -- superblock execution ------------------------------------------------

    def run_superblock(self, hp: HostProgram, state: ArchState,
                       trace: Optional[list] = None,
                       code_base: int = 0) -> Outcome:
        """Execute translated code with entry checkpointing and rollback.

        On completion the architectural state is committed; on assert or
        speculation failure it is restored bit for bit and the caller resumes
        interpretation of the original guest path.
        """
        cp = self.checkpoint(state)
        self._bind_live_in(hp, state)
        spec_log: dict[int, list[tuple[int, int]]] = {}

        for idx, instr in enumerate(hp.code):
            addrs: list[tuple[int, int]] = []
            if instr.op is HostOp.ASSERT:
                flag = self.read(instr.srcs[0])
                holds = fpmath.cond_holds(instr.cond, flag)
                self._emit_event(trace, instr, addrs, code_base + 4 * idx)
                if holds != instr.expect_taken:
                    self.restore(cp, state)
                    return Outcome("assert_failed", assert_id=instr.assert_id)
                continue
            if instr.op in (HostOp.EXIT, HostOp.HALT):
                self._emit_event(trace, instr, addrs, code_base + 4 * idx)
                if instr.op is HostOp.HALT:
                    self._commit(instr, state)
                    state.pc = instr.exit_taken_pc
                    state.halted = True
                    return Outcome("completed", halted=True)
                if instr.exit_kind == "jmp":
                    next_pc = instr.exit_taken_pc
                else:
                    taken = fpmath.cond_holds(instr.cond, self.read(instr.srcs[0]))
                    if instr.exit_kind == "side" and taken == instr.expect_taken:
                        continue  # the branch stayed on the followed path
                    next_pc = instr.exit_taken_pc if taken else instr.exit_fall_pc
                self._commit(instr, state)
                state.pc = next_pc
                return Outcome("completed", next_pc=next_pc)

            try:
                self._exec(instr, state, addrs)
            except SimFault as exc:
                # Speculatively scheduled code may fault on a path the guest
                # never takes; recovery is rollback plus reinterpretation.
                self.restore(cp, state)
                return Outcome("fault", detail=str(exc))
            self._emit_event(trace, instr, addrs, code_base + 4 * idx)

            if instr.spec_pairs and addrs:
                spec_log[idx] = addrs
                for a_idx, b_idx in hp.spec_pairs:
                    partner = a_idx if idx == b_idx else (b_idx if idx == a_idx else None)
                    if partner is None or partner not in spec_log:
                        continue
                    if _ranges_overlap(spec_log[partner], addrs):
                        self.restore(cp, state)
                        return Outcome("spec_failed", detail=f"aliasing pair ({a_idx}, {b_idx})")

        raise SimFault("superblock fell off the end without an exit")

    def _bind_live_in(self, hp: HostProgram, state: ArchState) -> None:
        for target, loc in hp.live_in:
            if target == "flags":
                value = state.flags
            elif target.bank == "r":
                value = state.int_regs[target.idx]
            else:
                value = state.fp_regs[target.idx]
            if loc[0] == "i":
                self.int_regs[loc[1]] = value
            else:
                self.vregs[loc[1]][loc[2]] = value

    def _commit(self, instr: HostInstruction, state: ArchState) -> None:
        for target, loc in instr.live_out:
            value = self.read(loc)
            if target == "flags":
                state.flags = value
            elif target.bank == "r":
                state.int_regs[target.idx] = value
            else:
                state.fp_regs[target.idx] = value

    def _emit_event(self, trace, instr: HostInstruction, addrs, code_addr) -> None:
        if trace is None:
            return
        trace.append(TraceEvent(
            name=instr.op.value,
            acct=instr.acct,
            covers=instr.covers,
            mask_k=instr.mask_k,
            op=instr.op,
            dtype=instr.dtype,
            rdefs=tuple(instr.rdefs),
            ruses=tuple(instr.ruses),
            addrs=tuple(addrs),
            code_addr=code_addr,
        ))


def _ranges_overlap(a: list[tuple[int, int]], b: list[tuple[int, int]]) -> bool:
    for lo_a, w_a in a:
        for lo_b, w_b in b:
            if lo_a < lo_b + w_b and lo_b < lo_a + w_a:
                return True
    return False


def exec_masked_vector(instr: HostInstruction, vm: HostVM, memory: bytearray) -> None:
    vm.exec_masked_vector(instr, memory)


def exec_selective_scalar(instr: HostInstruction, vm: HostVM) -> None:
    vm.exec_selective_scalar(instr)


def exec_pack(instr: HostInstruction, vm: HostVM) -> None:
    vm.exec_pack(instr)


def run_superblock(hp: HostProgram, state: ArchState, vm: HostVM,
                   trace: Optional[list] = None) -> Outcome:
    return vm.run_superblock(hp, state, trace)
