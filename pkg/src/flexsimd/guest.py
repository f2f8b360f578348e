"""Scalar guest ISA: kernel file parsing, architectural state, profiling interpreter.

The interpreter is the correctness oracle for every other execution mode:
whatever the translated/vectorized pipeline produces must match its final
architectural state bit for bit.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Optional

from . import fpmath
from .fpmath import DivideByZeroFault, MemoryFault, SimFault


class Opcode(Enum):
    LD = "LD"
    ST = "ST"
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    DIV = "DIV"
    MOV = "MOV"
    CVT = "CVT"
    CMP = "CMP"
    BR = "BR"
    JMP = "JMP"
    HALT = "HALT"


ARITH_OPS = {Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV}
CONDITIONS = ("eq", "ne", "lt", "le", "gt", "ge")

NUM_INT_REGS = 32
NUM_FP_REGS = 32


class DType(Enum):
    f32 = "f32"
    f64 = "f64"
    i32 = "i32"

    @property
    def width_bits(self) -> int:
        return 64 if self is DType.f64 else 32

    @property
    def width_bytes(self) -> int:
        return self.width_bits // 8

    @property
    def kind(self) -> str:
        return "i" if self is DType.i32 else "f"

    @property
    def is_fp(self) -> bool:
        return self is not DType.i32


class Reg(NamedTuple):
    bank: str  # 'r' integer, 'f' floating point
    idx: int

    def __str__(self) -> str:
        return f"{self.bank}{self.idx}"


@dataclass(frozen=True)
class Imm:
    value: float | int

    def __str__(self) -> str:
        return str(self.value)


Operand = Reg | Imm


@dataclass
class GuestInstruction:
    opcode: Opcode
    dtype: Optional[DType] = None
    dst: Optional[Reg] = None
    srcs: list[Operand] = field(default_factory=list)
    mem: Optional[tuple[Reg, int]] = None  # (base register, byte offset)
    br_cond: Optional[str] = None
    br_target: Optional[str] = None  # label text
    br_target_pc: Optional[int] = None  # resolved instruction index
    line_no: int = 0

    @property
    def fp(self) -> bool:
        # CMP produces flags, BR/JMP/HALT carry no data: none of those are
        # part of the floating-point data stream.
        if self.dtype is None or not self.dtype.is_fp:
            return False
        return self.opcode in (Opcode.LD, Opcode.ST, Opcode.MOV, Opcode.CVT) or self.opcode in ARITH_OPS

    def render(self) -> str:
        op = self.opcode.value + (f".{self.dtype.value}" if self.dtype else "")
        if self.opcode is Opcode.HALT:
            return "HALT"
        if self.opcode is Opcode.JMP:
            return f"JMP {self.br_target}"
        if self.opcode is Opcode.BR:
            return f"BR {self.br_cond}, {self.br_target}"
        if self.opcode is Opcode.LD:
            base, off = self.mem
            return f"{op} {self.dst}, [{base}{off:+d}]"
        if self.opcode is Opcode.ST:
            base, off = self.mem
            return f"{op} [{base}{off:+d}], {self.srcs[0]}"
        if self.opcode is Opcode.CMP:
            return f"{op} {self.srcs[0]}, {self.srcs[1]}"
        args = ", ".join(str(s) for s in self.srcs)
        return f"{op} {self.dst}, {args}"


@dataclass
class GuestProgram:
    instructions: list[GuestInstruction]
    labels: dict[str, int]
    entry: int = 0
    arena_size: int = 0
    mem_init: list[tuple[int, DType, float | int]] = field(default_factory=list)
    reg_init: list[tuple[Reg, float | int]] = field(default_factory=list)
    name: str = "kernel"


class KernelError(Exception):
    """Raised for malformed kernel files; carries the offending line number."""

    def __init__(self, msg: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {msg}" if line_no is not None else msg)


_MEM_RE = re.compile(r"^\[\s*(r\d+)\s*(?:([+-])\s*(\d+))?\s*\]$")
_REG_RE = re.compile(r"^([rf])(\d+)$")
_LABEL_RE = re.compile(r"^([A-Za-z_][\w.-]*):$")


def _parse_reg(tok: str, line_no: int) -> Reg:
    m = _REG_RE.match(tok)
    if not m:
        raise KernelError(f"expected register, got {tok!r}", line_no)
    bank, idx = m.group(1), int(m.group(2))
    limit = NUM_INT_REGS if bank == "r" else NUM_FP_REGS
    if idx >= limit:
        raise KernelError(f"register {tok} out of range (0..{limit - 1})", line_no)
    return Reg(bank, idx)


def _parse_operand(tok: str, dtype: DType, line_no: int) -> Operand:
    if _REG_RE.match(tok):
        return _parse_reg(tok, line_no)
    try:
        if dtype is DType.i32:
            return Imm(int(tok, 0))
        value = float(tok)
    except ValueError:
        raise KernelError(f"bad operand {tok!r}", line_no) from None
    if fpmath.is_nan(value):
        raise KernelError("NaN constants are rejected", line_no)
    if dtype is DType.f32:
        value = fpmath.round_f32(value)
    return Imm(value)


def _parse_mem(tok: str, line_no: int) -> tuple[Reg, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise KernelError(f"expected memory operand [rN+off], got {tok!r}", line_no)
    base = _parse_reg(m.group(1), line_no)
    off = int(m.group(3)) if m.group(3) else 0
    if m.group(2) == "-":
        off = -off
    return base, off


def _split_args(rest: str) -> list[str]:
    return [a.strip() for a in rest.split(",")] if rest.strip() else []


def parse_program(text: str, name: str = "kernel") -> GuestProgram:
    """Parse a kernel file into a validated GuestProgram.

    Format: `arena <bytes>` header, optional `init <addr> <dtype> <value>` and
    `reg <reg> <value>` lines, then labels (`name:`) and one instruction per
    line. `#` starts a comment.
    """
    instructions: list[GuestInstruction] = []
    labels: dict[str, int] = {}
    arena_size = 0
    mem_init: list[tuple[int, DType, float | int]] = []
    reg_init: list[tuple[Reg, float | int]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue

        if line.startswith("arena "):
            arena_size = int(line.split()[1])
            continue
        if line.startswith("init "):
            parts = line.split()
            if len(parts) != 4:
                raise KernelError("init takes <addr> <dtype> <value>", line_no)
            addr = int(parts[1], 0)
            try:
                dt = DType(parts[2])
            except ValueError:
                raise KernelError(f"unknown dtype {parts[2]!r}", line_no) from None
            val = int(parts[3], 0) if dt is DType.i32 else float(parts[3])
            if dt is not DType.i32 and fpmath.is_nan(val):
                raise KernelError("NaN init values are rejected", line_no)
            if dt is DType.f32:
                val = fpmath.round_f32(val)
            mem_init.append((addr, dt, val))
            continue
        if line.startswith("reg "):
            parts = line.split()
            if len(parts) != 3:
                raise KernelError("reg takes <register> <value>", line_no)
            reg = _parse_reg(parts[1], line_no)
            if reg.bank == "r":
                val: float | int = int(parts[2], 0)
            else:
                val = float(parts[2])
                if fpmath.is_nan(val):
                    raise KernelError("NaN register values are rejected", line_no)
            reg_init.append((reg, val))
            continue

        m = _LABEL_RE.match(line)
        if m:
            label = m.group(1)
            if label in labels:
                raise KernelError(f"duplicate label {label!r}", line_no)
            labels[label] = len(instructions)
            continue

        instructions.append(_parse_instruction(line, line_no))

    program = GuestProgram(
        instructions=instructions,
        labels=labels,
        arena_size=arena_size,
        mem_init=mem_init,
        reg_init=reg_init,
        name=name,
    )
    _validate(program)
    return program


def _parse_instruction(line: str, line_no: int) -> GuestInstruction:
    head, _, rest = line.partition(" ")
    mnemonic, _, dt_text = head.partition(".")
    mnemonic = mnemonic.upper()

    if mnemonic == "HALT":
        return GuestInstruction(Opcode.HALT, line_no=line_no)
    if mnemonic == "JMP":
        target = rest.strip()
        if not target:
            raise KernelError("JMP needs a target label", line_no)
        return GuestInstruction(Opcode.JMP, br_target=target, line_no=line_no)
    if mnemonic == "BR":
        args = _split_args(rest)
        if len(args) != 2:
            raise KernelError("BR takes <cond>, <label>", line_no)
        cond = args[0].lower()
        if cond not in CONDITIONS:
            raise KernelError(f"unknown condition {cond!r}", line_no)
        return GuestInstruction(Opcode.BR, br_cond=cond, br_target=args[1], line_no=line_no)

    try:
        opcode = Opcode(mnemonic)
    except ValueError:
        raise KernelError(f"unknown opcode {mnemonic!r}", line_no) from None
    if not dt_text:
        raise KernelError(f"{mnemonic} needs a .dtype suffix", line_no)
    try:
        dtype = DType(dt_text)
    except ValueError:
        raise KernelError(f"unknown dtype {dt_text!r}", line_no) from None

    args = _split_args(rest)

    if opcode is Opcode.LD:
        if len(args) != 2:
            raise KernelError("LD takes <dst>, <[mem]>", line_no)
        dst = _parse_reg(args[0], line_no)
        _check_bank(dst, dtype, line_no)
        return GuestInstruction(opcode, dtype, dst=dst, mem=_parse_mem(args[1], line_no), line_no=line_no)
    if opcode is Opcode.ST:
        if len(args) != 2:
            raise KernelError("ST takes <[mem]>, <src>", line_no)
        src = _parse_operand(args[1], dtype, line_no)
        if isinstance(src, Reg):
            _check_bank(src, dtype, line_no)
        return GuestInstruction(opcode, dtype, srcs=[src], mem=_parse_mem(args[0], line_no), line_no=line_no)
    if opcode is Opcode.CMP:
        if len(args) != 2:
            raise KernelError("CMP takes two sources", line_no)
        srcs = [_parse_operand(a, dtype, line_no) for a in args]
        return GuestInstruction(opcode, dtype, srcs=srcs, line_no=line_no)
    if opcode in (Opcode.MOV, Opcode.CVT):
        if len(args) != 2:
            raise KernelError(f"{mnemonic} takes <dst>, <src>", line_no)
        dst = _parse_reg(args[0], line_no)
        if opcode is Opcode.MOV:
            _check_bank(dst, dtype, line_no)
        src = _parse_operand(args[1], dtype, line_no)
        return GuestInstruction(opcode, dtype, dst=dst, srcs=[src], line_no=line_no)
    if opcode in ARITH_OPS:
        if len(args) != 3:
            raise KernelError(f"{mnemonic} takes <dst>, <src1>, <src2>", line_no)
        dst = _parse_reg(args[0], line_no)
        _check_bank(dst, dtype, line_no)
        srcs = [_parse_operand(a, dtype, line_no) for a in args[1:]]
        for s in srcs:
            if isinstance(s, Reg):
                _check_bank(s, dtype, line_no)
        return GuestInstruction(opcode, dtype, dst=dst, srcs=srcs, line_no=line_no)

    raise KernelError(f"cannot parse {line!r}", line_no)


def _check_bank(reg: Reg, dtype: DType, line_no: int) -> None:
    want = "r" if dtype is DType.i32 else "f"
    if reg.bank != want:
        raise KernelError(f"register {reg} has wrong bank for {dtype.value}", line_no)


def _validate(program: GuestProgram) -> None:
    for pc, gi in enumerate(program.instructions):
        if gi.br_target is not None:
            if gi.br_target not in program.labels:
                raise KernelError(f"undefined label {gi.br_target!r}", gi.line_no)
            gi.br_target_pc = program.labels[gi.br_target]
    for addr, dt, _ in program.mem_init:
        if addr < 0 or addr + dt.width_bytes > program.arena_size:
            raise KernelError(f"init at {addr} outside arena of {program.arena_size}")

    # Exactly one HALT must be reachable from the entry point.
    reachable_halts = set()
    seen = set()
    work = [program.entry]
    while work:
        pc = work.pop()
        if pc in seen or pc >= len(program.instructions):
            continue
        seen.add(pc)
        gi = program.instructions[pc]
        if gi.opcode is Opcode.HALT:
            reachable_halts.add(pc)
        elif gi.opcode is Opcode.JMP:
            work.append(gi.br_target_pc)
        elif gi.opcode is Opcode.BR:
            work.append(gi.br_target_pc)
            work.append(pc + 1)
        else:
            work.append(pc + 1)
    if len(reachable_halts) != 1:
        raise KernelError(f"program must reach exactly one HALT, found {len(reachable_halts)}")


# --------------------------------------------------------------------------
# Architectural state and profiling
# --------------------------------------------------------------------------


@dataclass
class ArchState:
    int_regs: list[int]
    fp_regs: list[float]
    memory: bytearray
    pc: int = 0
    flags: int = 0
    halted: bool = False

    def copy(self) -> "ArchState":
        return ArchState(
            int_regs=list(self.int_regs),
            fp_regs=list(self.fp_regs),
            memory=bytearray(self.memory),
            pc=self.pc,
            flags=self.flags,
            halted=self.halted,
        )

    def signature(self) -> tuple:
        """Bit-exact fingerprint used for oracle comparisons."""
        return (
            tuple(self.int_regs),
            tuple(fpmath.float_bits(v) for v in self.fp_regs),
            bytes(self.memory),
            self.pc,
            self.flags,
            self.halted,
        )


def initial_state(program: GuestProgram) -> ArchState:
    state = ArchState(
        int_regs=[0] * NUM_INT_REGS,
        fp_regs=[0.0] * NUM_FP_REGS,
        memory=bytearray(program.arena_size),
        pc=program.entry,
    )
    for addr, dt, val in program.mem_init:
        fpmath.store_value(state.memory, addr, dt.kind, dt.width_bits, val)
    for reg, val in program.reg_init:
        if reg.bank == "r":
            state.int_regs[reg.idx] = fpmath.wrap_i32(int(val))
        else:
            state.fp_regs[reg.idx] = float(val)
    return state


@dataclass
class ProfileData:
    exec_count: Counter = field(default_factory=Counter)  # block leader pc -> executions
    edge_count: Counter = field(default_factory=Counter)  # (branch pc, taken) -> count
    loop_trip: dict[int, list[int]] = field(default_factory=dict)  # header pc -> trip counts
    _open_trip: dict[int, int] = field(default_factory=dict)

    def record_branch(self, pc: int, taken: bool, back_target: Optional[int]) -> None:
        self.edge_count[(pc, taken)] += 1
        if back_target is None:
            return
        if taken:
            self._open_trip[back_target] = self._open_trip.get(back_target, 0) + 1
        else:
            trips = self._open_trip.pop(back_target, 0) + 1
            self.loop_trip.setdefault(back_target, []).append(trips)

    def flush_open_trips(self) -> None:
        for header, count in self._open_trip.items():
            self.loop_trip.setdefault(header, []).append(count + 1)
        self._open_trip.clear()

    def modal_trip(self, header: int) -> int:
        trips = self.loop_trip.get(header)
        if not trips:
            return 1
        counts = Counter(trips)
        best = max(counts.items(), key=lambda kv: (kv[1], kv[0]))
        return best[0]


# --------------------------------------------------------------------------
# Interpreter
# --------------------------------------------------------------------------


@dataclass
class InterpretStop:
    reason: str  # 'halt' | 'promote_bbm' | 'promote_sbm'
    block: Optional[int] = None
    steps: int = 0


def block_leaders(program: GuestProgram) -> list[int]:
    leaders = {program.entry}
    for pc, gi in enumerate(program.instructions):
        if gi.opcode in (Opcode.BR, Opcode.JMP):
            leaders.add(gi.br_target_pc)
            if pc + 1 < len(program.instructions):
                leaders.add(pc + 1)
    return sorted(leaders)


class Interpreter:
    """Sequential decode-and-execute engine; doubles as the profiling stage."""

    def __init__(self, program: GuestProgram):
        self.program = program
        self.leaders = set(block_leaders(program))
        self.back_targets = {
            pc: gi.br_target_pc
            for pc, gi in enumerate(program.instructions)
            if gi.opcode is Opcode.BR and gi.br_target_pc is not None and gi.br_target_pc <= pc
        }
        leaders_sorted = sorted(self.leaders)
        self._leader_of: dict[int, int] = {}
        for i, leader in enumerate(leaders_sorted):
            end = leaders_sorted[i + 1] if i + 1 < len(leaders_sorted) else len(program.instructions)
            for pc in range(leader, end):
                self._leader_of[pc] = leader

    def leader_of(self, pc: int) -> int:
        return self._leader_of[pc]

    def step(self, state: ArchState, profile: Optional[ProfileData] = None) -> None:
        """Execute a single instruction, updating profile counters."""
        gi = self.program.instructions[state.pc]
        if profile is not None and state.pc in self.leaders:
            profile.exec_count[state.pc] += 1
        self._execute(gi, state, profile)

    def _read(self, state: ArchState, src: Operand):
        if isinstance(src, Imm):
            return src.value
        if src.bank == "r":
            return state.int_regs[src.idx]
        return state.fp_regs[src.idx]

    def _write(self, state: ArchState, dst: Reg, value) -> None:
        if dst.bank == "r":
            state.int_regs[dst.idx] = value
        else:
            state.fp_regs[dst.idx] = value

    def _addr(self, state: ArchState, gi: GuestInstruction) -> int:
        base, off = gi.mem
        return state.int_regs[base.idx] + off

    def _execute(self, gi: GuestInstruction, state: ArchState, profile: Optional[ProfileData]) -> None:
        op = gi.opcode
        if op is Opcode.HALT:
            state.halted = True
            if profile is not None:
                profile.flush_open_trips()
            return
        if op is Opcode.JMP:
            state.pc = gi.br_target_pc
            return
        if op is Opcode.BR:
            taken = fpmath.cond_holds(gi.br_cond, state.flags)
            if profile is not None:
                back = gi.br_target_pc if gi.br_target_pc <= state.pc else None
                profile.record_branch(state.pc, taken, back)
            state.pc = gi.br_target_pc if taken else state.pc + 1
            return

        dt = gi.dtype
        if op is Opcode.LD:
            value = fpmath.load_value(state.memory, self._addr(state, gi), dt.kind, dt.width_bits)
            self._write(state, gi.dst, value)
        elif op is Opcode.ST:
            fpmath.store_value(state.memory, self._addr(state, gi), dt.kind, dt.width_bits, self._read(state, gi.srcs[0]))
        elif op is Opcode.MOV:
            self._write(state, gi.dst, self._read(state, gi.srcs[0]))
        elif op is Opcode.CVT:
            self._write(state, gi.dst, convert(dt, self._read(state, gi.srcs[0])))
        elif op is Opcode.CMP:
            a, b = (self._read(state, s) for s in gi.srcs)
            state.flags = fpmath.compare(a, b)
        elif op in ARITH_OPS:
            a, b = (self._read(state, s) for s in gi.srcs)
            if dt is DType.i32:
                self._write(state, gi.dst, fpmath.int_binop(op.value, a, b))
            else:
                self._write(state, gi.dst, fpmath.fp_binop(op.value, dt.width_bits, a, b))
        else:
            raise SimFault(f"cannot interpret {gi.render()}")
        state.pc += 1

    def run(
        self,
        state: ArchState,
        profile: Optional[ProfileData] = None,
        thresholds: Optional[tuple[int, int]] = None,
        bbm_blocks: Optional[set[int]] = None,
        sbm_blocks: Optional[set[int]] = None,
        max_steps: int = 10_000_000,
    ) -> InterpretStop:
        """Run until HALT, or until a block crosses a promotion threshold.

        With `thresholds=(bbm, sbm)` set, control returns as soon as a block's
        execution count exceeds `bbm` (promote to block translation) or, for
        blocks already in `bbm_blocks`, exceeds `sbm` (promote to superblock
        translation). The caller promotes the block and resumes.
        """
        steps = 0
        while not state.halted:
            block = self._leader_of.get(state.pc)
            at_leader = state.pc in self.leaders
            # Execute through the end of the current block.
            while True:
                if steps >= max_steps:
                    raise SimFault("interpreter step budget exceeded (runaway kernel?)")
                before = state.pc
                self.step(state, profile)
                steps += 1
                if state.halted:
                    return InterpretStop("halt", steps=steps)
                if state.pc != before + 1 or state.pc in self.leaders:
                    break
            if thresholds is not None and profile is not None and at_leader:
                bbm_thr, sbm_thr = thresholds
                count = profile.exec_count[block]
                in_bbm = bbm_blocks is not None and block in bbm_blocks
                in_sbm = sbm_blocks is not None and block in sbm_blocks
                if in_bbm and not in_sbm and count > sbm_thr:
                    return InterpretStop("promote_sbm", block=block, steps=steps)
                if not in_bbm and count > bbm_thr:
                    return InterpretStop("promote_bbm", block=block, steps=steps)
        return InterpretStop("halt", steps=steps)


def convert(to_dtype: DType, value):
    """CVT semantics: convert the source value to the destination type."""
    if to_dtype is DType.f32:
        return fpmath.round_f32(float(value))
    if to_dtype is DType.f64:
        return float(value)
    return fpmath.wrap_i32(int(value))


def interpret(
    program: GuestProgram,
    state: ArchState,
    profile: Optional[ProfileData] = None,
    thresholds: Optional[tuple[int, int]] = None,
    bbm_blocks: Optional[set[int]] = None,
    sbm_blocks: Optional[set[int]] = None,
) -> InterpretStop:
    return Interpreter(program).run(state, profile, thresholds, bbm_blocks, sbm_blocks)


def run_oracle(program: GuestProgram) -> tuple[ArchState, ProfileData]:
    """Full interpretation from a fresh state: reference result plus profile."""
    state = initial_state(program)
    profile = ProfileData()
    interpret(program, state, profile)
    return state, profile
