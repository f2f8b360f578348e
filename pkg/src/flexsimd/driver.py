"""Execution driver: translate hot guest code, dispatch superblocks with
rollback recovery, verify against the interpreter oracle, and build metric
records for each kernel x vector-length x mode combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import pipeline, vectorize
from .fpmath import SimFault
from .guest import (
    ArchState,
    GuestProgram,
    Interpreter,
    ProfileData,
    initial_state,
    run_oracle,
)
from .hostvm import HostProgram, HostVM, TraceEvent
from .ir import Superblock
from .lower import lower_to_host
from .metrics import MetricsRecord, Trace, compute_metrics
from .pipeline import Thresholds, TranslationError
from .timing import TimingConfig, simulate
from .vectorize import (
    Pack,
    VectorizationConfig,
    emit_pack_unpack,
    apply_swr,
    vectorize_baseline,
    vectorize_vlv,
    verify_pack_legality,
)

# mode -> (vectorize at all, variable-length packing, selective writing)
MODES: dict[str, tuple[bool, bool, bool]] = {
    "scalar": (False, False, False),
    "baseline": (True, False, False),
    "vlv": (True, True, False),
    "swr": (True, False, True),
    "vlv+swr": (True, True, True),
}
MODE_ORDER = list(MODES)
VECTOR_LENGTHS = (128, 256, 512)


@dataclass
class TranslationUnit:
    hp: HostProgram
    sb: Superblock
    packs: list[Pack]


@dataclass
class SessionResult:
    state: ArchState
    events: list[TraceEvent]
    translations: dict[int, TranslationUnit] = field(default_factory=dict)
    assert_failures: int = 0
    spec_failures: int = 0
    fault_failures: int = 0
    recreations: int = 0
    interp_steps: int = 0


def translate(
    program: GuestProgram,
    profile: ProfileData,
    seed_pc: int,
    vlen: int,
    mode: str,
    thresholds: Thresholds,
    sb_id: int = 0,
    allow_speculation: bool = True,
    multi_exit: bool = False,
) -> TranslationUnit:
    """Run the full translation pipeline for one superblock."""
    do_vec, vlv, swr = MODES[mode]
    cfg = VectorizationConfig(physical_bits=vlen, vlv_enabled=vlv, swr_enabled=swr)

    sb = pipeline.build_superblock(profile, program, seed_pc, thresholds,
                                   sb_id=sb_id, multi_exit=multi_exit)
    sb = pipeline.unroll_loop(sb, profile, cfg.physical_lanes)
    sb = pipeline.to_ssa(sb)
    sb = pipeline.classic_optimize(sb)
    ddg = pipeline.build_ddg(sb)
    sb = pipeline.eliminate_redundant_mem(sb, ddg)
    ddg = pipeline.build_ddg(sb)

    packs: list[Pack] = []
    if do_vec and not multi_exit:
        if vlv:
            packs = vectorize_vlv(sb, ddg, cfg, allow_speculation)
        else:
            packs = vectorize_baseline(sb, ddg, cfg, allow_speculation)
        verify_pack_legality(sb, ddg, packs)
        emit_pack_unpack(sb, packs, ddg)
        apply_swr(sb, packs, ddg, cfg)

    hp = lower_to_host(sb, ddg, packs, cfg, mode=mode,
                       allow_speculation=allow_speculation and not multi_exit,
                       keep_order=multi_exit)
    hp.code_base = sb_id * 4096
    return TranslationUnit(hp=hp, sb=sb, packs=packs)


_INTERP_COST_NAME = "interp"


def _interp_event(program: GuestProgram, pc: int) -> TraceEvent:
    gi = program.instructions[pc]
    if gi.fp:
        from .guest import ARITH_OPS, Opcode

        if gi.opcode in ARITH_OPS or gi.opcode in (Opcode.LD, Opcode.ST):
            acct = "scalar_fp"
        else:
            acct = "unvec_fp"
        covers = 1
    else:
        acct, covers = "other", 0
    return TraceEvent(name=f"{_INTERP_COST_NAME}:{gi.opcode.value}", acct=acct,
                      covers=covers, interp=True)


class Session:
    """Dispatch loop mixing translated superblock execution and interpretation."""

    def __init__(self, program: GuestProgram, profile: ProfileData, vlen: int,
                 mode: str, thresholds: Optional[Thresholds] = None):
        self.program = program
        self.profile = profile
        self.vlen = vlen
        self.mode = mode
        self.thr = thresholds or Thresholds()
        self.interp = Interpreter(program)
        self.vm = HostVM(vlen)
        self._sb_counter = 0

    def _maybe_translate(self, pc: int, cache: dict, result: SessionResult) -> Optional[TranslationUnit]:
        if pc not in self.interp.leaders:
            return None
        if self.profile.exec_count[pc] < self.thr.translate:
            return None
        self._sb_counter += 1
        unit = translate(self.program, self.profile, pc, self.vlen, self.mode,
                         self.thr, sb_id=self._sb_counter)
        result.translations[pc] = unit
        return unit

    def execute(self, max_steps: int = 5_000_000) -> SessionResult:
        state = initial_state(self.program)
        result = SessionResult(state=state, events=[])
        cache: dict[int, Optional[TranslationUnit]] = {}
        failures: dict[int, int] = {}
        recreated: set[int] = set()
        budget = max_steps

        while not state.halted:
            budget -= 1
            if budget <= 0:
                raise SimFault("execution budget exceeded")
            pc = state.pc
            if pc not in cache:
                cache[pc] = self._maybe_translate(pc, cache, result)
            unit = cache[pc]
            if unit is None:
                result.events.append(_interp_event(self.program, pc))
                self.interp.step(state)
                result.interp_steps += 1
                continue

            outcome = self.vm.run_superblock(unit.hp, state, result.events,
                                             code_base=unit.hp.code_base)
            if outcome.kind == "completed":
                continue

            if outcome.kind == "assert_failed":
                result.assert_failures += 1
            elif outcome.kind == "spec_failed":
                result.spec_failures += 1
            else:
                result.fault_failures += 1
            failed_region = unit.hp.guest_region
            failures[pc] = failures.get(pc, 0) + 1
            if failures[pc] >= self.thr.recreate and pc not in recreated:
                # Rebuild once without asserts (side exits stay live) and
                # without speculative reordering.
                recreated.add(pc)
                result.recreations += 1
                self._sb_counter += 1
                unit = translate(self.program, self.profile, pc, self.vlen, self.mode,
                                 self.thr, sb_id=self._sb_counter,
                                 allow_speculation=False, multi_exit=True)
                cache[pc] = unit
                result.translations[pc] = unit

            # Recover: reinterpret the original guest path from the restored
            # checkpoint until it leaves this superblock's region.
            first = True
            while not state.halted and (first or state.pc in failed_region):
                first = False
                result.events.append(_interp_event(self.program, state.pc))
                self.interp.step(state)
                result.interp_steps += 1
                budget -= 1
                if budget <= 0:
                    raise SimFault("execution budget exceeded during recovery")
        return result


@dataclass
class RunRecord:
    record: MetricsRecord
    ok: bool
    mismatch: str = ""
    result: Optional[SessionResult] = None


def compare_states(a: ArchState, b: ArchState) -> str:
    """Empty string when bit-identical; otherwise the first divergence."""
    sig_a, sig_b = a.signature(), b.signature()
    names = ("int_regs", "fp_regs", "memory", "pc", "flags", "halted")
    for name, xa, xb in zip(names, sig_a, sig_b):
        if xa != xb:
            if isinstance(xa, tuple):
                for i, (va, vb) in enumerate(zip(xa, xb)):
                    if va != vb:
                        return f"{name}[{i}]: {va!r} != {vb!r}"
            if isinstance(xa, bytes):
                for i, (va, vb) in enumerate(zip(xa, xb)):
                    if va != vb:
                        return f"memory[{i}]: {va} != {vb}"
            return f"{name}: {xa!r} != {xb!r}"
    return ""


def run_one(
    program: GuestProgram,
    vlen: int,
    mode: str,
    thresholds: Optional[Thresholds] = None,
    timing: Optional[TimingConfig] = None,
    scalar_cycles: Optional[int] = None,
    oracle: Optional[tuple[ArchState, ProfileData]] = None,
) -> RunRecord:
    """Interpret (oracle + profile), translate, execute, time, verify."""
    thresholds = thresholds or Thresholds()
    timing = timing or TimingConfig()
    oracle_state, profile = oracle if oracle is not None else run_oracle(program)

    session = Session(program, profile, vlen, mode, thresholds)
    result = session.execute()
    mismatch = compare_states(result.state, oracle_state)

    trace = Trace(kernel=program.name, vlen=vlen, mode=mode, events=result.events)
    cycles = simulate(trace.events, timing).total_cycles
    if mode == "scalar":
        scalar_cycles = cycles
    record = compute_metrics(trace, cycles_scalar=scalar_cycles, cycles_vectorized=cycles)
    return RunRecord(record=record, ok=not mismatch, mismatch=mismatch, result=result)


def run_matrix(
    programs: list[GuestProgram],
    vlens: list[int],
    modes: list[str],
    thresholds: Optional[Thresholds] = None,
    timing: Optional[TimingConfig] = None,
) -> tuple[list[RunRecord], bool]:
    """Every kernel x vector length x mode; scalar cycles computed per pair."""
    records: list[RunRecord] = []
    all_ok = True
    for program in programs:
        oracle = run_oracle(program)
        for vlen in vlens:
            scalar_rr = run_one(program, vlen, "scalar", thresholds, timing, oracle=oracle)
            scalar_cycles = scalar_rr.record.cycles_vectorized
            for mode in modes:
                if mode == "scalar":
                    rr = scalar_rr
                else:
                    rr = run_one(program, vlen, mode, thresholds, timing,
                                 scalar_cycles=scalar_cycles, oracle=oracle)
                records.append(rr)
                all_ok = all_ok and rr.ok
    return records, all_ok
