"""Guest ISA: parsing, interpretation, profiling, staged promotion."""

import pytest

from flexsimd import corpus, initial_state, interpret, parse_program, run_oracle
from flexsimd.fpmath import DivideByZeroFault, MemoryFault
from flexsimd.guest import (
    DType,
    Imm,
    Interpreter,
    KernelError,
    Opcode,
    ProfileData,
    Reg,
)


def test_parse_simple_add():
    p = parse_program("arena 0\nADD.f32 f1, f2, f3\nHALT\n")
    gi = p.instructions[0]
    assert gi.opcode is Opcode.ADD
    assert gi.dtype is DType.f32
    assert gi.dst == Reg("f", 1)
    assert gi.srcs == [Reg("f", 2), Reg("f", 3)]
    assert gi.fp


def test_parse_memory_and_branch_forms():
    src = """
arena 64
loop:
  LD.f64 f1, [r2+8]
  ST.f64 [r2-8], f1
  CMP.i32 r1, r2
  BR lt, loop
  HALT
"""
    p = parse_program(src)
    ld, st, cmp_, br, halt = p.instructions
    assert ld.mem == (Reg("r", 2), 8)
    assert st.mem == (Reg("r", 2), -8)
    assert br.br_cond == "lt" and br.br_target_pc == 0
    assert halt.opcode is Opcode.HALT


def test_undefined_label_rejected():
    with pytest.raises(KernelError, match="undefined label"):
        parse_program("arena 0\nJMP nowhere\nHALT\n")


def test_register_out_of_range_rejected():
    with pytest.raises(KernelError, match="out of range"):
        parse_program("arena 0\nADD.f32 f40, f1, f2\nHALT\n")


def test_nan_rejected_at_load():
    with pytest.raises(KernelError, match="NaN"):
        parse_program("arena 8\nreg f1 nan\nHALT\n")
    with pytest.raises(KernelError, match="NaN"):
        parse_program("arena 8\ninit 0 f64 nan\nHALT\n")


def test_exactly_one_reachable_halt_required():
    with pytest.raises(KernelError, match="exactly one HALT"):
        parse_program("arena 0\nADD.f32 f1, f2, f3\n")


def test_fig7_kernel_shape():
    p = corpus()["fig7"]
    adds = [gi for gi in p.instructions if gi.opcode is Opcode.ADD]
    assert len(adds) == 6
    assert all(gi.dtype is DType.f32 for gi in adds)
    assert p.instructions[-1].opcode is Opcode.HALT


def test_interpret_arithmetic_identity():
    p = parse_program("arena 0\nreg f2 1.0\nreg f3 2.0\nADD.f32 f1, f2, f3\nHALT\n")
    state, _ = run_oracle(p)
    assert state.fp_regs[1] == 3.0


def test_interpret_loop_trip_count_profiling():
    src = """
arena 0
  MOV.i32 r1, 0
  MOV.i32 r2, 4
loop:
  ADD.i32 r1, r1, 1
  CMP.i32 r1, r2
  BR lt, loop
  HALT
"""
    p = parse_program(src)
    _, profile = run_oracle(p)
    header = p.labels["loop"]
    assert profile.loop_trip[header] == [4]
    assert profile.modal_trip(header) == 4


def test_profile_edge_counts_sum_to_block_executions():
    p = corpus()["biased-branch"]
    _, profile = run_oracle(p)
    interp = Interpreter(p)
    for pc, gi in enumerate(p.instructions):
        if gi.opcode is Opcode.BR:
            taken = profile.edge_count[(pc, True)]
            fall = profile.edge_count[(pc, False)]
            assert taken + fall == profile.exec_count[interp.leader_of(pc)]


def test_promotion_threshold_returns_control():
    src = """
arena 0
  MOV.i32 r1, 0
  MOV.i32 r2, 60
loop:
  ADD.i32 r1, r1, 1
  CMP.i32 r1, r2
  BR lt, loop
  HALT
"""
    p = parse_program(src)
    state = initial_state(p)
    profile = ProfileData()
    stop = interpret(p, state, profile, thresholds=(50, 500), bbm_blocks=set())
    header = p.labels["loop"]
    assert stop.reason == "promote_bbm"
    assert stop.block == header
    assert profile.exec_count[header] == 51
    # Promote and resume: the run must finish from where it stopped.
    stop = interpret(p, state, profile, thresholds=(50, 500), bbm_blocks={header},
                     sbm_blocks=set())
    assert stop.reason == "halt"
    assert state.int_regs[1] == 60


def test_promotion_to_superblock_stage():
    src = """
arena 0
  MOV.i32 r1, 0
  MOV.i32 r2, 600
loop:
  ADD.i32 r1, r1, 1
  CMP.i32 r1, r2
  BR lt, loop
  HALT
"""
    p = parse_program(src)
    state = initial_state(p)
    profile = ProfileData()
    header = p.labels["loop"]
    stop = interpret(p, state, profile, thresholds=(50, 500), bbm_blocks=set())
    assert stop.reason == "promote_bbm"
    stop = interpret(p, state, profile, thresholds=(50, 500), bbm_blocks={header},
                     sbm_blocks=set())
    assert stop.reason == "promote_sbm"
    assert stop.block == header
    assert profile.exec_count[header] == 501


def test_interpret_determinism():
    from flexsimd import random_straightline

    for seed in range(8):
        p = parse_program(random_straightline(seed))
        a, prof_a = run_oracle(p)
        b, prof_b = run_oracle(p)
        assert a.signature() == b.signature()
        assert prof_a.exec_count == prof_b.exec_count
        assert prof_a.edge_count == prof_b.edge_count


def test_out_of_arena_access_is_hard_error():
    p = parse_program("arena 8\nreg r1 4\nLD.f64 f1, [r1+8]\nHALT\n")
    with pytest.raises(MemoryFault):
        run_oracle(p)


def test_divide_by_zero_reported():
    p = parse_program("arena 0\nreg f1 1.0\nDIV.f32 f2, f1, f3\nHALT\n")
    with pytest.raises(DivideByZeroFault):
        run_oracle(p)


def test_halt_state_is_copyable_checkpoint():
    p = corpus()["fig7"]
    state, _ = run_oracle(p)
    dup = state.copy()
    assert dup.signature() == state.signature()
    dup.fp_regs[13] += 1.0
    assert dup.signature() != state.signature()
