"""Translation pipeline: superblocks, unrolling, SSA, optimizations, DDG, RLE,
list scheduling."""

import random

import pytest

from flexsimd import (
    Thresholds,
    VectorizationConfig,
    build_ddg,
    build_superblock,
    classic_optimize,
    corpus,
    eliminate_redundant_mem,
    parse_program,
    run_oracle,
    schedule_list,
    to_ssa,
    unroll_loop,
)
from flexsimd.ir import Const, IROp
from flexsimd.pipeline import TranslationError, build_cfg
from conftest import find_loop_header, prepare_superblock


def _pipeline_upto_ssa(src, seed_pc=None, vlen=128):
    program = parse_program(src)
    _, profile = run_oracle(program)
    cfg = VectorizationConfig(physical_bits=vlen)
    sb = build_superblock(profile, program, seed_pc if seed_pc is not None else 0, Thresholds())
    sb = unroll_loop(sb, profile, cfg.physical_lanes)
    return to_ssa(sb)


# -- superblock formation ---------------------------------------------------


def test_biased_diamond_becomes_single_exit_superblock():
    p = corpus()["biased-branch"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    sb = build_superblock(profile, p, header, Thresholds())
    # Condition block, biased side, join block; the rare side is off-trace.
    assert len(sb.guest_blocks) == 3
    sb = to_ssa(sb)
    assert len(sb.asserts) == 1
    assert not sb.multi_exit


def test_unbiased_branch_stops_growth():
    src = """
arena 0
  MOV.i32 r1, 0
  MOV.i32 r2, 8
  MOV.i32 r5, 2
loop:
  ADD.i32 r1, r1, 1
  ADD.i32 r3, r3, 1
  CMP.i32 r3, r5
  BR lt, even
  MOV.i32 r3, 0
even:
  CMP.i32 r1, r2
  BR lt, loop
  HALT
"""
    p = parse_program(src)
    _, profile = run_oracle(p)
    header = p.labels["loop"]
    # The inner branch alternates 50/50: growth must stop at it.
    sb = build_superblock(profile, p, header, Thresholds())
    assert sb.guest_blocks == [header]
    assert sb.trace[-1].exit_kind == "br"


def test_recreated_superblock_keeps_branches_as_side_exits():
    p = corpus()["biased-branch"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    sb = build_superblock(profile, p, header, Thresholds(), multi_exit=True)
    assert sb.multi_exit
    sb = to_ssa(sb)
    assert len(sb.asserts) == 0
    side_exits = [i for i in sb.ir if i.op is IROp.EXIT and i.exit_kind == "side"]
    assert len(side_exits) == 1


def test_superblock_growth_stops_at_loop_header():
    p = corpus()["saxpy-f32-t4"]
    _, profile = run_oracle(p)
    sb = build_superblock(profile, p, p.entry, Thresholds())
    header = find_loop_header(p)
    assert header not in sb.guest_blocks


# -- unrolling ----------------------------------------------------------------


def test_unroll_factor_lane_limited():
    p = corpus()["saxpy-f32-t64"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    cfg = VectorizationConfig(physical_bits=512)
    sb = build_superblock(profile, p, header, Thresholds())
    sb = unroll_loop(sb, profile, cfg.physical_lanes)
    assert sb.unroll_factor == 16  # 512 bits / 32-bit lanes


def test_unroll_factor_trip_count_limited():
    p = corpus()["saxpy-f64-t4"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    cfg = VectorizationConfig(physical_bits=512)
    sb = build_superblock(profile, p, header, Thresholds())
    sb = unroll_loop(sb, profile, cfg.physical_lanes)
    assert sb.unroll_factor == 4  # 8 lanes available, but the loop runs 4 times


def test_unroll_leaves_non_loop_superblock_alone():
    p = corpus()["fig7"]
    _, profile = run_oracle(p)
    sb = build_superblock(profile, p, p.entry, Thresholds())
    before = list(sb.trace)
    sb = unroll_loop(sb, profile, VectorizationConfig(512).physical_lanes)
    assert sb.unroll_factor == 1
    assert sb.trace == before


def test_unroll_replicates_asserts_per_copy():
    p = corpus()["saxpy-f32-t4"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    sb = build_superblock(profile, p, header, Thresholds())
    sb = unroll_loop(sb, profile, VectorizationConfig(128).physical_lanes)
    sb = to_ssa(sb)
    assert sb.unroll_factor == 4
    assert len(sb.asserts) == 3  # one per copy except the live final branch
    assert sb.ir[-1].op is IROp.EXIT and sb.ir[-1].exit_kind == "br"


# -- SSA ----------------------------------------------------------------------


def test_ssa_renames_second_write():
    sb = _pipeline_upto_ssa("""
arena 0
reg f2 1.0
reg f3 2.0
  ADD.f32 f1, f2, f3
  ADD.f32 f1, f1, f3
  HALT
""")
    defs = [i.dst for i in sb.ir if i.dst is not None]
    assert len(defs) == len(set(defs)) == 2


def test_ssa_straightline_unchanged_modulo_ids():
    sb = _pipeline_upto_ssa("""
arena 0
reg f2 1.0
reg f4 2.0
  ADD.f32 f1, f2, f4
  MUL.f32 f3, f2, f4
  HALT
""")
    ops = [i.op for i in sb.ir if i.op not in (IROp.EXIT,)]
    assert ops == [IROp.ADD, IROp.MUL]


def test_ssa_unrolled_copies_have_distinct_values():
    p = corpus()["saxpy-f32-t4"]
    _, profile = run_oracle(p)
    header = find_loop_header(p)
    sb = build_superblock(profile, p, header, Thresholds())
    sb = unroll_loop(sb, profile, VectorizationConfig(128).physical_lanes)
    sb = to_ssa(sb)
    defs = [i.dst for i in sb.ir if i.dst is not None]
    assert len(defs) == len(set(defs))


# -- classic optimizations ------------------------------------------------------


def test_constant_folding_removes_arithmetic():
    sb = _pipeline_upto_ssa("arena 0\n  ADD.f32 f1, 2.0, 3.0\n  HALT\n")
    sb = classic_optimize(sb)
    assert all(i.op is IROp.EXIT for i in sb.ir)
    from flexsimd.guest import Reg

    assert sb.reg_out[Reg("f", 1)] == Const(5.0)


def test_copy_propagation_and_cse():
    sb = _pipeline_upto_ssa("""
arena 0
reg f2 1.5
reg f3 2.5
  MOV.f32 f4, f2
  ADD.f32 f1, f4, f3
  ADD.f32 f5, f2, f3
  HALT
""")
    sb = classic_optimize(sb)
    adds = [i for i in sb.ir if i.op is IROp.ADD]
    assert len(adds) == 1  # the copy is propagated, then CSE merges the adds


def test_load_cse_without_intervening_store():
    sb = _pipeline_upto_ssa("""
arena 16
reg r1 0
init 0 f32 7.5
  LD.f32 f1, [r1+0]
  LD.f32 f2, [r1+0]
  ADD.f32 f3, f1, f2
  HALT
""")
    sb = classic_optimize(sb)
    loads = [i for i in sb.ir if i.op is IROp.LD]
    assert len(loads) == 1


def test_dead_code_eliminated():
    sb = _pipeline_upto_ssa("""
arena 0
reg f2 1.0
reg f3 2.0
  ADD.f32 f1, f2, f3
  ADD.f32 f1, f2, f2
  HALT
""")
    sb = classic_optimize(sb)
    adds = [i for i in sb.ir if i.op is IROp.ADD]
    assert len(adds) == 1  # the overwritten result is dead


# -- dependence graph -----------------------------------------------------------


def test_ddg_alias_classification_triples():
    src = """
arena 64
reg r1 0
reg r2 32
reg f1 1.0
  ST.f64 [r1+0], f1
  LD.f64 f2, [r1+0]
  LD.f64 f3, [r1+8]
  LD.f64 f4, [r2+0]
  ADD.f64 f5, f2, f3
  ADD.f64 f6, f5, f4
  ST.f64 [r1+16], f6
  HALT
"""
    sb = _pipeline_upto_ssa(src)
    sb = classic_optimize(sb)
    ddg = build_ddg(sb)
    by_pc = {i.guest_pc: i.iid for i in sb.ir if i.is_mem}
    st0, ld0, ld8, ldr2 = by_pc[0], by_pc[1], by_pc[2], by_pc[3]
    assert ddg.alias[(st0, ld0)] == "must"
    assert ddg.alias[(st0, ld8)] == "no"
    assert ddg.alias[(st0, ldr2)] == "may"


def test_ddg_true_edges_follow_ssa_defs():
    src = """
arena 0
reg f1 1.0
reg f2 2.0
  ADD.f32 f3, f1, f2
  MUL.f32 f4, f3, f1
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src)
    add = next(i for i in sb.ir if i.op is IROp.ADD)
    mul = next(i for i in sb.ir if i.op is IROp.MUL)
    assert (add.iid, mul.iid) in ddg.true_edges


def test_ddg_completeness_brute_force():
    """Every memory pair classified; every def-use edge present."""
    from flexsimd import random_straightline

    for seed in range(12):
        src = random_straightline(seed)
        _, _, sb, ddg = prepare_superblock(src)
        if len(sb.ir) > 64:
            continue
        mem = [i for i in sb.ir if i.is_mem]
        for a in mem:
            for b in mem:
                if a.iid < b.iid:
                    assert (a.iid, b.iid) in ddg.alias
        defs = {i.dst: i.iid for i in sb.ir if i.dst is not None}
        for inst in sb.ir:
            for s in inst.srcs:
                if isinstance(s, int) and s in defs:
                    assert (defs[s], inst.iid) in ddg.true_edges


# -- redundant memory elimination -------------------------------------------------


def test_store_forwarding_f64_is_exact_copy():
    src = """
arena 16
reg r1 0
reg f2 3.25
  ST.f64 [r1+0], f2
  LD.f64 f3, [r1+0]
  ADD.f64 f4, f3, f2
  HALT
"""
    _, _, sb, _ = prepare_superblock(src)
    assert not any(i.op is IROp.LD for i in sb.ir)


def test_store_forwarding_f32_narrows_like_memory():
    src = """
arena 16
reg r1 0
reg f2 3.1
  ST.f32 [r1+0], f2
  LD.f32 f3, [r1+0]
  ADD.f32 f4, f3, f3
  HALT
"""
    program, _, sb, _ = prepare_superblock(src)
    assert not any(i.op is IROp.LD for i in sb.ir)
    assert any(i.op is IROp.CVT for i in sb.ir)  # the round trip rounds


def test_redundant_load_collapses():
    src = """
arena 16
reg r1 0
init 0 f64 5.0
  LD.f64 f1, [r1+0]
  LD.f64 f2, [r1+0]
  ADD.f64 f3, f1, f2
  HALT
"""
    _, _, sb, _ = prepare_superblock(src)
    assert sum(1 for i in sb.ir if i.op is IROp.LD) == 1


def test_may_alias_store_blocks_elimination():
    src = """
arena 64
reg r1 0
reg r2 32
reg f9 1.0
init 0 f64 5.0
  LD.f64 f1, [r1+0]
  ST.f64 [r2+0], f9
  LD.f64 f2, [r1+0]
  ADD.f64 f3, f1, f2
  HALT
"""
    _, _, sb, _ = prepare_superblock(src)
    assert sum(1 for i in sb.ir if i.op is IROp.LD) == 2


# -- list scheduling ---------------------------------------------------------------


def test_schedule_prioritizes_critical_path():
    # B heads a long chain; A is independent. B must be picked first.
    nodes = [0, 1, 2, 3]
    edges = [(1, 2), (2, 3)]
    lat = {0: 1, 1: 1, 2: 1, 3: 1}
    order = schedule_list(nodes, edges, lambda n: lat[n], lambda n: n)
    assert order.index(1) < order.index(0)


def test_schedule_respects_chains():
    order = schedule_list([0, 1, 2], [(0, 1), (1, 2)], lambda n: 1, lambda n: n)
    assert order == [0, 1, 2]


def test_schedule_ties_break_by_original_order():
    order = schedule_list([2, 0, 1], [], lambda n: 1, lambda n: n)
    assert order == [0, 1, 2]


def test_schedule_detects_cycles():
    with pytest.raises(TranslationError):
        schedule_list([0, 1], [(0, 1), (1, 0)], lambda n: 1, lambda n: n)


def test_exit_is_scheduled_last():
    p = corpus()["fig7"]
    from flexsimd import run_one

    rr = run_one(p, 128, "vlv")
    hp = rr.result.translations[0].hp
    from flexsimd.hostvm import HostOp

    assert hp.code[-1].op in (HostOp.EXIT, HostOp.HALT)
