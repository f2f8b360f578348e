"""Pack formation, variable-length rounds, gathers, selective writing."""

import pytest

from flexsimd import (
    VectorizationConfig,
    Vectorizer,
    apply_swr,
    corpus,
    emit_pack_unpack,
    mark_candidates,
    parse_program,
    run_one,
    vectorize_baseline,
    vectorize_vlv,
    verify_pack_legality,
)
from flexsimd.hostvm import HostOp
from flexsimd.ir import IROp
from conftest import find_loop_header, prepare_superblock


def _counts(hp):
    return {
        "vadd": hp.count(HostOp.VADD),
        "vmul": hp.count(HostOp.VMUL),
        "vld": hp.count(HostOp.VLD),
        "vst": hp.count(HostOp.VST),
        "sadd": hp.count(HostOp.SADD),
        "perm": hp.perm_count(),
    }


# -- candidate marking -------------------------------------------------------


def test_first_store_of_adjacent_pair():
    src = """
arena 32
reg r1 0
reg f1 1.0
  ST.f64 [r1+0], f1
  ST.f64 [r1+8], f1
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src)
    marks = mark_candidates(sb, ddg)
    stores = sorted(i.iid for i in sb.ir if i.is_store)
    assert marks.first_store == {stores[0]}


def test_conversion_is_not_a_candidate():
    src = """
arena 0
reg f1 1.5
  CVT.f64 f2, f1
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src)
    marks = mark_candidates(sb, ddg)
    assert marks.candidate == set()


def test_gapped_stores_are_both_first():
    src = """
arena 64
reg r1 0
reg f1 1.0
  ST.f64 [r1+0], f1
  ST.f64 [r1+16], f1
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src)
    marks = mark_candidates(sb, ddg)
    assert len(marks.first_store) == 2


# -- baseline packing ---------------------------------------------------------


def test_saxpy4_member_lists_match_hand_vectorization(saxpy4_src):
    p = parse_program(saxpy4_src)
    header = find_loop_header(p)
    _, _, sb, ddg = prepare_superblock(p, seed_pc=header, vlen=128)
    cfg = VectorizationConfig(128)
    packs = vectorize_baseline(sb, ddg, cfg)
    verify_pack_legality(sb, ddg, packs)
    by_op = {}
    for pack in packs:
        by_op.setdefault(pack.op, []).append(pack)
    assert {op: len(ps) for op, ps in by_op.items()} == {
        IROp.ST: 1, IROp.ADD: 1, IROp.MUL: 1, IROp.LD: 2}
    # Lane order must follow the unrolled copies.
    insts = {i.iid: i for i in sb.ir}
    for pack in packs:
        copies = [insts[m].copy_index for m in pack.members]
        assert copies == [0, 1, 2, 3]


def test_fig7_baseline_leaves_two_scalar_adds():
    p = corpus()["fig7"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    packs = vectorize_baseline(sb, ddg, VectorizationConfig(128))
    assert len(packs) == 1
    assert packs[0].mask == 4
    packed = set(packs[0].members)
    scalar_adds = [i for i in sb.ir if i.op is IROp.ADD and i.iid not in packed]
    assert len(scalar_adds) == 2


def test_interleaved_loads_stay_scalar_and_feed_a_gather():
    p = corpus()["interleave2"]
    header = find_loop_header(p)
    _, _, sb, ddg = prepare_superblock(p, seed_pc=header, vlen=128)
    packs = vectorize_baseline(sb, ddg, VectorizationConfig(128))
    assert not any(pack.op is IROp.LD for pack in packs)
    add_pack = next(pack for pack in packs if pack.op is IROp.ADD)
    emit_pack_unpack(sb, packs, ddg)
    assert [plan[0] for plan in add_pack.operand_plans] == ["gather", "gather"]


# -- chain following -----------------------------------------------------------


def test_store_pack_pulls_in_same_op_producers(saxpy4_src):
    p = parse_program(saxpy4_src)
    header = find_loop_header(p)
    _, _, sb, ddg = prepare_superblock(p, seed_pc=header, vlen=128)
    vec = Vectorizer(sb, ddg, VectorizationConfig(128))
    vec._mem_phase(0, stores=True)
    ops = {pack.op for pack in vec.packs}
    # Seeding from the stores transitively packed the adds, muls, and loads.
    assert {IROp.ST, IROp.ADD, IROp.MUL, IROp.LD} <= ops


def test_mixed_op_producers_are_not_packed():
    p = corpus()["mixed-producers"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    packs = vectorize_baseline(sb, ddg, VectorizationConfig(128))
    mul_pack = next(p_ for p_ in packs if p_.op is IROp.MUL)
    emit_pack_unpack(sb, packs, ddg)
    assert mul_pack.operand_plans[0][0] == "gather"
    assert mul_pack.operand_plans[1][0] == "forward"


def test_member_of_one_pack_is_never_repacked():
    p = corpus()["fig7"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    packs = vectorize_vlv(sb, ddg, VectorizationConfig(128, vlv_enabled=True))
    seen = set()
    for pack in packs:
        for m in pack.members:
            assert m not in seen
            seen.add(m)


# -- variable-length rounds ------------------------------------------------------


def test_vlv_packs_six_adds_as_four_plus_two():
    p = corpus()["fig7"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    packs = vectorize_vlv(sb, ddg, VectorizationConfig(128, vlv_enabled=True))
    assert [pack.mask for pack in packs] == [4, 2]


def test_vlv_two_f64_adds_on_wide_path():
    src = """
arena 0
reg f1 1.0
reg f2 2.0
reg f3 3.0
reg f4 4.0
  ADD.f64 f5, f1, f2
  ADD.f64 f6, f3, f4
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src, vlen=512)
    packs = vectorize_vlv(sb, ddg, VectorizationConfig(512, vlv_enabled=True))
    assert len(packs) == 1 and packs[0].mask == 2


def test_lone_add_stays_scalar():
    src = """
arena 0
reg f1 1.0
reg f2 2.0
  ADD.f64 f3, f1, f2
  HALT
"""
    _, _, sb, ddg = prepare_superblock(src, vlen=512)
    packs = vectorize_vlv(sb, ddg, VectorizationConfig(512, vlv_enabled=True))
    assert packs == []


def test_baseline_forms_only_full_width_packs():
    for name in ("saxpy-f32-t2", "saxpy-f32-t4", "saxpy-f64-t4"):
        p = corpus()[name]
        header = find_loop_header(p)
        for vlen in (128, 256, 512):
            _, _, sb, ddg = prepare_superblock(p, seed_pc=header, vlen=vlen)
            cfg = VectorizationConfig(vlen)
            for pack in vectorize_baseline(sb, ddg, cfg):
                assert pack.mask == cfg.physical_lanes(pack.dtype)


# -- gathers, extracts, selective writing ------------------------------------------


def test_fully_vectorized_chain_needs_no_gather(saxpy4_src):
    p = parse_program(saxpy4_src)
    header = find_loop_header(p)
    _, _, sb, ddg = prepare_superblock(p, seed_pc=header, vlen=128)
    packs = vectorize_baseline(sb, ddg, VectorizationConfig(128))
    emit_pack_unpack(sb, packs, ddg)
    gathers = [i for i in sb.ir if i.op is IROp.GATHER]
    splats = [i for i in sb.ir if i.op is IROp.SPLAT]
    assert not gathers
    assert len(splats) == 1  # the loop-invariant multiplier broadcast


def test_pack_feeding_scalar_consumers_gets_extracts():
    p = corpus()["spread4"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    packs = vectorize_baseline(sb, ddg, VectorizationConfig(128))
    assert any(pack.op is IROp.LD for pack in packs)
    emit_pack_unpack(sb, packs, ddg)
    extracts = [i for i in sb.ir if i.op is IROp.EXTRACT]
    assert len(extracts) == 4  # one per scalar consumer lane


def test_swr_rewrites_single_consumer_producers():
    p = corpus()["mixed-producers"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    cfg = VectorizationConfig(128, swr_enabled=True)
    packs = vectorize_baseline(sb, ddg, cfg)
    emit_pack_unpack(sb, packs, ddg)
    apply_swr(sb, packs, ddg, cfg)
    assert not any(i.op is IROp.GATHER for i in sb.ir)
    slots = sorted(i.swr_slot[1] for i in sb.ir if i.swr_slot is not None)
    assert slots == [0, 1, 2, 3]


def test_swr_multi_consumer_inputs_fall_back_to_pack_lowering():
    p = corpus()["scatter4"]
    _, _, sb, ddg = prepare_superblock(p, vlen=128)
    cfg = VectorizationConfig(128, swr_enabled=True)
    packs = vectorize_baseline(sb, ddg, cfg)
    emit_pack_unpack(sb, packs, ddg)
    apply_swr(sb, packs, ddg, cfg)
    assert any(i.op is IROp.GATHER for i in sb.ir)  # chain values have 2 consumers


# -- lowering ------------------------------------------------------------------


def test_lowered_two_lane_pack_carries_mask():
    src = """
arena 0
reg f1 1.0
reg f2 2.0
reg f3 3.0
reg f4 4.0
  ADD.f32 f5, f1, f2
  ADD.f32 f6, f3, f4
  HALT
"""
    p = parse_program(src)
    rr = run_one(p, 128, "vlv")
    hp = rr.result.translations[0].hp
    vadds = [hi for hi in hp.code if hi.op is HostOp.VADD]
    assert len(vadds) == 1 and vadds[0].mask_k == 2


def test_lowered_selective_scalar_carries_destination_lane():
    p = corpus()["mixed-producers"]
    rr = run_one(p, 128, "swr")
    hp = rr.result.translations[0].hp
    lanes = sorted(hi.dest_lane for hi in hp.code
                   if hi.op in (HostOp.SADD, HostOp.SSUB, HostOp.SMUL, HostOp.SDIV))
    assert lanes == [0, 1, 2, 3]
    assert any(hi.dest_lane == 3 for hi in hp.code if hi.op is HostOp.SDIV)


def test_lowered_consecutive_f64_loads_become_masked_vector_load():
    src = """
arena 64
reg r1 0
reg r2 32
init 0 f64 1.0
init 8 f64 2.0
init 16 f64 3.0
init 24 f64 4.0
  LD.f64 f1, [r1+0]
  LD.f64 f2, [r1+8]
  LD.f64 f3, [r1+16]
  LD.f64 f4, [r1+24]
  ADD.f64 f5, f1, f1
  ADD.f64 f6, f2, f2
  ADD.f64 f7, f3, f3
  ADD.f64 f8, f4, f4
  ST.f64 [r2+0], f5
  ST.f64 [r2+8], f6
  ST.f64 [r2+16], f7
  ST.f64 [r2+24], f8
  HALT
"""
    p = parse_program(src)
    rr = run_one(p, 256, "baseline")
    assert rr.ok
    hp = rr.result.translations[0].hp
    vlds = [hi for hi in hp.code if hi.op is HostOp.VLD]
    assert len(vlds) == 1 and vlds[0].mask_k == 4


def test_pack_legality_verified_on_every_corpus_run():
    kernels = corpus()
    for name in ("fig7", "saxpy-f32-t4", "interleave2", "scatter4", "mixed-producers"):
        p = kernels[name]
        for vlen in (128, 256, 512):
            rr = run_one(p, vlen, "vlv+swr")
            assert rr.ok, (name, vlen)
            for unit in rr.result.translations.values():
                # re-verification happened inside translate(); packs exist here
                assert unit.hp is not None
