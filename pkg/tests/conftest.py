"""Shared helpers for building translation products inside tests."""

from __future__ import annotations

import pytest

from flexsimd import (
    Thresholds,
    VectorizationConfig,
    build_ddg,
    build_superblock,
    classic_optimize,
    eliminate_redundant_mem,
    parse_program,
    run_oracle,
    to_ssa,
    unroll_loop,
)
from flexsimd.guest import Opcode
from flexsimd.pipeline import build_cfg


def find_loop_header(program) -> int:
    cfg = build_cfg(program)
    headers = sorted(cfg.loop_headers)
    if not headers:
        raise AssertionError("kernel has no loop")
    return headers[0]


def prepare_superblock(src_or_program, seed_pc=None, vlen=128, thresholds=None):
    """Parse, profile, and run the scalar pipeline up to the dependence graph."""
    program = parse_program(src_or_program) if isinstance(src_or_program, str) else src_or_program
    oracle_state, profile = run_oracle(program)
    thr = thresholds or Thresholds()
    if seed_pc is None:
        seed_pc = program.entry
    cfg = VectorizationConfig(physical_bits=vlen)
    sb = build_superblock(profile, program, seed_pc, thr, sb_id=1)
    sb = unroll_loop(sb, profile, cfg.physical_lanes)
    sb = to_ssa(sb)
    sb = classic_optimize(sb)
    ddg = build_ddg(sb)
    sb = eliminate_redundant_mem(sb, ddg)
    ddg = build_ddg(sb)
    return program, profile, sb, ddg


@pytest.fixture
def saxpy4_src() -> str:
    lines = ["arena 2048", "reg r1 0", "reg r2 1024", "reg f0 2.5"]
    for i in range(4):
        lines.append(f"init {i * 4} f32 {i + 1}.25")
        lines.append(f"init {1024 + i * 4} f32 {10 * (i + 1)}.5")
    lines += [
        "  MOV.i32 r3, 0",
        "  MOV.i32 r4, 4",
        "loop:",
        "  LD.f32 f1, [r1+0]",
        "  MUL.f32 f2, f1, f0",
        "  LD.f32 f3, [r2+0]",
        "  ADD.f32 f4, f2, f3",
        "  ST.f32 [r2+0], f4",
        "  ADD.i32 r1, r1, 4",
        "  ADD.i32 r2, r2, 4",
        "  ADD.i32 r3, r3, 1",
        "  CMP.i32 r3, r4",
        "  BR lt, loop",
        "  HALT",
    ]
    return "\n".join(lines)
