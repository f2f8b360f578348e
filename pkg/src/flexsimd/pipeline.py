"""Superblock formation, classic optimizations, dependence analysis, scheduling.

The pipeline runs: build_superblock -> unroll_loop -> to_ssa -> classic_optimize
-> build_ddg -> eliminate_redundant_mem -> (vectorizer) -> schedule_list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .guest import (
    ARITH_OPS,
    DType,
    GuestInstruction,
    GuestProgram,
    Imm,
    Opcode,
    ProfileData,
    Reg,
    block_leaders,
)
from .ir import ARITH_IROPS, Const, DepGraph, IRInst, IROp, Src, Superblock, TraceOp


class TranslationError(Exception):
    pass


@dataclass
class Thresholds:
    """Knobs for the staged translation machinery; all CLI-overridable."""

    bbm: int = 50            # interpretation -> block translation
    sbm: int = 500           # block translation -> superblock translation
    bias: float = 0.9        # branch bias needed to follow an edge
    max_size: int = 256      # cap on IR instructions per superblock
    recreate: int = 16       # assert/speculation failures before recreation
    translate: int = 1       # profile count needed before the driver translates

    @classmethod
    def from_spec(cls, text: str) -> "Thresholds":
        thr = cls()
        for item in text.split(","):
            if not item.strip():
                continue
            key, _, val = item.partition("=")
            key = key.strip()
            if not hasattr(thr, key):
                raise ValueError(f"unknown threshold {key!r}")
            setattr(thr, key, float(val) if key == "bias" else int(val))
        return thr


# --------------------------------------------------------------------------
# CFG helpers
# --------------------------------------------------------------------------


@dataclass
class BasicBlock:
    leader: int
    end: int  # index of the last instruction (inclusive)

    def pcs(self) -> range:
        return range(self.leader, self.end + 1)


@dataclass
class CFG:
    blocks: dict[int, BasicBlock]
    leaders: list[int]
    loop_headers: set[int]

    def block_at(self, pc: int) -> BasicBlock:
        return self.blocks[pc]


def build_cfg(program: GuestProgram) -> CFG:
    leaders = block_leaders(program)
    blocks: dict[int, BasicBlock] = {}
    for i, leader in enumerate(leaders):
        end = (leaders[i + 1] if i + 1 < len(leaders) else len(program.instructions)) - 1
        blocks[leader] = BasicBlock(leader, end)
    loop_headers = {
        gi.br_target_pc
        for pc, gi in enumerate(program.instructions)
        if gi.opcode in (Opcode.BR, Opcode.JMP) and gi.br_target_pc is not None and gi.br_target_pc <= pc
    }
    return CFG(blocks, leaders, loop_headers)


# --------------------------------------------------------------------------
# Superblock creation
# --------------------------------------------------------------------------


def build_superblock(
    profile: ProfileData,
    program: GuestProgram,
    seed_block: int,
    thresholds: Optional[Thresholds] = None,
    sb_id: int = 0,
    multi_exit: bool = False,
) -> Superblock:
    """Grow a superblock from `seed_block` along biased branch directions.

    Branches on the followed path become asserts (single-exit form). With
    `multi_exit=True` every branch stays live as a side exit instead; this is
    the recreation shape used after repeated assert failures.
    """
    thr = thresholds or Thresholds()
    cfg = build_cfg(program)
    trace: list[TraceOp] = []
    path_blocks: list[int] = []
    region: set[int] = set()
    assert_counter = 0

    cur = seed_block
    loop_header: Optional[int] = None
    while True:
        block = cfg.block_at(cur)
        path_blocks.append(cur)
        region.update(block.pcs())

        for pc in block.pcs():
            gi = program.instructions[pc]
            if gi.opcode is Opcode.HALT:
                trace.append(TraceOp(gi, pc, kind="exit", exit_kind="halt", exit_taken_pc=pc))
                return _finish(sb_id, seed_block, path_blocks, trace, region, multi_exit, loop_header)
            if gi.opcode is Opcode.JMP:
                nxt = gi.br_target_pc
                if _must_stop(nxt, path_blocks, cfg, trace, thr):
                    trace.append(TraceOp(gi, pc, kind="exit", exit_kind="jmp", exit_taken_pc=nxt))
                    return _finish(sb_id, seed_block, path_blocks, trace, region, multi_exit, loop_header)
                cur = nxt
                break  # continue growth at the jump target
            if gi.opcode is Opcode.BR:
                taken = profile.edge_count[(pc, True)]
                fall = profile.edge_count[(pc, False)]
                total = taken + fall
                follow: Optional[bool] = None
                if total > 0:
                    if taken / total >= thr.bias:
                        follow = True
                    elif fall / total >= thr.bias:
                        follow = False
                nxt = gi.br_target_pc if follow else (pc + 1 if follow is not None else None)
                if follow is None or _must_stop(nxt, path_blocks, cfg, trace, thr):
                    trace.append(
                        TraceOp(gi, pc, kind="exit", exit_kind="br",
                                exit_taken_pc=gi.br_target_pc, exit_fall_pc=pc + 1)
                    )
                    if gi.br_target_pc == seed_block and len(path_blocks) == 1 and pc == block.end:
                        loop_header = seed_block
                    return _finish(sb_id, seed_block, path_blocks, trace, region, multi_exit, loop_header)
                if multi_exit:
                    # Keep the branch live: falling off the followed path is a
                    # side exit, not a failure.
                    trace.append(
                        TraceOp(gi, pc, kind="exit", exit_kind="side",
                                expect_taken=follow, exit_taken_pc=gi.br_target_pc,
                                exit_fall_pc=pc + 1)
                    )
                else:
                    trace.append(TraceOp(gi, pc, kind="assert", expect_taken=follow))
                    assert_counter += 1
                cur = nxt
                break
            trace.append(TraceOp(gi, pc))
        else:
            # Fell through the end of the block without a terminator.
            nxt = block.end + 1
            if _must_stop(nxt, path_blocks, cfg, trace, thr):
                trace.append(
                    TraceOp(program.instructions[block.end], block.end, kind="exit",
                            exit_kind="jmp", exit_taken_pc=nxt)
                )
                # The fall-through instruction already went into the trace; the
                # exit op is synthetic and must not re-execute it.
                trace[-1] = TraceOp(
                    GuestInstruction(Opcode.JMP, br_target_pc=nxt), block.end,
                    kind="exit", exit_kind="jmp", exit_taken_pc=nxt,
                )
                return _finish(sb_id, seed_block, path_blocks, trace, region, multi_exit, loop_header)
            cur = nxt


def _must_stop(nxt: Optional[int], path_blocks: list[int], cfg: CFG, trace: list, thr: Thresholds) -> bool:
    if nxt is None or nxt >= max(b.end for b in cfg.blocks.values()) + 2:
        return True
    return nxt in path_blocks or nxt in cfg.loop_headers or len(trace) >= thr.max_size


def _finish(sb_id, seed, blocks, trace, region, multi_exit, loop_header) -> Superblock:
    return Superblock(
        sb_id=sb_id,
        seed_pc=seed,
        guest_blocks=blocks,
        trace=trace,
        region=region,
        multi_exit=multi_exit,
        loop_header=loop_header,
    )


def unroll_loop(sb: Superblock, profile: ProfileData, physical_lanes: Callable[[DType], int] | int) -> Superblock:
    """Replicate a single-basic-block loop body to fill the vector path.

    The unroll factor is min(modal observed trip count, lanes available for
    the loop's dominant FP dtype). Residual iterations are left to the scalar
    fallback path (assert failure -> reinterpretation).
    """
    if sb.loop_header is None:
        return sb
    exit_op = sb.trace[-1]
    if exit_op.exit_kind != "br":
        return sb

    body = sb.trace[:-1]
    if any(t.kind != "op" for t in body):
        return sb

    dtype = _dominant_fp_dtype(body)
    if callable(physical_lanes):
        lanes = physical_lanes(dtype) if dtype is not None else 1
    else:
        lanes = physical_lanes
    trips = profile.modal_trip(sb.loop_header)
    u = max(1, min(trips, lanes))
    if u < 2:
        return sb

    # The loop continues along whichever exit direction targets the header.
    continue_taken = exit_op.exit_taken_pc == sb.loop_header
    new_trace: list[TraceOp] = []
    for copy in range(u):
        for top in body:
            new_trace.append(TraceOp(top.gi, top.guest_pc, copy_index=copy))
        if copy < u - 1:
            if sb.multi_exit:
                new_trace.append(
                    TraceOp(exit_op.gi, exit_op.guest_pc, kind="exit", exit_kind="side",
                            expect_taken=continue_taken, exit_taken_pc=exit_op.exit_taken_pc,
                            exit_fall_pc=exit_op.exit_fall_pc, copy_index=copy)
                )
            else:
                new_trace.append(
                    TraceOp(exit_op.gi, exit_op.guest_pc, kind="assert",
                            expect_taken=continue_taken, copy_index=copy)
                )
        else:
            new_trace.append(
                TraceOp(exit_op.gi, exit_op.guest_pc, kind="exit", exit_kind="br",
                        exit_taken_pc=exit_op.exit_taken_pc, exit_fall_pc=exit_op.exit_fall_pc,
                        copy_index=copy)
            )
    sb.trace = new_trace
    sb.unroll_factor = u
    return sb


def _dominant_fp_dtype(trace: list[TraceOp]) -> Optional[DType]:
    counts: dict[DType, int] = {}
    for top in trace:
        gi = top.gi
        if gi.fp:
            counts[gi.dtype] = counts.get(gi.dtype, 0) + 1
    if not counts:
        return None
    return max(counts.items(), key=lambda kv: (kv[1], kv[0].width_bits))[0]


# --------------------------------------------------------------------------
# SSA conversion
# --------------------------------------------------------------------------


def to_ssa(sb: Superblock) -> Superblock:
    """Rename every definition so each value is written exactly once."""
    env: dict[Reg, Src] = {}
    flags: Optional[Src] = None
    flags_written = False
    written: set[Reg] = set()
    ir: list[IRInst] = []
    assert_counter = 0

    def read_reg(reg: Reg) -> Src:
        if reg not in env:
            env[reg] = sb.new_value(reg.bank, ("input", reg))
        return env[reg]

    def read_src(operand) -> Src:
        if isinstance(operand, Imm):
            return Const(operand.value)
        return read_reg(operand)

    def read_flags() -> Src:
        nonlocal flags
        if flags is None:
            flags = sb.new_value("flag", ("input-flags",))
        return flags

    for top in sb.trace:
        gi = top.gi
        iid = len(ir)
        if top.kind == "assert":
            inst = IRInst(iid, IROp.ASSERT, srcs=[read_flags()], cond=gi.br_cond,
                          expect_taken=top.expect_taken, assert_id=assert_counter,
                          guest_pc=top.guest_pc, copy_index=top.copy_index)
            assert_counter += 1
            ir.append(inst)
            continue
        if top.kind == "exit":
            snapshot = {r: env[r] for r in written}
            snap_flags = flags if flags_written else None
            if top.exit_kind in ("br", "side"):
                inst = IRInst(iid, IROp.EXIT, srcs=[read_flags()], cond=gi.br_cond,
                              exit_kind=top.exit_kind, expect_taken=top.expect_taken,
                              exit_taken_pc=top.exit_taken_pc, exit_fall_pc=top.exit_fall_pc,
                              guest_pc=top.guest_pc, copy_index=top.copy_index,
                              exit_env=snapshot, exit_flags=snap_flags)
            else:
                inst = IRInst(iid, IROp.EXIT, exit_kind=top.exit_kind,
                              exit_taken_pc=top.exit_taken_pc, guest_pc=top.guest_pc,
                              copy_index=top.copy_index,
                              exit_env=snapshot, exit_flags=snap_flags)
            ir.append(inst)
            continue

        op = IROp(gi.opcode.value)
        dtype = gi.dtype
        if op is IROp.LD:
            base, off = gi.mem
            dst = sb.new_value(dtype.kind, ("def", iid), dtype)
            inst = IRInst(iid, op, dtype, dst=dst, addr=(read_reg(base), off),
                          guest_pc=top.guest_pc, fp=gi.fp, copy_index=top.copy_index)
            env[gi.dst] = dst
            written.add(gi.dst)
        elif op is IROp.ST:
            base, off = gi.mem
            inst = IRInst(iid, op, dtype, srcs=[read_src(gi.srcs[0])], addr=(read_reg(base), off),
                          guest_pc=top.guest_pc, fp=gi.fp, copy_index=top.copy_index)
        elif op is IROp.CMP:
            dst = sb.new_value("flag", ("def", iid), dtype)
            inst = IRInst(iid, op, dtype, dst=dst, srcs=[read_src(s) for s in gi.srcs],
                          guest_pc=top.guest_pc, fp=gi.fp, copy_index=top.copy_index)
            flags = dst
            flags_written = True
        else:  # MOV / CVT / arithmetic
            srcs = [read_src(s) for s in gi.srcs]
            dst = sb.new_value(gi.dst.bank, ("def", iid), dtype)
            inst = IRInst(iid, op, dtype, dst=dst, srcs=srcs,
                          guest_pc=top.guest_pc, fp=gi.fp, copy_index=top.copy_index)
            env[gi.dst] = dst
            written.add(gi.dst)
        ir.append(inst)

    sb.ir = ir
    sb.reg_out = {reg: env[reg] for reg in written}
    sb.flags_out = flags if flags_written else None
    return sb


# --------------------------------------------------------------------------
# Classic optimizations: fold, const-prop, copy-prop, CSE, then DCE
# --------------------------------------------------------------------------


def classic_optimize(sb: Superblock) -> Superblock:
    """One forward pass (fold/const/copy/CSE) followed by one backward DCE pass."""
    replace: dict[int, Src] = {}

    def resolve(src: Src) -> Src:
        while isinstance(src, int) and src in replace:
            src = replace[src]
        return src

    cse: dict[tuple, int] = {}
    load_cse: dict[tuple, int] = {}
    kept: list[IRInst] = []

    for inst in sb.ir:
        inst.srcs = [resolve(s) for s in inst.srcs]
        if inst.addr is not None:
            inst.addr = (resolve(inst.addr[0]), inst.addr[1])
        if inst.exit_env is not None:
            inst.exit_env = {r: resolve(v) for r, v in inst.exit_env.items()}
            if inst.exit_flags is not None:
                inst.exit_flags = resolve(inst.exit_flags)

        if inst.op is IROp.MOV:
            replace[inst.dst] = inst.srcs[0]
            continue
        if inst.op in ARITH_IROPS and all(isinstance(s, Const) for s in inst.srcs):
            replace[inst.dst] = Const(_fold(inst))
            continue
        if inst.op is IROp.CVT and isinstance(inst.srcs[0], Const):
            from .guest import convert

            replace[inst.dst] = Const(convert(inst.dtype, inst.srcs[0].value))
            continue
        if inst.op is IROp.CMP and all(isinstance(s, Const) for s in inst.srcs):
            from . import fpmath

            replace[inst.dst] = Const(fpmath.compare(inst.srcs[0].value, inst.srcs[1].value))
            continue
        if inst.op is IROp.ASSERT and isinstance(inst.srcs[0], Const):
            from . import fpmath

            holds = fpmath.cond_holds(inst.cond, inst.srcs[0].value)
            if holds == inst.expect_taken:
                continue  # statically satisfied
            kept.append(inst)  # will fail at runtime; keep it honest
            continue
        if inst.op is IROp.EXIT and inst.exit_kind in ("br", "side") and isinstance(inst.srcs[0], Const):
            from . import fpmath

            taken = fpmath.cond_holds(inst.cond, inst.srcs[0].value)
            inst.exit_kind = "jmp"
            inst.exit_taken_pc = inst.exit_taken_pc if taken else inst.exit_fall_pc
            inst.srcs = []
            inst.cond = None
            kept.append(inst)
            continue

        if inst.op in ARITH_IROPS or inst.op in (IROp.CVT, IROp.CMP):
            key = (inst.op, inst.dtype, tuple(inst.srcs))
            prev = cse.get(key)
            if prev is not None:
                replace[inst.dst] = prev
                continue
            cse[key] = inst.dst
        elif inst.op is IROp.LD:
            key = (inst.dtype, inst.addr)
            prev = load_cse.get(key)
            if prev is not None:
                replace[inst.dst] = prev
                continue
            load_cse[key] = inst.dst
        elif inst.op is IROp.ST:
            load_cse.clear()  # any store invalidates pending load reuse

        kept.append(inst)

    sb.reg_out = {r: resolve(v) for r, v in sb.reg_out.items()}
    if sb.flags_out is not None:
        sb.flags_out = resolve(sb.flags_out)

    sb.ir = _dce(kept, sb)
    _renumber(sb)
    return sb


def _fold(inst: IRInst):
    from . import fpmath

    a, b = (s.value for s in inst.srcs)
    if inst.dtype is DType.i32:
        return fpmath.int_binop(inst.op.value, a, b)
    return fpmath.fp_binop(inst.op.value, inst.dtype.width_bits, a, b)


def _dce(insts: list[IRInst], sb: Superblock) -> list[IRInst]:
    live: set[int] = set()
    out: list[IRInst] = []
    for inst in reversed(insts):
        has_effect = inst.op in (IROp.ST, IROp.ASSERT, IROp.EXIT)
        if not has_effect and (inst.dst is None or inst.dst not in live):
            continue
        for s in inst.srcs:
            if isinstance(s, int):
                live.add(s)
        if inst.addr is not None and isinstance(inst.addr[0], int):
            live.add(inst.addr[0])
        if inst.exit_env is not None:
            live.update(v for v in inst.exit_env.values() if isinstance(v, int))
            if isinstance(inst.exit_flags, int):
                live.add(inst.exit_flags)
        out.append(inst)
    out.reverse()
    return out


def _renumber(sb: Superblock) -> None:
    for new_iid, inst in enumerate(sb.ir):
        if inst.dst is not None:
            sb.values[inst.dst].source = ("def", new_iid)
        inst.iid = new_iid


# --------------------------------------------------------------------------
# Dependence graph with symbolic memory disambiguation
# --------------------------------------------------------------------------


def resolve_address(sb: Superblock, ddg_defs: dict[int, IRInst], src: Src, offset: int,
                    _seen: Optional[set] = None) -> tuple[Optional[int], int]:
    """Reduce an address to (root value | None, byte offset).

    Walks copy and add/sub-by-constant chains. A `None` root means the address
    is an absolute constant.
    """
    while True:
        if isinstance(src, Const):
            return None, offset + int(src.value)
        inst = ddg_defs.get(src)
        if inst is None:
            return src, offset
        if inst.op is IROp.MOV:
            src = inst.srcs[0]
            continue
        if inst.op in (IROp.ADD, IROp.SUB) and inst.dtype is DType.i32:
            a, b = inst.srcs
            if isinstance(b, Const):
                offset += int(b.value) if inst.op is IROp.ADD else -int(b.value)
                src = a
                continue
            if isinstance(a, Const) and inst.op is IROp.ADD:
                offset += int(a.value)
                src = b
                continue
        return src, offset


def classify_pair(addr_a, width_a, addr_b, width_b) -> str:
    root_a, off_a = addr_a
    root_b, off_b = addr_b
    if root_a == root_b:
        if off_a + width_a <= off_b or off_b + width_b <= off_a:
            return "no"
        return "must"
    return "may"


def build_ddg(sb: Superblock) -> DepGraph:
    """True def-use edges plus classified ordering edges between memory ops."""
    defs: dict[int, IRInst] = {i.dst: i for i in sb.ir if i.dst is not None}
    ddg = DepGraph(nodes=[i.iid for i in sb.ir])

    for inst in sb.ir:
        for s in inst.srcs:
            if isinstance(s, int) and s in defs:
                ddg.add_true_edge(defs[s].iid, inst.iid)
        if inst.addr is not None and isinstance(inst.addr[0], int) and inst.addr[0] in defs:
            ddg.add_true_edge(defs[inst.addr[0]].iid, inst.iid)

    mem_ops = [i for i in sb.ir if i.is_mem]
    for inst in mem_ops:
        ddg.addr_of[inst.iid] = resolve_address(sb, defs, inst.addr[0], inst.addr[1])

    for i, a in enumerate(mem_ops):
        for b in mem_ops[i + 1:]:
            kind = classify_pair(
                ddg.addr_of[a.iid], a.dtype.width_bytes,
                ddg.addr_of[b.iid], b.dtype.width_bytes,
            )
            ddg.alias[(a.iid, b.iid)] = kind
            if kind != "no" and (a.is_store or b.is_store):
                ddg.mem_edges.append((a.iid, b.iid, kind))
    return ddg


def eliminate_redundant_mem(sb: Superblock, ddg: DepGraph) -> Superblock:
    """Store forwarding and redundant load elimination over must-alias facts.

    Forwarding an f32 store to a load must narrow the register value the way
    the memory round trip would, so those loads become converts instead of
    plain copies.
    """
    available: dict[tuple, tuple[Src, bool]] = {}  # (root, off, dtype) -> (value, from_store)
    replace: dict[int, Src] = {}

    def resolve(src: Src) -> Src:
        while isinstance(src, int) and src in replace:
            src = replace[src]
        return src

    kept: list[IRInst] = []
    for inst in sb.ir:
        inst.srcs = [resolve(s) for s in inst.srcs]
        if inst.exit_env is not None:
            inst.exit_env = {r: resolve(v) for r, v in inst.exit_env.items()}
            if inst.exit_flags is not None:
                inst.exit_flags = resolve(inst.exit_flags)
        if inst.op is IROp.LD:
            root, off = ddg.addr_of[inst.iid]
            key = (root, off, inst.dtype)
            hit = available.get(key)
            if hit is not None:
                value, from_store = hit
                if from_store and inst.dtype is DType.f32:
                    from . import fpmath

                    if isinstance(value, Const):
                        replace[inst.dst] = Const(fpmath.round_f32(value.value))
                        continue
                    inst.op = IROp.CVT
                    inst.srcs = [value]
                    inst.addr = None
                    kept.append(inst)
                    continue
                replace[inst.dst] = value
                continue
            available[key] = (inst.dst, False)
        elif inst.op is IROp.ST:
            root, off = ddg.addr_of[inst.iid]
            width = inst.dtype.width_bytes
            for (k_root, k_off, k_dt) in list(available):
                same_root = k_root == root
                disjoint = same_root and (k_off + k_dt.width_bytes <= off or off + width <= k_off)
                if not disjoint:
                    del available[(k_root, k_off, k_dt)]  # may or must overlap
            available[(root, off, inst.dtype)] = (inst.srcs[0], True)
        kept.append(inst)

    sb.reg_out = {r: resolve(v) for r, v in sb.reg_out.items()}
    if isinstance(sb.flags_out, int):
        sb.flags_out = resolve(sb.flags_out)
    sb.ir = _dce(kept, sb)
    _renumber(sb)
    return sb


# --------------------------------------------------------------------------
# List scheduling
# --------------------------------------------------------------------------


def schedule_list(
    nodes: list[int],
    edges: list[tuple[int, int]],
    latency: Callable[[int], int],
    original_index: Callable[[int], int],
    pinned_last: Optional[int] = None,
) -> list[int]:
    """Topological order by critical-path priority, ties by original order."""
    succs: dict[int, list[int]] = {n: [] for n in nodes}
    preds_left: dict[int, int] = {n: 0 for n in nodes}
    for a, b in edges:
        succs[a].append(b)
        preds_left[b] += 1

    height: dict[int, int] = {}
    order_for_height = _topo(nodes, succs, preds_left.copy())
    for n in reversed(order_for_height):
        below = max((height[s] for s in succs[n]), default=0)
        height[n] = latency(n) + below

    ready = [n for n in nodes if preds_left[n] == 0 and n != pinned_last]
    out: list[int] = []
    pending = set(nodes)
    while ready:
        ready.sort(key=lambda n: (-height[n], original_index(n)))
        n = ready.pop(0)
        out.append(n)
        pending.discard(n)
        for s in succs[n]:
            preds_left[s] -= 1
            if preds_left[s] == 0 and s != pinned_last:
                ready.append(s)
    if pinned_last is not None and pinned_last in pending:
        if preds_left[pinned_last] != 0:
            raise TranslationError("scheduling cycle through the exit node")
        out.append(pinned_last)
        pending.discard(pinned_last)
    if pending:
        raise TranslationError(f"scheduling cycle among nodes {sorted(pending)}")
    return out


def _topo(nodes, succs, preds_left) -> list[int]:
    ready = [n for n in nodes if preds_left[n] == 0]
    out = []
    while ready:
        n = ready.pop()
        out.append(n)
        for s in succs[n]:
            preds_left[s] -= 1
            if preds_left[s] == 0:
                ready.append(s)
    if len(out) != len(nodes):
        raise TranslationError("dependence graph contains a cycle")
    return out
