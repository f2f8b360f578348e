"""Lowering: scheduled superblock IR plus packs down to host instructions.

Units (packs and remaining scalar instructions) are list-scheduled over the
dependence graph; may-alias ordering edges that would block a pack are broken
and the affected memory operations become speculative, with a runtime overlap
check between each reordered pair. Register assignment is a direct mapping
onto the 128-entry host files: every SSA value gets its own register (or a
lane of a shared one under selective writing); exceeding the file is a
translation error, not a spill.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .guest import DType, Reg
from .ir import ARITH_IROPS, Const, DepGraph, IRInst, IROp, Src, Superblock
from .hostvm import (
    NUM_HOST_INT_REGS,
    NUM_HOST_VEC_REGS,
    HostInstruction,
    HostOp,
    HostProgram,
)
from .pipeline import TranslationError, schedule_list
from .vectorize import Pack, VectorizationConfig

_SCALAR_FP = {IROp.ADD: HostOp.SADD, IROp.SUB: HostOp.SSUB,
              IROp.MUL: HostOp.SMUL, IROp.DIV: HostOp.SDIV}
_VECTOR_FP = {IROp.ADD: HostOp.VADD, IROp.SUB: HostOp.VSUB,
              IROp.MUL: HostOp.VMUL, IROp.DIV: HostOp.VDIV}
_INT_OP = {IROp.ADD: HostOp.IADD, IROp.SUB: HostOp.ISUB,
           IROp.MUL: HostOp.IMUL, IROp.DIV: HostOp.IDIV}


def _sched_latency(inst: IRInst) -> int:
    op = inst.op
    if op is IROp.LD:
        return 3
    if op in ARITH_IROPS:
        if inst.dtype is DType.i32:
            return {IROp.MUL: 3, IROp.DIV: 10}.get(op, 1)
        return {IROp.MUL: 4, IROp.DIV: 20}.get(op, 2)
    if op in (IROp.CMP, IROp.CVT, IROp.GATHER, IROp.SPLAT, IROp.EXTRACT):
        return 2
    return 1


Unit = tuple  # ('p', pack id) or ('s', instruction id)


def lower_to_host(
    sb: Superblock,
    ddg: DepGraph,
    packs: list[Pack],
    cfg: VectorizationConfig,
    mode: str = "scalar",
    allow_speculation: bool = True,
    keep_order: bool = False,
) -> HostProgram:
    insts = {i.iid: i for i in sb.ir}
    def_of = {i.dst: i for i in sb.ir if i.dst is not None}
    pack_by_id = {p.pid: p for p in packs}
    unit_of: dict[int, Unit] = {}
    for p in packs:
        for m in p.members:
            unit_of[m] = ("p", p.pid)
    for inst in sb.ir:
        unit_of.setdefault(inst.iid, ("s", inst.iid))

    units: list[Unit] = []
    seen = set()
    for inst in sb.ir:
        u = unit_of[inst.iid]
        if u not in seen:
            seen.add(u)
            units.append(u)

    def unit_reads(u: Unit) -> list[int]:
        reads: list[int] = []
        if u[0] == "s":
            inst = insts[u[1]]
            reads.extend(s for s in inst.srcs if isinstance(s, int))
            if inst.addr is not None and isinstance(inst.addr[0], int):
                reads.append(inst.addr[0])
            if inst.exit_env is not None:
                reads.extend(v for v in inst.exit_env.values() if isinstance(v, int))
                if isinstance(inst.exit_flags, int):
                    reads.append(inst.exit_flags)
            return reads
        pack = pack_by_id[u[1]]
        if pack.is_mem:
            first = insts[pack.members[0]]
            if isinstance(first.addr[0], int):
                reads.append(first.addr[0])
        for plan in pack.operand_plans:
            if plan[0] in ("splat", "gather"):
                reads.append(insts[plan[1]].dst)
            elif plan[0] == "swr":
                reads.extend(insts[iid].dst for iid in plan[2])
        return reads

    # Value-dependence edges between units.
    dep_edges: set[tuple[Unit, Unit]] = set()
    for u in units:
        for vid in unit_reads(u):
            producer = def_of.get(vid)
            if producer is None:
                continue
            pu = unit_of[producer.iid]
            if pu != u:
                dep_edges.add((pu, u))
    for p in packs:
        for plan in p.operand_plans:
            if plan[0] == "forward":
                dep_edges.add((("p", plan[1].pid), ("p", p.pid)))

    # Prune units nothing observable depends on.
    roots = set()
    exit_units: list[Unit] = []
    for inst in sb.ir:
        u = unit_of[inst.iid]
        if inst.op in (IROp.ASSERT, IROp.EXIT) or inst.is_store:
            roots.add(u)
        if inst.op is IROp.EXIT:
            exit_units.append(u)
    rev: dict[Unit, set[Unit]] = {}
    for a, b in dep_edges:
        rev.setdefault(b, set()).add(a)
    needed = set(roots)
    work = list(roots)
    while work:
        u = work.pop()
        for p in rev.get(u, ()):
            if p not in needed:
                needed.add(p)
                work.append(p)
    units = [u for u in units if u in needed]
    unit_set = set(units)
    dep_edges = {(a, b) for a, b in dep_edges if a in unit_set and b in unit_set}

    # Ordering edges between memory operations. May-alias edges that would
    # create a cycle through a pack are dropped and checked at runtime.
    order_edges: set[tuple[Unit, Unit]] = set(dep_edges)
    spec_candidates: list[tuple[int, int]] = []
    adjacency: dict[Unit, set[Unit]] = {}
    for a, b in order_edges:
        adjacency.setdefault(a, set()).add(b)

    def creates_cycle(a: Unit, b: Unit) -> bool:
        # Is a reachable from b along current edges?
        stack, visited = [b], set()
        while stack:
            n = stack.pop()
            if n == a:
                return True
            if n in visited:
                continue
            visited.add(n)
            stack.extend(adjacency.get(n, ()))
        return False

    for a_iid, b_iid, kind in sorted(ddg.mem_edges):
        ua, ub = unit_of.get(a_iid), unit_of.get(b_iid)
        if ua not in unit_set or ub not in unit_set or ua == ub:
            continue
        if kind == "must" or not allow_speculation:
            order_edges.add((ua, ub))
            adjacency.setdefault(ua, set()).add(ub)
            continue
        if creates_cycle(ua, ub):
            spec_candidates.append((a_iid, b_iid))
        else:
            order_edges.add((ua, ub))
            adjacency.setdefault(ua, set()).add(ub)

    def unit_latency(u: Unit) -> int:
        if u[0] == "s":
            return _sched_latency(insts[u[1]])
        return _sched_latency(insts[pack_by_id[u[1]].members[0]])

    def unit_index(u: Unit) -> int:
        if u[0] == "s":
            return insts[u[1]].iid
        return min(pack_by_id[u[1]].members)

    final_exit = exit_units[-1] if exit_units else None
    if keep_order:
        order = sorted(units, key=unit_index)
    else:
        order = schedule_list(units, sorted(order_edges, key=str), unit_latency,
                              unit_index, pinned_last=final_exit)

    emitter = _Emitter(sb, insts, def_of, pack_by_id, cfg, mode)
    for u in order:
        if u[0] == "s":
            emitter.emit_scalar(insts[u[1]])
        else:
            emitter.emit_pack(pack_by_id[u[1]], ddg)

    hp = HostProgram(
        sb_id=sb.sb_id,
        entry_pc=sb.seed_pc,
        code=emitter.code,
        live_in=emitter.live_in,
        live_out=emitter.final_live_out,
        guest_region=set(sb.region),
        unroll_factor=sb.unroll_factor,
        multi_exit=sb.multi_exit,
        mode=mode,
    )

    # Activate runtime checks only for pairs whose emitted order is inverted.
    seen_pairs: set[tuple[int, int]] = set()
    for a_iid, b_iid in spec_candidates:
        ia = emitter.mem_code_idx.get(a_iid)
        ib = emitter.mem_code_idx.get(b_iid)
        if ia is None or ib is None or ia < ib or (ia, ib) in seen_pairs:
            continue
        seen_pairs.add((ia, ib))
        pair_id = len(hp.spec_pairs)
        hp.spec_pairs.append((ia, ib))
        hp.code[ia].speculative = True
        hp.code[ib].speculative = True
        hp.code[ia].spec_pairs.append(pair_id)
        hp.code[ib].spec_pairs.append(pair_id)
    return hp


class _Emitter:
    def __init__(self, sb: Superblock, insts, def_of, pack_by_id, cfg: VectorizationConfig, mode: str):
        self.sb = sb
        self.insts = insts
        self.def_of = def_of
        self.cfg = cfg
        self.mode = mode
        self.code: list[HostInstruction] = []
        self.live_in: list[tuple] = []
        self.final_live_out: list[tuple] = []
        self.loc_of: dict[int, tuple] = {}  # vid -> ('i', n) | ('v', n, lane)
        self.swr_group_reg: dict[int, int] = {}
        self.pseudo_reg: dict[int, int] = {}  # gather/splat iid -> vreg
        self.pack_reg: dict[int, int] = {}
        self.mem_code_idx: dict[int, int] = {}  # memory iid -> emitted code index
        self._next_ireg = 0
        self._next_vreg = 0

    def new_ireg(self) -> int:
        if self._next_ireg >= NUM_HOST_INT_REGS:
            raise TranslationError("integer register file exhausted (128 registers)")
        self._next_ireg += 1
        return self._next_ireg - 1

    def new_vreg(self) -> int:
        if self._next_vreg >= NUM_HOST_VEC_REGS:
            raise TranslationError("vector register file exhausted (128 registers)")
        self._next_vreg += 1
        return self._next_vreg - 1

    def loc(self, src: Src) -> tuple:
        if isinstance(src, Const):
            return ("imm", src.value)
        if src in self.loc_of:
            return self.loc_of[src]
        value = self.sb.values[src]
        if value.source[0] not in ("input", "input-flags"):
            raise TranslationError(f"value v{src} used before its definition was emitted")
        if value.kind == "f":
            reg = self.new_vreg()
            where = ("v", reg, 0)
        else:
            reg = self.new_ireg()
            where = ("i", reg)
        self.loc_of[src] = where
        target = value.source[1] if value.source[0] == "input" else "flags"
        self.live_in.append((target, where))
        return where

    def scalar_loc(self, src: Src) -> tuple:
        """Operand for a scalar op: immediates, int regs, or element 0."""
        where = self.loc(src)
        if where[0] == "v" and where[2] != 0:
            raise TranslationError(f"scalar operand expected in element 0, got {where}")
        return where

    def _dst_fp(self, inst: IRInst) -> tuple[tuple, int]:
        """Destination register and lane for a scalar FP result."""
        if inst.swr_slot is not None:
            gid, lane = inst.swr_slot
            if gid not in self.swr_group_reg:
                self.swr_group_reg[gid] = self.new_vreg()
            reg = self.swr_group_reg[gid]
        else:
            reg, lane = self.new_vreg(), 0
        self.loc_of[inst.dst] = ("v", reg, lane)
        return ("v", reg), lane

    def _exit_live_out(self, inst: IRInst) -> list[tuple]:
        out = []
        for reg, src in sorted(inst.exit_env.items()) if inst.exit_env else []:
            out.append((reg, self.loc(src)))
        if inst.exit_flags is not None:
            out.append(("flags", self.loc(inst.exit_flags)))
        return out

    def _push(self, hi: HostInstruction) -> int:
        self.code.append(hi)
        return len(self.code) - 1

    # -- scalar units ---------------------------------------------------------

    def emit_scalar(self, inst: IRInst) -> None:
        op = inst.op
        if op is IROp.ASSERT:
            self._push(HostInstruction(
                HostOp.ASSERT, srcs=[self.loc(inst.srcs[0])], cond=inst.cond,
                expect_taken=inst.expect_taken, assert_id=inst.assert_id,
                acct="other", ruses=[self.loc(inst.srcs[0])]))
            return
        if op is IROp.EXIT:
            live_out = self._exit_live_out(inst)
            if inst.exit_kind == "halt":
                hi = HostInstruction(HostOp.HALT, exit_kind="halt",
                                     exit_taken_pc=inst.exit_taken_pc, acct="other")
            elif inst.exit_kind == "jmp":
                hi = HostInstruction(HostOp.EXIT, exit_kind="jmp",
                                     exit_taken_pc=inst.exit_taken_pc, acct="other")
            else:
                flag = self.loc(inst.srcs[0])
                hi = HostInstruction(HostOp.EXIT, srcs=[flag], cond=inst.cond,
                                     exit_kind=inst.exit_kind, expect_taken=inst.expect_taken,
                                     exit_taken_pc=inst.exit_taken_pc,
                                     exit_fall_pc=inst.exit_fall_pc, acct="other",
                                     ruses=[flag])
            hi.live_out = live_out
            self.final_live_out = live_out
            self._push(hi)
            return
        if op is IROp.GATHER:
            self._emit_gather(inst)
            return
        if op is IROp.SPLAT:
            src = self.loc(inst.srcs[0])
            reg = self.new_vreg()
            self.pseudo_reg[inst.iid] = reg
            self.loc_of[inst.dst] = ("v", reg, 0)
            lanes = self.cfg.physical_lanes(inst.dtype)
            self._push(HostInstruction(
                HostOp.VSPLAT, inst.dtype, dst=("v", reg), srcs=[src], acct="perm",
                ruses=[src] if src[0] != "imm" else [],
                rdefs=[("v", reg, l) for l in range(lanes)]))
            return
        if op is IROp.EXTRACT:
            src = self.loc(inst.srcs[0])  # a packed value: (v, reg, lane)
            reg = self.new_vreg()
            self.loc_of[inst.dst] = ("v", reg, 0)
            self._push(HostInstruction(
                HostOp.EXTRACT, inst.dtype, dst=("v", reg), srcs=[src], acct="perm",
                ruses=[src], rdefs=[("v", reg, 0)]))
            return

        dtype = inst.dtype
        is_int = dtype is DType.i32 if dtype is not None else True
        if op is IROp.LD:
            base = self.loc(inst.addr[0])
            if is_int:
                reg = self.new_ireg()
                self.loc_of[inst.dst] = ("i", reg)
                idx = self._push(HostInstruction(
                    HostOp.ILD, dtype, dst=("i", reg), addr=(base, inst.addr[1]),
                    acct="other", speculative=False,
                    ruses=[base] if base[0] != "imm" else [], rdefs=[("i", reg)]))
            else:
                dst, lane = self._dst_fp(inst)
                idx = self._push(HostInstruction(
                    HostOp.SLD, dtype, dst=dst, dest_lane=lane, addr=(base, inst.addr[1]),
                    acct="scalar_fp", covers=1,
                    ruses=[base] if base[0] != "imm" else [], rdefs=[(*dst, lane)]))
            self.mem_code_idx[inst.iid] = idx
            return
        if op is IROp.ST:
            base = self.loc(inst.addr[0])
            src = self.scalar_loc(inst.srcs[0])
            ruses = [x for x in (base, src) if x[0] != "imm"]
            if is_int:
                idx = self._push(HostInstruction(
                    HostOp.IST, dtype, srcs=[src], addr=(base, inst.addr[1]),
                    acct="other", ruses=ruses))
            else:
                idx = self._push(HostInstruction(
                    HostOp.SST, dtype, srcs=[src], addr=(base, inst.addr[1]),
                    acct="scalar_fp", covers=1, ruses=ruses))
            self.mem_code_idx[inst.iid] = idx
            return
        if op is IROp.CMP:
            srcs = [self.scalar_loc(s) for s in inst.srcs]
            reg = self.new_ireg()
            self.loc_of[inst.dst] = ("i", reg)
            hop = HostOp.ICMP if is_int else HostOp.FCMP
            self._push(HostInstruction(
                hop, dtype, dst=("i", reg), srcs=srcs, acct="other",
                ruses=[s for s in srcs if s[0] != "imm"], rdefs=[("i", reg)]))
            return
        if op is IROp.CVT:
            src = self.scalar_loc(inst.srcs[0])
            if dtype is DType.i32:
                reg = self.new_ireg()
                self.loc_of[inst.dst] = ("i", reg)
                dst_loc, rdefs = ("i", reg), [("i", reg)]
            else:
                dst_loc, lane = self._dst_fp(inst)
                rdefs = [(*dst_loc, lane)]
            self._push(HostInstruction(
                HostOp.SCVT, dtype, dst=dst_loc, dest_lane=rdefs[0][2] if dtype is not DType.i32 else None,
                srcs=[src], acct="unvec_fp" if inst.fp else "other", covers=1 if inst.fp else 0,
                ruses=[src] if src[0] != "imm" else [], rdefs=rdefs))
            return
        if op is IROp.MOV:
            src = self.scalar_loc(inst.srcs[0])
            if is_int:
                reg = self.new_ireg()
                self.loc_of[inst.dst] = ("i", reg)
                self._push(HostInstruction(
                    HostOp.IMOV, dtype, dst=("i", reg), srcs=[src], acct="other",
                    ruses=[src] if src[0] != "imm" else [], rdefs=[("i", reg)]))
            else:
                dst, lane = self._dst_fp(inst)
                self._push(HostInstruction(
                    HostOp.SMOV, dtype, dst=dst, dest_lane=lane, srcs=[src],
                    acct="unvec_fp" if inst.fp else "other", covers=1 if inst.fp else 0,
                    ruses=[src] if src[0] != "imm" else [], rdefs=[(*dst, lane)]))
            return
        if op in ARITH_IROPS:
            srcs = [self.scalar_loc(s) for s in inst.srcs]
            ruses = [s for s in srcs if s[0] != "imm"]
            if is_int:
                reg = self.new_ireg()
                self.loc_of[inst.dst] = ("i", reg)
                self._push(HostInstruction(
                    _INT_OP[op], dtype, dst=("i", reg), srcs=srcs, acct="other",
                    ruses=ruses, rdefs=[("i", reg)]))
            else:
                dst, lane = self._dst_fp(inst)
                self._push(HostInstruction(
                    _SCALAR_FP[op], dtype, dst=dst, dest_lane=lane, srcs=srcs,
                    acct="scalar_fp", covers=1, ruses=ruses, rdefs=[(*dst, lane)]))
            return
        raise TranslationError(f"cannot lower {inst.render()}")

    def _emit_gather(self, inst: IRInst) -> None:
        """Collect N scalar values into one register.

        With selective writing: two-source PACK instructions write two chosen
        elements each, ceil(N/2) of them. Without: a chain of N-1 conventional
        shuffle/blend ops, each rewriting the whole register.
        """
        sources = [self.loc(s) for s in inst.srcs]
        reg = self.new_vreg()
        self.pseudo_reg[inst.iid] = reg
        self.loc_of[inst.dst] = ("v", reg, 0)
        n = len(sources)

        materialized: list[tuple] = []
        for src in sources:
            if src[0] == "imm":
                tmp = self.new_vreg()
                self._push(HostInstruction(
                    HostOp.SMOV, inst.dtype, dst=("v", tmp), dest_lane=0, srcs=[src],
                    acct="perm", rdefs=[("v", tmp, 0)]))
                materialized.append(("v", tmp, 0))
            else:
                materialized.append(src)

        if self.cfg.swr_enabled:
            for i in range(0, n - 1, 2):
                a, b = materialized[i], materialized[i + 1]
                self._push(HostInstruction(
                    HostOp.PACK, inst.dtype, dst=("v", reg),
                    srcs=[("v", a[1], None), ("v", b[1], None)],
                    pack_imm=(a[2], i, b[2], i + 1), acct="perm",
                    ruses=[a, b], rdefs=[("v", reg, i), ("v", reg, i + 1)]))
            if n % 2:
                last = materialized[-1]
                self._push(HostInstruction(
                    HostOp.SMOV, inst.dtype, dst=("v", reg), dest_lane=n - 1,
                    srcs=[last], acct="perm", ruses=[last], rdefs=[("v", reg, n - 1)]))
            return

        lanes = self.cfg.physical_lanes(inst.dtype)
        first = materialized[0]
        acc_reg = first[1]
        start = 1
        if first[2] != 0:
            # The first value sits in a non-zero element; one extra shuffle
            # places it before the chain starts.
            self._push(HostInstruction(
                HostOp.SHUF, inst.dtype, dst=("v", reg),
                srcs=[("v", acc_reg, None), ("v", acc_reg, None)], shuf=(first[2], 0),
                acct="perm", ruses=[first],
                rdefs=[("v", reg, l) for l in range(lanes)]))
            acc_reg = reg
        for i in range(start, n):
            src = materialized[i]
            self._push(HostInstruction(
                HostOp.SHUF, inst.dtype, dst=("v", reg),
                srcs=[("v", acc_reg, None), ("v", src[1], None)], shuf=(src[2], i),
                acct="perm",
                ruses=[("v", acc_reg, l) for l in range(lanes)] + [src],
                rdefs=[("v", reg, l) for l in range(lanes)]))
            acc_reg = reg

    # -- pack units -----------------------------------------------------------

    def emit_pack(self, pack: Pack, ddg: DepGraph) -> None:
        members = [self.insts[m] for m in pack.members]
        k = pack.mask
        w = pack.dtype.width_bytes
        if pack.is_mem:
            root0, off0 = ddg.addr_of[pack.members[0]]
            for lane, m in enumerate(pack.members):
                if ddg.addr_of[m] != (root0, off0 + lane * w):
                    raise TranslationError(f"{pack.describe()}: lane order does not match "
                                           "memory adjacency order")
        reg = self.new_vreg()
        self.pack_reg[pack.pid] = reg
        for lane, m in enumerate(members):
            if m.dst is not None:
                self.loc_of[m.dst] = ("v", reg, lane)

        if pack.op is IROp.LD:
            first = members[0]
            base = self.loc(first.addr[0])
            idx = self._push(HostInstruction(
                HostOp.VLD, pack.dtype, dst=("v", reg), addr=(base, first.addr[1]),
                mask_k=k, acct="vec", covers=k,
                ruses=[base] if base[0] != "imm" else [],
                rdefs=[("v", reg, l) for l in range(k)]))
            for m in pack.members:
                self.mem_code_idx[m] = idx
            return

        operand_locs = [self._plan_loc(plan) for plan in pack.operand_plans]
        if pack.op is IROp.ST:
            first = members[0]
            base = self.loc(first.addr[0])
            src = operand_locs[0]
            idx = self._push(HostInstruction(
                HostOp.VST, pack.dtype, srcs=[("v", src, None)], addr=(base, first.addr[1]),
                mask_k=k, acct="vec", covers=k,
                ruses=([base] if base[0] != "imm" else []) + [("v", src, l) for l in range(k)]))
            for m in pack.members:
                self.mem_code_idx[m] = idx
            return

        srcs = [("v", r, None) for r in operand_locs]
        self._push(HostInstruction(
            _VECTOR_FP[pack.op], pack.dtype, dst=("v", reg), srcs=srcs, mask_k=k,
            acct="vec", covers=k,
            ruses=[("v", r, l) for r in operand_locs for l in range(k)],
            rdefs=[("v", reg, l) for l in range(k)]))

    def _plan_loc(self, plan) -> int:
        kind = plan[0]
        if kind == "forward":
            return self.pack_reg[plan[1].pid]
        if kind in ("splat", "gather"):
            return self.pseudo_reg[plan[1]]
        if kind == "swr":
            gid = plan[1]
            if gid not in self.swr_group_reg:
                self.swr_group_reg[gid] = self.new_vreg()
            return self.swr_group_reg[gid]
        raise TranslationError(f"unknown operand plan {plan!r}")
