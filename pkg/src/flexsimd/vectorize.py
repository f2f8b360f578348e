"""Speculative dynamic vectorization: store-seeded pack formation, variable
length packing, and selective-writing rewrites.

Packing walks bottom-up: consecutive stores seed packs, then producer chains
are followed, then remaining consecutive loads, then leftover same-operation
arithmetic groups. A pack needs members that perform the same operation, are
mutually independent, sit in no other pack, and (for memory ops) access
consecutive addresses. With variable-length packing enabled the required pack
size is halved round by round, down to two, and the final lane count travels
in the instruction encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .guest import DType
from .ir import ARITH_IROPS, Const, DepGraph, IRInst, IROp, Superblock


@dataclass
class VectorizationConfig:
    physical_bits: int = 128
    vlv_enabled: bool = False
    swr_enabled: bool = False

    def __post_init__(self):
        if self.physical_bits < 128 or self.physical_bits & (self.physical_bits - 1):
            raise ValueError("physical vector length must be a power of two >= 128")

    def physical_lanes(self, dtype: DType) -> int:
        return self.physical_bits // dtype.width_bits


@dataclass
class SeedMarks:
    first_load: set[int]
    first_store: set[int]
    candidate: set[int]


@dataclass
class Pack:
    pid: int
    members: list[int]  # instruction ids in lane order
    op: IROp
    dtype: DType
    mask: int  # enabled lane count carried into the encoding
    # Operand plans, filled by emit_pack_unpack:
    #   ('forward', Pack)      lanes come straight from another pack's register
    #   ('splat', iid)         all lanes read one value, broadcast by a pseudo op
    #   ('gather', iid)        lanes collected by a gather pseudo op
    #   ('swr', gid, [iids])   producers selective-write a shared register
    operand_plans: list = field(default_factory=list)

    @property
    def logical_lanes(self) -> int:
        return len(self.members)

    @property
    def is_mem(self) -> bool:
        return self.op in (IROp.LD, IROp.ST)

    def describe(self) -> str:
        return (f"pack p{self.pid} {self.op.value}.{self.dtype.value} "
                f"k={self.mask} members={self.members}")


CANDIDATE_OPS = ARITH_IROPS | {IROp.LD, IROp.ST}


def mark_candidates(sb: Superblock, ddg: DepGraph) -> SeedMarks:
    """Vectorization candidates plus First Load / First Store seeds.

    A memory access is "first" when no same-kind access of the same dtype
    touches the adjacently previous address. Conversions and moves are never
    candidates.
    """
    candidate = {i.iid for i in sb.ir if i.fp and i.op in CANDIDATE_OPS}
    addr_sets: dict[tuple, set] = {}
    for inst in sb.ir:
        if inst.is_mem:
            root, off = ddg.addr_of[inst.iid]
            addr_sets.setdefault((inst.is_store, inst.dtype), set()).add((root, off))

    first_load: set[int] = set()
    first_store: set[int] = set()
    for inst in sb.ir:
        if not inst.is_mem or inst.iid not in candidate:
            continue
        root, off = ddg.addr_of[inst.iid]
        peers = addr_sets[(inst.is_store, inst.dtype)]
        if (root, off - inst.dtype.width_bytes) not in peers:
            (first_store if inst.is_store else first_load).add(inst.iid)
    return SeedMarks(first_load=first_load, first_store=first_store, candidate=candidate)


class Vectorizer:
    """Stateful pack builder over one superblock's dependence graph."""

    def __init__(self, sb: Superblock, ddg: DepGraph, cfg: VectorizationConfig,
                 allow_speculation: bool = True):
        self.sb = sb
        self.ddg = ddg
        self.cfg = cfg
        self.allow_speculation = allow_speculation
        self.insts: dict[int, IRInst] = {i.iid: i for i in sb.ir}
        self.def_of: dict[int, IRInst] = {i.dst: i for i in sb.ir if i.dst is not None}
        self.users: dict[int, list[IRInst]] = {}
        for inst in sb.ir:
            for s in inst.srcs:
                if isinstance(s, int):
                    self.users.setdefault(s, []).append(inst)
        self.marks = mark_candidates(sb, ddg)
        self.first_store = set(self.marks.first_store)
        self.first_load = set(self.marks.first_load)
        self.packs: list[Pack] = []
        self.in_pack: dict[int, tuple[Pack, int]] = {}
        self.leave_scalar: set[int] = set()
        self._addr_index: dict[tuple, dict[int, list[int]]] = {}
        for inst in sb.ir:
            if inst.is_mem and inst.iid in self.marks.candidate:
                root, off = ddg.addr_of[inst.iid]
                key = (inst.is_store, inst.dtype, root)
                self._addr_index.setdefault(key, {}).setdefault(off, []).append(inst.iid)
        self._build_reachability()

    # -- legality -----------------------------------------------------------

    def _build_reachability(self) -> None:
        # Hard edges (true deps, must-alias order, and may-alias order when
        # speculation is off) all point forward in instruction order, so one
        # reverse sweep builds the transitive closure as bitmasks.
        n = max(self.insts) + 1 if self.insts else 0
        succs: dict[int, list[int]] = {i: [] for i in self.insts}
        for a, b in self.ddg.true_edges:
            succs[a].append(b)
        for a, b, kind in self.ddg.mem_edges:
            if kind == "must" or not self.allow_speculation:
                succs[a].append(b)
        reach = {i: 1 << i for i in self.insts}
        for iid in sorted(self.insts, reverse=True):
            acc = reach[iid]
            for s in succs[iid]:
                acc |= reach[s]
            reach[iid] = acc
        self._reach = reach
        self._hard_succs = succs

    def independent(self, a: int, b: int) -> bool:
        return not (self._reach[a] >> b) & 1 and not (self._reach[b] >> a) & 1

    def _contraction_acyclic(self, new_members: list[int]) -> bool:
        """Would merging `new_members` (on top of existing packs) keep the
        hard-edge graph acyclic? Catches cross-pack cycles that pairwise
        independence misses."""
        unit_of: dict[int, tuple] = {}
        for p in self.packs:
            for m in p.members:
                unit_of[m] = ("p", p.pid)
        for m in new_members:
            unit_of[m] = ("p", -1)
        adj: dict[tuple, set[tuple]] = {}
        for a, succ_list in self._hard_succs.items():
            ua = unit_of.get(a, ("s", a))
            for b in succ_list:
                ub = unit_of.get(b, ("s", b))
                if ua != ub:
                    adj.setdefault(ua, set()).add(ub)
        return _acyclic(adj)

    # -- pack formation -----------------------------------------------------

    def run(self, vlv: bool) -> list[Pack]:
        dtypes = {i.dtype for i in self.sb.ir if i.iid in self.marks.candidate}
        if not dtypes:
            return self.packs
        max_lanes = max(self.cfg.physical_lanes(dt) for dt in dtypes)
        shift = 0
        while (max_lanes >> shift) >= 2:
            self._round(shift)
            if not vlv:
                break
            shift += 1
        return self.packs

    def _k(self, dtype: DType, shift: int) -> int:
        return self.cfg.physical_lanes(dtype) >> shift

    def _round(self, shift: int) -> None:
        self._mem_phase(shift, stores=True)
        self._mem_phase(shift, stores=False)
        self._arith_phase(shift)

    def _mem_phase(self, shift: int, stores: bool) -> None:
        seeds = self.first_store if stores else self.first_load
        work = sorted(s for s in seeds if s not in self.in_pack and s not in self.leave_scalar)
        while work:
            seed = work.pop(0)
            if seed in self.in_pack or seed in self.leave_scalar:
                continue
            inst = self.insts[seed]
            k = self._k(inst.dtype, shift)
            if k < 2:
                continue
            members = self._grow_mem_chain(seed, k)
            if members is None:
                continue
            pack = self._commit(members)
            self.follow_chains(pack)
            nxt = self._adjacent_after(members[-1])
            if nxt is not None and nxt not in self.in_pack:
                seeds.add(nxt)
                if nxt not in work:
                    work.append(nxt)
                    work.sort()

    def _grow_mem_chain(self, seed: int, k: int) -> Optional[list[int]]:
        inst = self.insts[seed]
        w = inst.dtype.width_bytes
        root, off = self.ddg.addr_of[seed]
        members = [seed]
        while len(members) < k:
            nxt = self._mem_at(inst.is_store, inst.dtype, root, off + w * len(members))
            if nxt is None:
                return None
            members.append(nxt)
        return self._legal(members)

    def _mem_at(self, is_store: bool, dtype: DType, root, off: int) -> Optional[int]:
        for iid in self._addr_index.get((is_store, dtype, root), {}).get(off, []):
            if iid not in self.in_pack and iid not in self.leave_scalar:
                return iid
        return None

    def _adjacent_after(self, last: int) -> Optional[int]:
        inst = self.insts[last]
        root, off = self.ddg.addr_of[last]
        return self._mem_at(inst.is_store, inst.dtype, root, off + inst.dtype.width_bytes)

    def _arith_phase(self, shift: int) -> None:
        keys: list[tuple] = []
        for inst in self.sb.ir:
            if inst.iid in self.marks.candidate and inst.op in ARITH_IROPS:
                key = (inst.op, inst.dtype)
                if key not in keys:
                    keys.append(key)
        for op, dtype in keys:
            k = self._k(dtype, shift)
            if k < 2:
                continue
            while True:
                members = self._first_fit_group(op, dtype, k)
                if members is None:
                    break
                pack = self._commit(members)
                self.follow_chains(pack)

    def _first_fit_group(self, op: IROp, dtype: DType, k: int) -> Optional[list[int]]:
        members: list[int] = []
        for inst in self.sb.ir:
            if (inst.op is not op or inst.dtype is not dtype
                    or inst.iid not in self.marks.candidate or inst.iid in self.in_pack):
                continue
            if all(self.independent(inst.iid, m) for m in members):
                members.append(inst.iid)
                if len(members) == k:
                    break
        if len(members) < k:
            return None
        return self._legal(members)

    def _legal(self, members: list[int]) -> Optional[list[int]]:
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                if not self.independent(a, b):
                    return None
        if not self._contraction_acyclic(members):
            return None
        return members

    def _commit(self, members: list[int]) -> Pack:
        inst = self.insts[members[0]]
        pack = Pack(pid=len(self.packs), members=list(members), op=inst.op,
                    dtype=inst.dtype, mask=len(members))
        self.packs.append(pack)
        for lane, m in enumerate(members):
            self.in_pack[m] = (pack, lane)
        return pack

    # -- chain traversal ----------------------------------------------------

    def follow_chains(self, pack: Pack) -> list[Pack]:
        """Pack producers (and consumers, for load-seeded packs) that satisfy
        the pack conditions in member order; failed producer loads are left in
        scalar form so a gather collects their results later."""
        created: list[Pack] = []
        members = [self.insts[m] for m in pack.members]

        if pack.op is IROp.ST or pack.op in ARITH_IROPS:
            for j in range(len(members[0].srcs)):
                defs = []
                for m in members:
                    s = m.srcs[j]
                    d = self.def_of.get(s) if isinstance(s, int) else None
                    defs.append(d)
                if any(d is None for d in defs):
                    continue
                iids = [d.iid for d in defs]
                if len(set(iids)) != len(iids):
                    continue  # shared producer: a broadcast, not a chain
                sub = self._try_chain_group(iids)
                if sub is not None:
                    created.append(sub)
                    created.extend(self.follow_chains(sub))

        if pack.op is IROp.LD or pack.op in ARITH_IROPS:
            cons = self._uniform_consumers(members)
            if cons is not None:
                sub = self._try_chain_group(cons)
                if sub is not None:
                    created.append(sub)
                    created.extend(self.follow_chains(sub))
        return created

    def _uniform_consumers(self, members: list[IRInst]) -> Optional[list[int]]:
        chosen: list[IRInst] = []
        position: Optional[int] = None
        for m in members:
            options = [u for u in self.users.get(m.dst, [])
                       if u.iid in self.marks.candidate and u.iid not in self.in_pack]
            if not options:
                return None
            user = options[0]
            pos = next(i for i, s in enumerate(user.srcs) if s == m.dst)
            if position is None:
                position = pos
            if pos != position:
                return None
            chosen.append(user)
        iids = [c.iid for c in chosen]
        if len(set(iids)) != len(iids):
            return None
        first = chosen[0]
        if any(c.op is not first.op or c.dtype is not first.dtype for c in chosen):
            return None
        return iids

    def _try_chain_group(self, iids: list[int]) -> Optional[Pack]:
        insts = [self.insts[i] for i in iids]
        first = insts[0]
        if any(i.iid in self.in_pack for i in insts):
            return None
        if any(i.op is not first.op or i.dtype is not first.dtype for i in insts):
            if all(i.op is IROp.LD for i in insts):
                self.leave_scalar.update(iids)
            return None
        if any(i.iid not in self.marks.candidate for i in insts):
            return None
        if first.op in (IROp.LD, IROp.ST):
            w = first.dtype.width_bytes
            root0, off0 = self.ddg.addr_of[iids[0]]
            for lane, iid in enumerate(iids):
                if self.ddg.addr_of[iid] != (root0, off0 + lane * w):
                    # Non-consecutive accesses stay scalar; a gather/spread
                    # pseudo op will move their values instead.
                    if first.op is IROp.LD:
                        self.leave_scalar.update(iids)
                    return None
        if self._legal(iids) is None:
            return None
        return self._commit(iids)


def vectorize_baseline(sb: Superblock, ddg: DepGraph, cfg: VectorizationConfig,
                       allow_speculation: bool = True) -> list[Pack]:
    """Fixed-length packing: only full-width packs are formed."""
    return Vectorizer(sb, ddg, cfg, allow_speculation).run(vlv=False)


def vectorize_vlv(sb: Superblock, ddg: DepGraph, cfg: VectorizationConfig,
                  allow_speculation: bool = True) -> list[Pack]:
    """Variable-length packing: rounds at full width, half width, ... down to
    two lanes; later rounds only see instructions still unpacked."""
    return Vectorizer(sb, ddg, cfg, allow_speculation).run(vlv=True)


# --------------------------------------------------------------------------
# Gather / spread pseudo ops and the selective-writing rewrite
# --------------------------------------------------------------------------


def emit_pack_unpack(sb: Superblock, packs: list[Pack], ddg: DepGraph) -> None:
    """Insert gather pseudo-ops for pack operands that no pack produces, and
    extract pseudo-ops for scalar consumers of packed values."""
    insts = {i.iid: i for i in sb.ir}
    def_of = {i.dst: i for i in sb.ir if i.dst is not None}
    in_pack: dict[int, tuple[Pack, int]] = {}
    for p in packs:
        for lane, m in enumerate(p.members):
            in_pack[m] = (p, lane)
    members_of = {tuple(p.members): p for p in packs}
    next_iid = (max(insts) + 1) if insts else 0

    for pack in packs:
        plans = []
        member_insts = [insts[m] for m in pack.members]
        n_operands = 1 if pack.op is IROp.ST else (len(member_insts[0].srcs) if pack.op in ARITH_IROPS else 0)
        for j in range(n_operands):
            lane_srcs = [m.srcs[j] for m in member_insts]
            if all(s == lane_srcs[0] for s in lane_srcs):
                splat = IRInst(next_iid, IROp.SPLAT, pack.dtype,
                               dst=sb.new_value("f", ("def", next_iid), pack.dtype),
                               srcs=[lane_srcs[0]])
                next_iid += 1
                sb.ir.append(splat)
                plans.append(("splat", splat.iid))
                continue
            defs = [def_of.get(s).iid if isinstance(s, int) and s in def_of else None
                    for s in lane_srcs]
            if None not in defs and tuple(defs) in members_of:
                plans.append(("forward", members_of[tuple(defs)]))
                continue
            gather = IRInst(next_iid, IROp.GATHER, pack.dtype,
                            dst=sb.new_value("f", ("def", next_iid), pack.dtype),
                            srcs=list(lane_srcs))
            next_iid += 1
            sb.ir.append(gather)
            plans.append(("gather", gather.iid))
        pack.operand_plans = plans

    # Scalar consumers of packed values read through an element extract.
    extracts: dict[int, int] = {}  # member dst vid -> extract dst vid
    new_extracts: list[IRInst] = []
    for inst in sb.ir:
        if inst.iid in in_pack or inst.op in (IROp.GATHER, IROp.SPLAT):
            continue
        for idx, s in enumerate(inst.srcs):
            if not isinstance(s, int) or s not in def_of:
                continue
            producer = def_of[s]
            if producer.iid not in in_pack:
                continue
            if s not in extracts:
                ext = IRInst(next_iid, IROp.EXTRACT, producer.dtype,
                             dst=sb.new_value("f", ("def", next_iid), producer.dtype),
                             srcs=[s])
                next_iid += 1
                new_extracts.append(ext)
                extracts[s] = ext.dst
            inst.srcs[idx] = extracts[s]
    sb.ir.extend(new_extracts)


def apply_swr(sb: Superblock, packs: list[Pack], ddg: DepGraph, cfg: VectorizationConfig) -> None:
    """Rewrite gathers whose inputs are single-consumer scalar instructions:
    each producer selective-writes its lane of a shared vector register and
    the gather disappears. Remaining gathers lower to two-source PACK chains.
    """
    if not cfg.swr_enabled:
        return
    in_pack = {m for p in packs for m in p.members}
    def_of = {i.dst: i for i in sb.ir if i.dst is not None}

    # Count real value uses: reads by pack members happen through operand
    # plans, so member source references do not count.
    use_count: dict[int, int] = {}
    for inst in sb.ir:
        if inst.iid in in_pack:
            continue
        for s in inst.srcs:
            if isinstance(s, int):
                use_count[s] = use_count.get(s, 0) + 1

    rewritable_ops = ARITH_IROPS | {IROp.LD, IROp.MOV}
    gather_to_pack = {}
    for pack in packs:
        for j, plan in enumerate(pack.operand_plans):
            if plan[0] == "gather":
                gather_to_pack[plan[1]] = (pack, j)

    removed: set[int] = set()
    for inst in sb.ir:
        if inst.op is not IROp.GATHER or inst.iid not in gather_to_pack:
            continue
        srcs = inst.srcs
        if not all(isinstance(s, int) for s in srcs) or len(set(srcs)) != len(srcs):
            continue
        producers = [def_of.get(s) for s in srcs]
        if any(p is None for p in producers):
            continue
        if any(p.iid in in_pack or p.op not in rewritable_ops or not p.fp for p in producers):
            continue
        if any(use_count.get(p.dst, 0) != 1 for p in producers):
            continue
        gid = inst.iid
        for lane, p in enumerate(producers):
            p.swr_slot = (gid, lane)
        pack, j = gather_to_pack[gid]
        pack.operand_plans[j] = ("swr", gid, [p.iid for p in producers])
        removed.add(inst.iid)
    sb.ir = [i for i in sb.ir if i.iid not in removed]


def verify_pack_legality(sb: Superblock, ddg: DepGraph, packs: list[Pack]) -> None:
    """Exhaustive re-check of the pack conditions; raises on any violation."""
    insts = {i.iid: i for i in sb.ir}
    seen: set[int] = set()
    succs: dict[int, list[int]] = {i: [] for i in insts}
    for a, b in ddg.true_edges:
        if a in succs:
            succs[a].append(b)
    for a, b, kind in ddg.mem_edges:
        if kind == "must" and a in succs:
            succs[a].append(b)
    reach: dict[int, int] = {}
    for iid in sorted(insts, reverse=True):
        acc = 1 << iid
        for s in succs.get(iid, []):
            acc |= reach.get(s, 1 << s)
        reach[iid] = acc

    for pack in packs:
        if pack.logical_lanes < 2:
            raise AssertionError(f"{pack.describe()}: fewer than 2 members")
        first = insts[pack.members[0]]
        for m in pack.members:
            if m in seen:
                raise AssertionError(f"instruction {m} is in two packs")
            seen.add(m)
            inst = insts[m]
            if inst.op is not first.op or inst.dtype is not first.dtype:
                raise AssertionError(f"{pack.describe()}: mixed operations")
        for i, a in enumerate(pack.members):
            for b in pack.members[i + 1:]:
                if (reach[a] >> b) & 1 or (reach[b] >> a) & 1:
                    raise AssertionError(f"{pack.describe()}: members {a} and {b} are dependent")
        if pack.is_mem:
            w = pack.dtype.width_bytes
            root0, off0 = ddg.addr_of[pack.members[0]]
            for lane, m in enumerate(pack.members):
                if ddg.addr_of[m] != (root0, off0 + lane * w):
                    raise AssertionError(f"{pack.describe()}: members not consecutive in lane order")


def _acyclic(adj: dict) -> bool:
    WHITE, GRAY, BLACK = 0, 1, 2
    color: dict = {}

    def visit(node) -> bool:
        color[node] = GRAY
        for nxt in adj.get(node, ()):
            c = color.get(nxt, WHITE)
            if c == GRAY:
                return False
            if c == WHITE and not visit(nxt):
                return False
        color[node] = BLACK
        return True

    nodes = set(adj)
    for vs in adj.values():
        nodes.update(vs)
    for node in nodes:
        if color.get(node, WHITE) == WHITE:
            if not visit(node):
                return False
    return True
