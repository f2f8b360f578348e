"""Built-in kernel corpus: small, hand-shaped programs that exercise every
part of the pipeline (pack seeding, variable-length packing, gathers,
selective writing, asserts, and speculation)."""

from __future__ import annotations

import random

from .guest import GuestProgram, parse_program


def _saxpy(dtype: str, trips: int) -> str:
    w = 8 if dtype == "f64" else 4
    x_base, y_base = 0, 1024
    lines = [f"arena {y_base + trips * w + 64}"]
    lines += ["reg r1 0", f"reg r2 {y_base}", "reg f0 2.5"]
    for i in range(trips):
        lines.append(f"init {x_base + i * w} {dtype} {i + 1}.25")
        lines.append(f"init {y_base + i * w} {dtype} {10 * (i + 1)}.5")
    lines += [
        "  MOV.i32 r3, 0",
        f"  MOV.i32 r4, {trips}",
        "loop:",
        f"  LD.{dtype} f1, [r1+0]",
        f"  MUL.{dtype} f2, f1, f0",
        f"  LD.{dtype} f3, [r2+0]",
        f"  ADD.{dtype} f4, f2, f3",
        f"  ST.{dtype} [r2+0], f4",
        f"  ADD.i32 r1, r1, {w}",
        f"  ADD.i32 r2, r2, {w}",
        "  ADD.i32 r3, r3, 1",
        "  CMP.i32 r3, r4",
        "  BR lt, loop",
        "  HALT",
    ]
    return "\n".join(lines)


_FIG7 = """
arena 16
reg f1 1.0
reg f2 2.0
reg f3 3.0
reg f4 4.0
reg f5 5.0
reg f6 6.0
reg f7 0.5
reg f8 0.25
reg f9 0.125
reg f10 8.0
reg f11 16.0
reg f12 32.0
  ADD.f32 f13, f1, f7
  ADD.f32 f14, f2, f8
  ADD.f32 f15, f3, f9
  ADD.f32 f16, f4, f10
  ADD.f32 f17, f5, f11
  ADD.f32 f18, f6, f12
  HALT
"""

_INTERLEAVE2 = """
arena 1024
reg r1 0
reg r2 512
init 0 f32 1.0
init 4 f32 2.0
init 8 f32 3.0
init 12 f32 4.0
init 16 f32 5.0
init 20 f32 6.0
init 24 f32 7.0
init 28 f32 8.0
  MOV.i32 r3, 0
  MOV.i32 r4, 4
loop:
  LD.f32 f1, [r1+0]
  LD.f32 f2, [r1+4]
  ADD.f32 f3, f1, f2
  ST.f32 [r2+0], f3
  ADD.i32 r1, r1, 8
  ADD.i32 r2, r2, 4
  ADD.i32 r3, r3, 1
  CMP.i32 r3, r4
  BR lt, loop
  HALT
"""

_MIXED_PRODUCERS = """
arena 512
reg r1 0
reg r2 256
reg f1 1.5
reg f2 2.5
reg f3 3.5
reg f4 4.5
reg f5 5.5
reg f6 6.5
reg f7 7.5
reg f8 0.5
init 0 f32 1.0
init 4 f32 2.0
init 8 f32 3.0
init 12 f32 4.0
  ADD.f32 f9, f1, f2
  SUB.f32 f10, f3, f4
  MUL.f32 f11, f5, f6
  DIV.f32 f12, f7, f8
  LD.f32 f13, [r1+0]
  MUL.f32 f14, f9, f13
  LD.f32 f15, [r1+4]
  MUL.f32 f16, f10, f15
  LD.f32 f17, [r1+8]
  MUL.f32 f18, f11, f17
  LD.f32 f19, [r1+12]
  MUL.f32 f20, f12, f19
  ST.f32 [r2+0], f14
  ST.f32 [r2+4], f16
  ST.f32 [r2+8], f18
  ST.f32 [r2+12], f20
  HALT
"""


def _scatter(n: int, dtype: str) -> str:
    """A chain of dependent adds feeds a packed multiply: the chain values are
    multi-consumer, so collecting them always needs real gather instructions."""
    w = 8 if dtype == "f64" else 4
    lines = [f"arena {2048}"]
    lines += [f"reg f{i} {i}.5" for i in range(1, min(n, 15) + 1)]
    lines += ["reg f0 1.25", "reg r1 0", "reg r2 1024"]
    for i in range(n):
        lines.append(f"init {i * w} {dtype} {i + 2}.0")
    prev = "f0"
    for i in range(n):
        c = f"f{(i % 15) + 1}"
        lines.append(f"  ADD.{dtype} f17, {prev}, {c}")
        lines.append(f"  LD.{dtype} f18, [r1+{i * w}]")
        lines.append(f"  MUL.{dtype} f19, f17, f18")
        lines.append(f"  ST.{dtype} [r2+{i * w}], f19")
        prev = "f17"
    lines.append("  HALT")
    return "\n".join(lines)


_BIASED_BRANCH = """
arena 64
reg f1 1.0
reg f2 2.0
  MOV.i32 r3, 0
  MOV.i32 r4, 320
  MOV.i32 r5, 0
  MOV.i32 r6, 15
loop:
  CMP.i32 r5, r6
  BR eq, rare
  ADD.f32 f3, f3, f1
  ADD.i32 r5, r5, 1
  JMP join
rare:
  ADD.f32 f3, f3, f2
  MOV.i32 r5, 0
join:
  ADD.i32 r3, r3, 1
  CMP.i32 r3, r4
  BR lt, loop
  HALT
"""

_ALIAS_LOOP = """
arena 256
reg r1 0
reg r2 4
reg f0 1.0
init 0 f32 1.0
  MOV.i32 r3, 0
  MOV.i32 r4, 8
loop:
  LD.f32 f1, [r1+0]
  ADD.f32 f2, f1, f0
  ST.f32 [r2+0], f2
  ADD.i32 r1, r1, 4
  ADD.i32 r2, r2, 4
  ADD.i32 r3, r3, 1
  CMP.i32 r3, r4
  BR lt, loop
  HALT
"""

_SPREAD4 = """
arena 512
reg r1 0
reg r2 256
reg f8 1.5
reg f9 2.5
init 0 f32 4.0
init 4 f32 9.0
init 8 f32 16.0
init 12 f32 25.0
  LD.f32 f1, [r1+0]
  LD.f32 f2, [r1+4]
  LD.f32 f3, [r1+8]
  LD.f32 f4, [r1+12]
  ADD.f32 f5, f1, f8
  SUB.f32 f6, f2, f9
  MUL.f32 f7, f3, f8
  DIV.f32 f10, f4, f9
  ST.f32 [r2+0], f5
  ST.f32 [r2+4], f6
  ST.f32 [r2+8], f7
  ST.f32 [r2+12], f10
  HALT
"""

_ALTMASK = """
arena 16
reg f1 1.0
reg f2 2.0
reg f3 3.0
reg f4 4.0
reg f5 5.0
reg f6 6.0
reg f7 7.0
reg f8 8.0
reg f9 0.5
reg f10 0.25
  ADD.f32 f11, f1, f2
  ADD.f32 f12, f3, f4
  ADD.f32 f13, f5, f6
  ADD.f32 f14, f7, f8
  SUB.f32 f15, f1, f9
  SUB.f32 f16, f2, f10
  MUL.f32 f17, f3, f9
  MUL.f32 f18, f4, f10
  MUL.f32 f19, f5, f9
  MUL.f32 f20, f6, f10
  DIV.f32 f21, f7, f9
  DIV.f32 f22, f8, f10
  HALT
"""

_CVT_MIX = """
arena 64
reg f1 1.5
reg f2 2.5
reg f3 3.5
reg f4 4.5
init 0 f32 1.0
init 4 f32 2.0
reg r1 0
  ADD.f32 f5, f1, f2
  ADD.f32 f6, f3, f4
  CVT.f64 f7, f5
  CVT.f64 f8, f6
  ADD.f64 f9, f7, f8
  LD.f32 f10, [r1+0]
  LD.f32 f11, [r1+4]
  MOV.f32 f12, f10
  ADD.f32 f13, f11, f12
  HALT
"""


def random_straightline(seed: int, n_ops: int = 32) -> str:
    """Deterministic random FP kernel for differential oracle testing."""
    rng = random.Random(seed)
    dtype = rng.choice(["f32", "f64"])
    w = 8 if dtype == "f64" else 4
    arena = 512
    lines = [f"arena {arena}", "reg r1 0"]
    pool = list(range(1, 9))
    for i in pool:
        lines.append(f"reg f{i} {rng.randint(1, 9)}.{rng.randint(0, 99)}")
    n_slots = arena // (2 * w)
    for i in range(8):
        lines.append(f"init {i * w} {dtype} {rng.randint(1, 9)}.{rng.randint(0, 99)}")
    regs = list(pool)
    for _ in range(n_ops):
        kind = rng.random()
        if kind < 0.6:
            op = rng.choice(["ADD", "SUB", "MUL"])
            dst = rng.randint(1, 15)
            a, b = rng.choice(regs), rng.choice(regs)
            lines.append(f"  {op}.{dtype} f{dst}, f{a}, f{b}")
            if dst not in regs:
                regs.append(dst)
        elif kind < 0.8:
            dst = rng.randint(1, 15)
            off = rng.randrange(0, n_slots) * w
            lines.append(f"  LD.{dtype} f{dst}, [r1+{off}]")
            if dst not in regs:
                regs.append(dst)
        else:
            src = rng.choice(regs)
            off = rng.randrange(0, n_slots) * w
            lines.append(f"  ST.{dtype} [r1+{off}], f{src}")
    lines.append("  HALT")
    return "\n".join(lines)


def corpus(seed: int = 0) -> dict[str, GuestProgram]:
    """The built-in kernel set, parsed and validated."""
    sources: dict[str, str] = {
        "fig7": _FIG7,
        "interleave2": _INTERLEAVE2,
        "mixed-producers": _MIXED_PRODUCERS,
        "biased-branch": _BIASED_BRANCH,
        "alias-loop": _ALIAS_LOOP,
        "spread4": _SPREAD4,
        "altmask": _ALTMASK,
        "cvt-mix": _CVT_MIX,
        "rand-sl": random_straightline(seed),
    }
    for trips in (2, 4, 16, 64):
        sources[f"saxpy-f32-t{trips}"] = _saxpy("f32", trips)
        sources[f"saxpy-f64-t{trips}"] = _saxpy("f64", trips)
    for n, dtype in ((2, "f64"), (4, "f32"), (8, "f32"), (16, "f32")):
        sources[f"scatter{n}"] = _scatter(n, dtype)
    return {name: parse_program(src, name=name) for name, src in sources.items()}
