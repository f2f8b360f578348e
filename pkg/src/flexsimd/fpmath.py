"""Shared scalar arithmetic and memory primitives.

Every execution engine (interpreter, host VM) goes through these helpers, so
floating-point rounding and integer wrapping behave identically everywhere.
f32 arithmetic is computed in double precision and rounded back to binary32;
this is exact for add/sub/mul (the double result of two binary32 operands is
representable), and documented behavior for div.
"""

from __future__ import annotations

import math
import struct


class SimFault(Exception):
    """Base class for runtime faults raised during simulated execution."""


class MemoryFault(SimFault):
    pass


class DivideByZeroFault(SimFault):
    pass


_I32_MASK = 0xFFFFFFFF


def wrap_i32(x: int) -> int:
    x &= _I32_MASK
    return x - (1 << 32) if x >= (1 << 31) else x


def round_f32(x: float) -> float:
    return struct.unpack("<f", struct.pack("<f", x))[0]


def fp_binop(op: str, width_bits: int, a: float, b: float) -> float:
    if op == "ADD":
        r = a + b
    elif op == "SUB":
        r = a - b
    elif op == "MUL":
        r = a * b
    elif op == "DIV":
        if b == 0.0:
            raise DivideByZeroFault(f"fp divide by zero: {a!r} / {b!r}")
        r = a / b
    else:
        raise ValueError(f"not an fp binop: {op}")
    return round_f32(r) if width_bits == 32 else r


def int_binop(op: str, a: int, b: int) -> int:
    if op == "ADD":
        r = a + b
    elif op == "SUB":
        r = a - b
    elif op == "MUL":
        r = a * b
    elif op == "DIV":
        if b == 0:
            raise DivideByZeroFault(f"integer divide by zero: {a} / {b}")
        r = int(a / b)  # truncate toward zero
    else:
        raise ValueError(f"not an int binop: {op}")
    return wrap_i32(r)


def compare(a, b) -> int:
    """Ternary comparison flag: -1 below, 0 equal, 1 above (ordered)."""
    if a < b:
        return -1
    if a == b:
        return 0
    return 1


def cond_holds(cond: str, flag: int) -> bool:
    if cond == "eq":
        return flag == 0
    if cond == "ne":
        return flag != 0
    if cond == "lt":
        return flag < 0
    if cond == "le":
        return flag <= 0
    if cond == "gt":
        return flag > 0
    if cond == "ge":
        return flag >= 0
    raise ValueError(f"unknown condition: {cond}")


_FMT = {("f", 32): "<f", ("f", 64): "<d", ("i", 32): "<i"}


def load_value(memory: bytearray, addr: int, kind: str, width_bits: int):
    nbytes = width_bits // 8
    if addr < 0 or addr + nbytes > len(memory):
        raise MemoryFault(f"load of {nbytes} bytes at {addr} outside arena of {len(memory)}")
    return struct.unpack_from(_FMT[(kind, width_bits)], memory, addr)[0]


def store_value(memory: bytearray, addr: int, kind: str, width_bits: int, value) -> None:
    nbytes = width_bits // 8
    if addr < 0 or addr + nbytes > len(memory):
        raise MemoryFault(f"store of {nbytes} bytes at {addr} outside arena of {len(memory)}")
    struct.pack_into(_FMT[(kind, width_bits)], memory, addr, value)


def float_bits(x: float) -> int:
    """Bit pattern of a double; used for bit-exact state comparison."""
    return struct.unpack("<Q", struct.pack("<d", x))[0]


def is_nan(x: float) -> bool:
    return isinstance(x, float) and math.isnan(x)
