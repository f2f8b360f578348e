"""Evaluation metrics over executed traces, plus report serialization.

Coverage counts each enabled lane of each executed vector instruction as one
covered scalar instruction. The dynamic FP stream splits four ways: vector,
scalar (packable ops left scalar), pack/unpack (permutation traffic), and
unvectorizable (conversions, FP moves).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .hostvm import TraceEvent


@dataclass
class Trace:
    kernel: str
    vlen: int
    mode: str
    events: list[TraceEvent] = field(default_factory=list)


@dataclass
class MetricsRecord:
    kernel: str
    vlen: int
    mode: str
    dyn_fp_total: int = 0
    dyn_vectorized: int = 0
    coverage: Optional[float] = None
    perm_per_vector: Optional[float] = None
    scalar_share: Optional[float] = None
    vector_share: Optional[float] = None
    packunpack_share: Optional[float] = None
    unvec_share: Optional[float] = None
    vlr_run_avg: Optional[float] = None
    cycles_scalar: Optional[int] = None
    cycles_vectorized: Optional[int] = None
    speedup: Optional[float] = None


def _fp_stream_counts(events: list[TraceEvent]) -> dict[str, int]:
    counts = {"vec": 0, "scalar_fp": 0, "perm": 0, "unvec_fp": 0}
    for ev in events:
        if ev.acct in counts:
            counts[ev.acct] += 1
    return counts


def compute_coverage(trace_scalar: Optional[Trace], trace_vectorized: Trace) -> Optional[float]:
    """Fraction of the dynamic scalar FP stream absorbed into vector lanes."""
    if trace_scalar is not None and trace_scalar.kernel != trace_vectorized.kernel:
        raise ValueError(
            f"traces come from different kernels: {trace_scalar.kernel!r} "
            f"vs {trace_vectorized.kernel!r}")
    lanes, total = _coverage_parts(trace_vectorized.events)
    if total == 0:
        return None
    return lanes / total


def _coverage_parts(events: list[TraceEvent]) -> tuple[int, int]:
    lanes = 0
    total = 0
    for ev in events:
        if ev.acct == "vec":
            lanes += ev.covers
            total += ev.covers
        elif ev.acct in ("scalar_fp", "unvec_fp"):
            total += ev.covers
    return lanes, total


def compute_vlr_runs(trace: Trace) -> Optional[float]:
    """Mean length of maximal runs of vector instructions with equal lane
    count: how often a vector length register would have to be rewritten."""
    masks = [ev.mask_k for ev in trace.events if ev.acct == "vec"]
    if not masks:
        return None
    runs = 1
    for prev, cur in zip(masks, masks[1:]):
        if cur != prev:
            runs += 1
    return len(masks) / runs


def compute_metrics(trace: Trace, cycles_scalar: Optional[int] = None,
                    cycles_vectorized: Optional[int] = None) -> MetricsRecord:
    counts = _fp_stream_counts(trace.events)
    lanes, fp_total = _coverage_parts(trace.events)
    stream_total = sum(counts.values())

    rec = MetricsRecord(kernel=trace.kernel, vlen=trace.vlen, mode=trace.mode)
    rec.dyn_fp_total = fp_total
    rec.dyn_vectorized = lanes
    rec.coverage = (lanes / fp_total) if fp_total else None
    rec.perm_per_vector = (counts["perm"] / counts["vec"]) if counts["vec"] else None
    if stream_total:
        rec.scalar_share = counts["scalar_fp"] / stream_total
        rec.vector_share = counts["vec"] / stream_total
        rec.packunpack_share = counts["perm"] / stream_total
        rec.unvec_share = counts["unvec_fp"] / stream_total
    rec.vlr_run_avg = compute_vlr_runs(trace)
    rec.cycles_scalar = cycles_scalar
    rec.cycles_vectorized = cycles_vectorized
    if cycles_scalar and cycles_vectorized:
        rec.speedup = cycles_scalar / cycles_vectorized
    return rec


REPORT_FIELDS = ("kernel", "vlen", "mode", "coverage", "perm_per_vec",
                 "scalar_share", "vector_share", "packunpack_share",
                 "unvec_share", "vlr_run_avg", "cycles", "speedup")


def _row(rec: MetricsRecord) -> dict:
    return {
        "kernel": rec.kernel,
        "vlen": rec.vlen,
        "mode": rec.mode,
        "coverage": rec.coverage,
        "perm_per_vec": rec.perm_per_vector,
        "scalar_share": rec.scalar_share,
        "vector_share": rec.vector_share,
        "packunpack_share": rec.packunpack_share,
        "unvec_share": rec.unvec_share,
        "vlr_run_avg": rec.vlr_run_avg,
        "cycles": rec.cycles_vectorized,
        "speedup": rec.speedup,
    }


def emit_report(records: list[MetricsRecord], fmt: str = "csv") -> str:
    """Serialize records with deterministic field ordering; absent values are
    empty CSV cells / JSON nulls, never zeros."""
    rows = [_row(r) for r in records]
    if fmt == "csv":
        lines = [",".join(REPORT_FIELDS)]
        for row in rows:
            lines.append(",".join("" if row[f] is None else _fmt(row[f]) for f in REPORT_FIELDS))
        return "\n".join(lines) + "\n"
    if fmt == "obj":
        return json.dumps(rows, indent=2) + "\n"
    raise ValueError(f"unknown report format {fmt!r} (expected 'csv' or 'obj')")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
