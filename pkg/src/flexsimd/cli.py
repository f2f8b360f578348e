"""Command-line driver: run kernels through the translation/vectorization
pipeline across vector lengths and modes, verify against the interpreter
oracle, and emit metric reports.

Exit codes: 0 success, 2 oracle verification failure, 3 input error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .corpus import corpus as load_corpus
from .driver import MODE_ORDER, MODES, VECTOR_LENGTHS, run_matrix
from .guest import GuestProgram, KernelError, parse_program
from .metrics import emit_report
from .pipeline import Thresholds
from .timing import TimingConfig


class InputError(Exception):
    pass


def _parse_vlens(text: str) -> list[int]:
    out = []
    for item in text.split(","):
        vlen = int(item.strip())
        if vlen not in VECTOR_LENGTHS:
            raise InputError(f"unsupported vector length {vlen}; choose from {VECTOR_LENGTHS}")
        out.append(vlen)
    return out


def _parse_modes(text: str) -> list[str]:
    if text.strip() == "all":
        return list(MODE_ORDER)
    out = []
    for item in text.split(","):
        mode = item.strip()
        if mode not in MODES:
            raise InputError(f"unknown mode {mode!r}; choose from {list(MODES)} or 'all'")
        out.append(mode)
    return out


def _load_kernels(args) -> list[GuestProgram]:
    built_in = load_corpus(seed=args.seed)
    programs: list[GuestProgram] = []
    if args.corpus:
        if args.corpus == "all":
            programs.extend(built_in.values())
        else:
            for name in args.corpus.split(","):
                name = name.strip()
                if name not in built_in:
                    raise InputError(f"unknown corpus kernel {name!r}")
                programs.append(built_in[name])
    for item in args.kernel or []:
        for name in item.split(","):
            name = name.strip()
            if name in built_in:
                programs.append(built_in[name])
                continue
            path = Path(name)
            if not path.is_file():
                raise InputError(f"kernel {name!r} is neither a built-in nor a file")
            programs.append(parse_program(path.read_text(encoding="utf-8"), name=path.stem))
    if not programs:
        raise InputError("no kernels selected; use --kernel or --corpus")
    return programs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexsimd",
        description="Translate, vectorize, execute, and time guest kernels on the "
                    "masked variable-length SIMD virtual machine.")
    parser.add_argument("--kernel", action="append",
                        help="built-in kernel name or kernel file path (comma list, repeatable)")
    parser.add_argument("--corpus", help="'all' or comma list of built-in kernels")
    parser.add_argument("--vlen", default="128,256,512",
                        help="comma list of vector lengths (bits)")
    parser.add_argument("--mode", default="all",
                        help="comma list of scalar,baseline,vlv,swr,vlv+swr or 'all'")
    parser.add_argument("--report", help="write the report to this path (default: stdout)")
    parser.add_argument("--format", default="csv", choices=("csv", "obj"),
                        help="report format")
    parser.add_argument("--dump-superblocks", action="store_true",
                        help="print translated superblock IR listings")
    parser.add_argument("--dump-host-asm", action="store_true",
                        help="print lowered host assembly")
    parser.add_argument("--timing-config", help="key=value file overriding timing parameters")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the randomized property kernel (rand-sl)")
    parser.add_argument("--thresholds", default="",
                        help="comma list of k=v translation thresholds "
                             "(bbm, sbm, bias, max_size, recreate, translate)")
    return parser


def run(args) -> int:
    try:
        programs = _load_kernels(args)
        vlens = _parse_vlens(args.vlen)
        modes = _parse_modes(args.mode)
        thresholds = Thresholds.from_spec(args.thresholds) if args.thresholds else Thresholds()
        timing = TimingConfig.from_file(args.timing_config) if args.timing_config else TimingConfig()
    except (InputError, KernelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3

    records, all_ok = run_matrix(programs, vlens, modes, thresholds, timing)

    if args.dump_superblocks or args.dump_host_asm:
        for rr in records:
            if rr.result is None:
                continue
            for pc, unit in sorted(rr.result.translations.items()):
                header = (f"# kernel={rr.record.kernel} vlen={rr.record.vlen} "
                          f"mode={rr.record.mode} @pc={pc}")
                if args.dump_superblocks:
                    print(header)
                    print(unit.sb.render())
                    for pack in unit.packs:
                        print("  " + pack.describe())
                if args.dump_host_asm:
                    print(header)
                    print(unit.hp.render())

    report = emit_report([rr.record for rr in records], args.format)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    else:
        sys.stdout.write(report)

    for rr in records:
        if not rr.ok:
            print(f"verification FAILED: kernel={rr.record.kernel} vlen={rr.record.vlen} "
                  f"mode={rr.record.mode}: {rr.mismatch}", file=sys.stderr)
    return 0 if all_ok else 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
