"""flexsimd: a dynamic-translation sandbox with a flexible SIMD target.

Guest kernels are interpreted and profiled, translated into superblocks
(branches become asserts, hot single-block loops unroll to fill the vector
path), optimized in SSA form, vectorized bottom-up from consecutive stores,
and executed on a masked-lane SIMD virtual machine with checkpoint/rollback.
Variable-length packing encodes the enabled lane count in each vector
instruction; selective writing lets scalar results land in any element of a
vector register, shrinking permutation traffic.
"""

from .guest import (
    ArchState,
    DType,
    GuestInstruction,
    GuestProgram,
    Interpreter,
    KernelError,
    ProfileData,
    initial_state,
    interpret,
    parse_program,
    run_oracle,
)
from .pipeline import (
    Thresholds,
    build_superblock,
    build_ddg,
    classic_optimize,
    eliminate_redundant_mem,
    schedule_list,
    to_ssa,
    unroll_loop,
)
from .vectorize import (
    Pack,
    SeedMarks,
    VectorizationConfig,
    Vectorizer,
    apply_swr,
    emit_pack_unpack,
    mark_candidates,
    vectorize_baseline,
    vectorize_vlv,
    verify_pack_legality,
)
from .lower import lower_to_host
from .hostvm import (
    Checkpoint,
    HostInstruction,
    HostOp,
    HostProgram,
    HostVM,
    Outcome,
    TraceEvent,
    exec_masked_vector,
    exec_pack,
    exec_selective_scalar,
    run_superblock,
)
from .timing import CacheHierarchy, CycleReport, TimingConfig, cache_access, simulate
from .metrics import (
    MetricsRecord,
    Trace,
    compute_coverage,
    compute_metrics,
    compute_vlr_runs,
    emit_report,
)
from .driver import MODES, Session, run_matrix, run_one, translate
from .corpus import corpus, random_straightline

__version__ = "0.1.0"
