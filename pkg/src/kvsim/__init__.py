"""Chunked KV-cache memory simulator: vtensor stack, baselines, serving loop."""

from .config import GIB, KIB, MIB, ModelGeometry, SimConfig, format_size, parse_size
from .device import (
    ChunkStillMapped,
    DeviceConfig,
    DeviceError,
    DeviceOutOfMemory,
    IndexOutOfRange,
    InvalidSize,
    PageAlreadyMapped,
    PageNotMapped,
    PhysicalHandle,
    RangeStillMapped,
    StaleHandle,
    UnknownRange,
    VirtualMemoryDevice,
    VirtualRange,
)
from .pool import (
    ChunkState,
    PhysicalEntry,
    PoolStateError,
    PrefixTree,
    SpaceState,
    TensorPool,
    UnknownReferrer,
    VirtualSpace,
    VirtualTensor,
)
from .ops import CapacityExceeded, ReclaimReport, VTensorOps
from .scheduler import AdmitStats, ExceedsMaxSeqLen, RequestMem, VTensorScheduler
from .metrics import (
    KvStats,
    MemoryBreakdown,
    flexibility_summary,
    native_fragmentation_ratio,
    snapshot,
    vtensor_kv_stats,
)
from .baselines import NativeAllocator, PagedAllocator
from .trace import (
    SCENARIOS,
    TraceFormatError,
    TraceRequest,
    derive_seed,
    dump_trace,
    generate_trace,
    load_trace,
    output_token,
    token_stream,
)
from .engine import (
    ALLOCATORS,
    NothingToPreempt,
    ServingEngine,
    SimulationReport,
    StepRow,
    TraceInfeasible,
    VTensorAdapter,
    build_allocator,
    build_device,
    run_trace,
)
from .verify import (
    brute_force_match,
    check_all,
    fuzz_ops,
    fuzz_tree,
    run_op_log,
)

__version__ = "0.1.0"

__all__ = [
    "GIB",
    "KIB",
    "MIB",
    "ModelGeometry",
    "SimConfig",
    "format_size",
    "parse_size",
    "ChunkStillMapped",
    "DeviceConfig",
    "DeviceError",
    "DeviceOutOfMemory",
    "IndexOutOfRange",
    "InvalidSize",
    "PageAlreadyMapped",
    "PageNotMapped",
    "PhysicalHandle",
    "RangeStillMapped",
    "StaleHandle",
    "UnknownRange",
    "VirtualMemoryDevice",
    "VirtualRange",
    "ChunkState",
    "PhysicalEntry",
    "PoolStateError",
    "PrefixTree",
    "SpaceState",
    "TensorPool",
    "UnknownReferrer",
    "VirtualSpace",
    "VirtualTensor",
    "CapacityExceeded",
    "ReclaimReport",
    "VTensorOps",
    "AdmitStats",
    "ExceedsMaxSeqLen",
    "RequestMem",
    "VTensorScheduler",
    "KvStats",
    "MemoryBreakdown",
    "flexibility_summary",
    "native_fragmentation_ratio",
    "snapshot",
    "vtensor_kv_stats",
    "NativeAllocator",
    "PagedAllocator",
    "SCENARIOS",
    "TraceFormatError",
    "TraceRequest",
    "derive_seed",
    "dump_trace",
    "generate_trace",
    "load_trace",
    "output_token",
    "token_stream",
    "ALLOCATORS",
    "NothingToPreempt",
    "ServingEngine",
    "SimulationReport",
    "StepRow",
    "TraceInfeasible",
    "VTensorAdapter",
    "build_allocator",
    "build_device",
    "run_trace",
    "brute_force_match",
    "check_all",
    "fuzz_ops",
    "fuzz_tree",
    "run_op_log",
]
