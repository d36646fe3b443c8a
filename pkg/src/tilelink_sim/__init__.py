"""Thread-per-rank simulator of tile-level compute/communication overlap."""

from .bench import measure_kernel
from .errors import (ConfigError, DeadlockError, DomainError, MappingNotMaterialized,
                     RaceViolation, ShapeMismatch, SignalError, TileLinkError, WorldAborted)
from .mapping import (SENTINEL, DynamicMapping, RoutingTable, ShapeRange, StaticMapping,
                      build_dynamic_mapping, channel_owner, dynamic_lookup, static_channel,
                      static_shape_range, static_src_rank)
from .runtime import (BlockChannel, ChannelLayout, Context, Expectation, HostContext, SignalBoard,
                      SymmetricTensor, Task, World, alloc_symmetric, init_world)
from .trace import (OverlapReport, TraceEvent, Tracer, TraceSummary, analyze_trace, overlap_ratio,
                    read_jsonl, write_jsonl)
from .transfer import CopyEngine, Region, rank_copy_data, tile_pull_data, tile_push_data

__all__ = [
    "SENTINEL", "BlockChannel", "ChannelLayout", "ConfigError", "Context", "CopyEngine",
    "DeadlockError", "DomainError", "DynamicMapping", "Expectation", "HostContext",
    "MappingNotMaterialized", "OverlapReport", "RaceViolation", "Region", "RoutingTable",
    "ShapeMismatch", "ShapeRange", "SignalBoard", "SignalError", "StaticMapping",
    "SymmetricTensor", "Task", "TileLinkError", "TraceEvent", "TraceSummary", "Tracer", "World",
    "WorldAborted", "alloc_symmetric", "analyze_trace", "build_dynamic_mapping", "channel_owner",
    "dynamic_lookup", "init_world", "measure_kernel", "overlap_ratio", "rank_copy_data",
    "read_jsonl", "static_channel", "static_shape_range", "static_src_rank", "tile_pull_data",
    "tile_push_data", "write_jsonl",
]
