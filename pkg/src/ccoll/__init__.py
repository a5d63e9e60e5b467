"""Compression-integrated collectives on a simulated or in-process transport."""

from .codec import CodecError, compress, compress_pipelined, decode, decompress, decompress_pipelined
from .collectives import PipelineConfig, ReduceOp, Variant, allgather, allreduce, bcast, reduce_scatter, scatter
from .transport import CommWorld, Mode, RunReport, SimParams

__all__ = [
    "CodecError", "compress", "compress_pipelined", "decode", "decompress", "decompress_pipelined",
    "PipelineConfig", "ReduceOp", "Variant", "allgather", "allreduce", "bcast", "reduce_scatter", "scatter",
    "CommWorld", "Mode", "RunReport", "SimParams",
]
__version__ = "0.1.0"
