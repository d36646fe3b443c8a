"""Overlapped kernels, their sequential references and a uniform driver."""

from .ag_gemm import ag_gemm
from .attention import OnlineSoftmax, ag_kv_attention
from .collectives import AllGather, RingReduceScatter
from .common import COMM_ONLY, COMP_ONLY, FULL, PHASES, KernelRun
from .config import KINDS, KernelConfig, tile_schedule
from .driver import Comparison, compare, make_inputs, reference, run_kernel, tolerance, validate, verify
from .gemm_rs import gemm_ring_rs
from .moe import MoeRun, ag_moe, moe, moe_second_half

__all__ = [
    "COMM_ONLY", "COMP_ONLY", "FULL", "KINDS", "PHASES", "AllGather", "Comparison", "KernelConfig",
    "KernelRun", "MoeRun", "OnlineSoftmax", "RingReduceScatter", "ag_gemm", "ag_kv_attention",
    "ag_moe", "compare", "gemm_ring_rs", "make_inputs", "moe", "moe_second_half", "reference",
    "run_kernel", "tile_schedule", "tolerance", "validate", "verify",
]
