"""Three-run overlap measurement: computation only, communication only, overlapped."""

from __future__ import annotations

import statistics

from .kernels.common import COMM_ONLY, COMP_ONLY, FULL, world_for
from .kernels.config import KernelConfig
from .kernels.driver import Inputs, make_inputs, run_kernel
from .trace import OverlapReport

PHASE_ORDER = (COMP_ONLY, COMM_ONLY, FULL)


def phase_times(cfg: KernelConfig, repeat: int, *, inputs: Inputs | None = None,
                comm_delay: float = 0.0, timeout: float | None = None,
                warmup: int = 1) -> dict[str, list[float]]:
    """Wall-clock seconds of ``repeat`` launches of every phase.

    Phases are interleaved round by round so that drift in machine speed
    hits all three alike; ``warmup`` untimed rounds run first.
    """
    if repeat < 1:
        raise ValueError(f"repeat must be >= 1, got {repeat}")
    inputs = make_inputs(cfg) if inputs is None else inputs
    world = world_for(cfg, comm_delay=comm_delay, timeout=timeout)
    times: dict[str, list[float]] = {phase: [] for phase in PHASE_ORDER}
    for i in range(warmup + repeat):
        for phase in PHASE_ORDER:
            elapsed = run_kernel(cfg, inputs, world=world, phase=phase).elapsed
            if i >= warmup:
                times[phase].append(elapsed)
    return times


def measure_kernel(cfg: KernelConfig, repeat: int = 5, *, comm_delay: float = 0.0,
                   timeout: float | None = None, inputs: Inputs | None = None) -> OverlapReport:
    """Median time of each phase over ``repeat`` runs, folded into an overlap report.

    The communication-only run keeps every transfer and signal but skips
    the math; the computation-only run starts from pre-gathered inputs and
    never waits.
    """
    times = phase_times(cfg, repeat, inputs=inputs, comm_delay=comm_delay, timeout=timeout)
    medians = {phase: statistics.median(ts) for phase, ts in times.items()}
    config = {**cfg.to_dict(), "repeat": repeat, "comm_delay_s": comm_delay}
    return OverlapReport.from_times(medians[COMP_ONLY], medians[COMM_ONLY], medians[FULL], config)
