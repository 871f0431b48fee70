"""Hybrid emulation of large-scale distributed training on a few devices.

Pipeline: workload programs -> bare execution graph (coordinator) ->
per-slice durations -> calibrated graph -> hybrid emulation.
"""
from .calibration import calibrate, fill_all, iteration_time, plan_slices
from .coordinator import run_collection
from .graph import ExecutionGraph, critical_path, parse_graph, serialize_graph, validate
from .replay import emulate, export_chrome_trace, simulate_full
from .workload import CostModel, ParallelismSpec, build_programs, preset

__version__ = "0.1.0"

__all__ = [
    "CostModel", "ExecutionGraph", "ParallelismSpec", "build_programs", "calibrate",
    "critical_path", "emulate", "export_chrome_trace", "fill_all", "iteration_time",
    "parse_graph", "plan_slices", "preset", "run_collection", "serialize_graph",
    "simulate_full", "validate",
]
