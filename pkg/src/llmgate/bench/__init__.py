"""Closed-loop benchmark harness."""

from .dataset import PromptRecord, load_dataset
from .report import emit_report
from .runner import BenchmarkReport, BenchmarkRun, EndpointUnreachableError, run_benchmark, run_simulated, sweep
