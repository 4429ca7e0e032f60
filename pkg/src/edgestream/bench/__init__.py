"""Benchmark harness: synthetic data, paced production, reports and comparisons."""
from .report import BenchReport, CompareError, box_rows, collect, compare, compare_sets, describe
from .runner import RunError, expected_outputs, load_query, produce, run_eval
from .source import PRESET_RATES, SourceConfig, load_csv
from .synth import ELEC_ROWS, synth_elec

__all__ = [
    "BenchReport", "CompareError", "ELEC_ROWS", "PRESET_RATES", "RunError", "SourceConfig", "box_rows",
    "collect", "compare", "compare_sets", "describe", "expected_outputs", "load_csv", "load_query",
    "produce", "run_eval", "synth_elec",
]
