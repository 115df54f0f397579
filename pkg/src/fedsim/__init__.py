"""Deterministic federated learning simulator.

Seeded end to end: a config replays to byte-identical artifacts, and a
co-versioned run can be re-verified later from its ledger and payload
archive alone.
"""

from .config import ExperimentConfig, load_config, parse_config
from .replay import all_match, replay_run, verify_ledger
from .report import build_report, report_run
from .runner import RunResult, run_experiment

__all__ = [
    "ExperimentConfig",
    "RunResult",
    "all_match",
    "build_report",
    "load_config",
    "parse_config",
    "replay_run",
    "report_run",
    "run_experiment",
    "verify_ledger",
]
