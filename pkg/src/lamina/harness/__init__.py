"""Experiment harness: data, configs, experiment builders, training and metrics."""

from lamina.harness.config import EXPERIMENTS, ExperimentConfig, load_config
from lamina.harness.data import Dataset, DatasetSpec, load_dataset, load_idx, parse_idx
from lamina.harness.experiments import build_experiment
from lamina.harness.metrics import (
    MetricsRecord,
    dumps_csv,
    dumps_json,
    emit_metrics,
    read_csv,
    read_json,
)
from lamina.harness.runner import ExperimentError, run_experiment

__all__ = [
    "EXPERIMENTS",
    "Dataset",
    "DatasetSpec",
    "ExperimentConfig",
    "ExperimentError",
    "MetricsRecord",
    "build_experiment",
    "dumps_csv",
    "dumps_json",
    "emit_metrics",
    "load_config",
    "load_dataset",
    "load_idx",
    "parse_idx",
    "read_csv",
    "read_json",
    "run_experiment",
]
