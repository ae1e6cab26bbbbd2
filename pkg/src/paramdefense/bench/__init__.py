"""Experiment harness: datasets, checkpoints, sweeps, statistics and the CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import Dataset, load_csv, load_idx, read_idx, synth_dataset
from .stats import TTest, two_sample_t
from .sweep import LayerProbeRow, ReportRow, layer_groups, layer_probe, run_probe_sweep

__all__ = [
    "Dataset",
    "LayerProbeRow",
    "ReportRow",
    "TTest",
    "layer_groups",
    "layer_probe",
    "load_checkpoint",
    "load_csv",
    "load_idx",
    "read_idx",
    "run_probe_sweep",
    "save_checkpoint",
    "synth_dataset",
    "two_sample_t",
]
