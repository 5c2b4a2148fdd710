"""Simulation and evaluation for the sparse factor model."""

from evaluation.evaluate import (
    PosteriorSummary,
    align_to_truth,
    baseline_metrics,
    fill_in_rrmse,
    make_fill_in_split,
    residual_table,
    rrmse,
    select_best_chain,
    summarize,
    truth_alignment,
    truth_metrics,
    z_accuracy,
)
from evaluation.simulate import simulate, simulate_snr_series

__all__ = [
    "PosteriorSummary",
    "align_to_truth",
    "baseline_metrics",
    "fill_in_rrmse",
    "make_fill_in_split",
    "residual_table",
    "rrmse",
    "select_best_chain",
    "simulate",
    "simulate_snr_series",
    "summarize",
    "truth_alignment",
    "truth_metrics",
    "z_accuracy",
]
