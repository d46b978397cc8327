from .config import ExperimentConfig, LossSettings, resolve_net
from .histograms import export_weight_histograms, weight_histograms
from .presets import PRESET_NETS, blobs_mlp, digits_cnn
from .runner import (
    EpochMetrics,
    ExperimentResult,
    RunRecord,
    aggregate,
    epoch_order,
    evaluate_error,
    metrics_path,
    read_run_record,
    run_experiment,
    run_single,
    timing_path,
    write_metrics_csv,
    write_timing_csv,
)
from .sweeps import (
    default_patterns,
    run_hyper_sweep,
    run_noise_sweep,
    run_opt_mode_comparison,
    run_scaling_ablation,
)

__all__ = [
    "ExperimentConfig",
    "LossSettings",
    "resolve_net",
    "export_weight_histograms",
    "weight_histograms",
    "PRESET_NETS",
    "blobs_mlp",
    "digits_cnn",
    "EpochMetrics",
    "ExperimentResult",
    "RunRecord",
    "aggregate",
    "epoch_order",
    "evaluate_error",
    "metrics_path",
    "read_run_record",
    "run_experiment",
    "run_single",
    "timing_path",
    "write_metrics_csv",
    "write_timing_csv",
    "default_patterns",
    "run_hyper_sweep",
    "run_noise_sweep",
    "run_opt_mode_comparison",
    "run_scaling_ablation",
]
