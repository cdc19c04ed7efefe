"""Streaming goal forecasting with replay-based continual learning."""

from .buffers import (BufferEntry, DiversityBuffer, ReservoirBuffer,
                      composition, diversity_score, sample_joint)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, StreamConfig
from .errors import (CheckpointError, ConfigurationError, GoalkeepError,
                     InputError, InternalError)
from .experiment import RunRecord, run_experiment
from .metrics import (ErrorMatrix, EvalResult, GoalSet, averages, bwt,
                      evaluate_model, extract_goals, fde, heading_of, miss,
                      mr_task, mr_threshold, topk_cells)
from .model import (Heatmap, HeatmapPredictor, LossSpec, PredictorConfig,
                    Sample, focal_loss, kl_divergence, sgd_step, splat_targets)
from .plots import PLOT_KINDS, emit_plots
from .stream import (TaskSpec, TaskStream, closed_form_goal, default_benchmark,
                     generate_synthetic, load_csv, stream_batches,
                     task_boundaries)
from .trainer import (AGEMTrainer, DERTrainer, DualLSTrainer, GSSTrainer,
                      HyperParams, OnlineTrainer, RunResult, StepInfo,
                      TRAINER_KINDS, VanillaTrainer, agem_project, ema_update,
                      make_trainer, run_stream, select_teacher)

__version__ = "0.1.0"

__all__ = [
    "AGEMTrainer", "BufferEntry", "CheckpointError", "ConfigurationError",
    "DERTrainer", "DiversityBuffer", "DualLSTrainer", "ErrorMatrix",
    "EvalResult", "ExperimentConfig", "GSSTrainer", "GoalSet", "GoalkeepError",
    "Heatmap", "HeatmapPredictor", "HyperParams", "InputError",
    "InternalError", "LossSpec", "OnlineTrainer", "PLOT_KINDS",
    "PredictorConfig", "ReservoirBuffer", "RunRecord", "RunResult", "Sample",
    "StepInfo", "StreamConfig", "TRAINER_KINDS", "TaskSpec", "TaskStream",
    "VanillaTrainer",
    "agem_project", "averages", "bwt", "closed_form_goal", "composition",
    "default_benchmark", "diversity_score", "emit_plots", "ema_update",
    "evaluate_model", "extract_goals", "fde", "focal_loss",
    "generate_synthetic", "heading_of", "kl_divergence", "load_checkpoint",
    "load_csv", "make_trainer", "miss", "mr_task", "mr_threshold",
    "run_experiment", "run_stream", "sample_joint", "save_checkpoint",
    "select_teacher", "sgd_step", "splat_targets", "stream_batches",
    "task_boundaries", "topk_cells",
]
