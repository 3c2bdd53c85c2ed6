"""Multi-exit classifiers: training, calibration and anytime exit policies."""

from .calibration import CalibrationTable, apply_temperature, ece, fit_temperature, per_exit_calibrate
from .config import RunConfig
from .data import DatasetSpec, LogitTrace, generate_synthetic, load_logit_trace, save_logit_trace
from .errors import (
    CalibrationSkipped,
    CheckpointFormatError,
    DegenerateNetworkError,
    InvalidInputError,
    InvalidPlacementError,
    NumericalError,
    ThresholdWarning,
    TraceFormatError,
)
from .evaluation import ParetoPoint, compare_policies, evaluate, exit_pattern_matrix, pareto_front
from .model import (
    BackboneConfig,
    CostModel,
    ExitPlacement,
    HeadKind,
    MultiExitNetwork,
    build,
    collect_trace,
    load_checkpoint,
    save_checkpoint,
)
from .policy import ExitDecision, ExitPolicy, decide, global_sweep, heuristic_thresholds, random_multi_search
from .training import TrainConfig, TrainStrategy, total_loss, train

__version__ = "0.1.0"
