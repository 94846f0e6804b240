"""Calibrated early stopping for step-wise reasoning traces."""

from .features import PcaModel, SmoothingSpec, fit_pca, load_pca, project, save_pca, smooth_scores
from .monitor import MonitorState, StopDecision, feed_step, run_stream
from .probes import CombinedScorer, ProbeHyper, ProbeModel, auroc, score_step, score_trace, train_probe
from .risk import (
    CalibrationResult,
    LambdaGrid,
    RiskSpec,
    binom_tail_pvalue,
    calibrate_fixed_sequence,
    empirical_risk,
    fixed_sequence_select,
    stop_index,
)
from .sim import SimConfig, coverage_experiment, generate
from .traces import Step, StepLabels, Trace, TraceSet, load_traceset, save_traceset, segment_thoughts

__version__ = "0.1.0"
