"""Temperature scaling and conformal prediction on stored classifier logits."""

from .calibrate import CalibrationResult, EceConfig, SearchConfig, ece, nll, optimize_temperature, reliability_diagram
from .conformal import (
    CPModel,
    MondrianModel,
    ScoreMethod,
    deterministic_set_size,
    fit_mondrian,
    fit_threshold,
    predict_set,
    predict_sets,
    score,
)
from .data import LogitsTable, SplitPlan, load_logits, make_split
from .metrics import MetricsReport, evaluate, median_of_means
from .softmax import argmax_class, entropy, softmax, softmax_at
from .sweep import GuidelinePlan, Grid, SweepCurve, approximate_curves, run_sweep, select_t_hat

__version__ = "0.1.0"
