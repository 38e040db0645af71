"""Data-series similarity search over a summarization tree whose leaves carry
learned distance filters, calibrated at query time to meet a recall target."""

from .series import (
    ABANDONED,
    Dataset,
    QuerySet,
    euclidean_distance,
    generate_randwalk,
    load_dataset,
    load_queries,
    make_queries,
    save_dataset,
    save_queries,
    znormalize,
)
from .summarize import SegmentConfig, lower_bound, segment_config, summarize_series
from .tree import (
    Index,
    SearchOutcome,
    build_index,
    exact_search,
    linear_scan,
    load_index,
    pruning_ratio,
    save_index,
)
from .mlp import MlpModel, TrainConfig, TrainReport, gradient_check, init_model, train
from .traingen import SplitPlan
from .select import RuntimeConstants, SelectionBudget, compute_threshold, select_greedy, solve_knapsack
from .conformal import QualityOffsetCurve, compute_alphas, fit_auto_tuners, simulate_search, tune
from .enhanced import EnhancedIndex, SearchRequest, enhance, load_enhanced, save_enhanced, search
from .cli import epsilon_search, run_bench

__version__ = "0.1.0"

__all__ = [
    "ABANDONED",
    "Dataset",
    "EnhancedIndex",
    "Index",
    "MlpModel",
    "QualityOffsetCurve",
    "QuerySet",
    "RuntimeConstants",
    "SearchOutcome",
    "SearchRequest",
    "SegmentConfig",
    "SelectionBudget",
    "SplitPlan",
    "TrainConfig",
    "TrainReport",
    "build_index",
    "compute_alphas",
    "compute_threshold",
    "enhance",
    "epsilon_search",
    "euclidean_distance",
    "exact_search",
    "fit_auto_tuners",
    "generate_randwalk",
    "gradient_check",
    "init_model",
    "linear_scan",
    "load_dataset",
    "load_enhanced",
    "load_index",
    "load_queries",
    "lower_bound",
    "make_queries",
    "pruning_ratio",
    "run_bench",
    "save_dataset",
    "save_enhanced",
    "save_index",
    "save_queries",
    "search",
    "segment_config",
    "select_greedy",
    "simulate_search",
    "solve_knapsack",
    "summarize_series",
    "train",
    "tune",
    "znormalize",
]
