"""The training protocols as deterministic round state machines."""
from .cl import run_cl_baseline
from .common import evaluate, local_batches
from .fl import run_fl_round
from .hfsl import pipeline_order, run_hfsl_round
from .hsfl import d2d_chain_pass, run_hsfl_round
from .runner import ExperimentRun, current_model, evaluate_state, run_experiment, run_round
from .sl import run_sl_round
from .state import ExperimentState, RoundResult, Streams, build_state, initial_state, load_datasets

__all__ = [
    "ExperimentRun",
    "ExperimentState",
    "RoundResult",
    "Streams",
    "build_state",
    "current_model",
    "d2d_chain_pass",
    "evaluate",
    "evaluate_state",
    "initial_state",
    "load_datasets",
    "local_batches",
    "pipeline_order",
    "run_cl_baseline",
    "run_experiment",
    "run_fl_round",
    "run_hfsl_round",
    "run_hsfl_round",
    "run_round",
    "run_sl_round",
]
