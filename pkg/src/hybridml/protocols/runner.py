"""Round dispatch and whole-experiment execution."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..datasets import Dataset
from ..trace import RoundTrace
from .cl import run_cl_baseline
from .common import evaluate
from .fl import run_fl_round
from .hfsl import run_hfsl_round
from .hsfl import run_hsfl_round
from .sl import run_sl_round, sl_parts
from .state import ExperimentState, RoundResult, virtual_global

ROUND_FUNCTIONS = {
    "cl": run_cl_baseline,
    "fl": run_fl_round,
    "sl": run_sl_round,
    "hsfl": run_hsfl_round,
    "hfsl": run_hfsl_round,
}


def run_round(state: ExperimentState) -> RoundResult:
    result = ROUND_FUNCTIONS[state.arch](state)
    if state.phantom_bytes:
        result.trace.inject_phantom(state.phantom_bytes)
    return result


def current_model(state: ExperimentState):
    """The model (or stacked parts) an architecture would be evaluated with now."""
    if state.arch == "sl":
        return sl_parts(state)
    if state.arch == "hfsl" and state.protocol.main_sync_every != 1:
        return virtual_global(state, state.edge_models)
    return state.global_model


def evaluate_state(state: ExperimentState, test_set: Dataset | None = None) -> float:
    return evaluate(current_model(state), state.test if test_set is None else test_set)


@dataclass
class ExperimentRun:
    arch: str
    initial_accuracy: float | None
    traces: list[RoundTrace] = field(default_factory=list)
    accuracies: list[float | None] = field(default_factory=list)
    state: ExperimentState | None = None


def run_experiment(state: ExperimentState, rounds: int, evaluate_every: int = 1, on_round=None) -> ExperimentRun:
    """Run ``rounds`` rounds, evaluating up front and then every ``evaluate_every`` rounds.

    ``evaluate_every=0`` disables evaluation. ``on_round(index, result)`` is
    called after each round.
    """
    initial = evaluate_state(state) if evaluate_every else None
    run = ExperimentRun(state.arch, initial, state=state)
    for i in range(rounds):
        result = run_round(state)
        if evaluate_every and ((i + 1) % evaluate_every == 0 or i == rounds - 1):
            result.accuracy = evaluate_state(state)
        run.traces.append(result.trace)
        run.accuracies.append(result.accuracy)
        if on_round is not None:
            on_round(i, result)
    return run
