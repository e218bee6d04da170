"""Centralized baseline: one node trains on the union of all shards."""
from __future__ import annotations

import numpy as np

from ..nn import count_flops
from ..trace import RoundRecorder
from .common import local_batches, train_full
from .state import ExperimentState, RoundResult


def run_cl_baseline(state: ExperimentState) -> RoundResult:
    """One round of centralized training on the main server; no transmissions.

    Batches come from the data stream keyed like the first client's, so a
    single-client FL run over the same indices sees the same order.
    """
    topo, proto = state.topology, state.protocol
    rec = RoundRecorder(topo, "cl", state.round_index, proto.aggregation_cost)
    union = np.sort(np.concatenate([state.shards[c].indices for c in topo.clients]))
    batches = local_batches(state, topo.clients[0], indices=union)
    state.global_model = train_full(state.global_model, state.train, batches, proto.lr)
    rec.compute(topo.main, count_flops(state.spec, sum(len(b) for b in batches)), "train")
    state.round_index += 1
    return RoundResult(state, rec.finish())
