"""Federated learning: local SGD on full models, FedAvg at the servers."""
from __future__ import annotations

from ..netsim import sample_failure
from ..nn import count_flops
from ..partition import fedavg
from ..trace import MODEL, RoundRecorder
from .common import edge_to_main, local_batches, train_full
from .state import ExperimentState, RoundResult


def run_fl_round(state: ExperimentState) -> RoundResult:
    """One FL round.

    Every client trains from its current model, uploads it to its edge
    server (one failure unit per model), edges average what arrived, the
    main server averages the edges and the result is broadcast back.
    Clients whose download fails keep their local model.
    """
    topo, proto = state.topology, state.protocol
    r = state.round_index
    rec = RoundRecorder(topo, "fl", r, proto.aggregation_cost)
    fail_rng = state.streams.rng("failures", r)
    P, W = state.spec.param_count, state.spec.model_bytes

    edge_models, edge_w, ready = {}, {}, {}
    for e in topo.edges:
        delivered, ups = [], []
        for cid in topo.cellular[e]:
            batches = local_batches(state, cid)
            model = train_full(state.client_models[cid][0], state.train, batches, proto.lr)
            state.client_models[cid] = [model]
            c = rec.compute(cid, count_flops(state.spec, sum(len(b) for b in batches)), "train")
            failed = sample_failure(topo.link(cid, e), fail_rng)
            ups.append(rec.transmit(MODEL, cid, e, W, after=[c], failed_units=int(failed)))
            if not failed:
                delivered.append((model, state.weight(cid)))
        if delivered:
            edge_models[e] = fedavg(delivered)
            edge_w[e] = sum(w for _, w in delivered)
            ready[e] = [rec.aggregate(e, P, len(delivered), after=ups)]
        else:
            edge_models[e] = state.edge_models[e]
            edge_w[e] = 0.0
            ready[e] = ups

    if not any(w > 0 for w in edge_w.values()):
        rec.notes.append("all uploads failed; round aborted")
        state.round_index += 1
        return RoundResult(state, rec.finish(aborted=True))

    new_global, models, at = edge_to_main(state, rec, edge_models, edge_w, ready, fail_rng)
    if new_global is None:
        rec.notes.append("no edge model reached the main server; round aborted")
        state.round_index += 1
        return RoundResult(state, rec.finish(aborted=True))
    state.global_model = new_global
    state.edge_models = models
    for e in topo.edges:
        receivers = topo.cellular[e]
        if not receivers:
            continue
        fails = [sample_failure(topo.link(e, cid), fail_rng) for cid in receivers]
        rec.broadcast(MODEL, e, receivers, W, after=[at[e]], units=len(receivers), failed_units=sum(fails))
        for cid, failed in zip(receivers, fails):
            if not failed:
                state.client_models[cid] = [models[e].copy()]
    state.round_index += 1
    return RoundResult(state, rec.finish())
