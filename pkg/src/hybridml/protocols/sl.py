"""Split learning: clients train sequentially against one server part."""
from __future__ import annotations

from ..netsim import sample_failure
from ..trace import HANDOFF, RoundRecorder
from .common import local_batches
from .splitstep import split_batch
from .state import ExperimentState, RoundResult


def run_sl_round(state: ExperimentState) -> RoundResult:
    """Clients take turns; each runs its local epochs batch by batch across the cut.

    After its pass a client hands its client-side parameters to the next
    client (cyclically, so the last hands to the first for the next
    round). The handoff is relayed by the edge server: one uplink leg and
    one downlink leg. If either leg fails the receiver keeps its own copy.
    """
    topo, proto = state.topology, state.protocol
    plan = state.plan
    assert plan is not None
    r = state.round_index
    (edge,) = topo.edges
    rec = RoundRecorder(topo, "sl", r, proto.aggregation_cost)
    fail_rng = state.streams.rng("failures", r)
    handoff_bytes = plan.client_param_count * state.spec.param_dtype_bytes
    server = state.server_models[edge]
    clients = topo.clients
    ready = None
    server_ready = None
    for i, cid in enumerate(clients):
        parts = [p.copy() for p in state.client_models[cid]]
        for idx in local_batches(state, cid):
            out = split_batch(state, rec, cid, edge, parts, server, idx, fail_rng, ready, server_ready)
            parts, server, ready, server_ready = out.client_parts, out.server, out.ready, out.server_ready
            if not out.completed:
                rec.notes.append(f"batch of {cid} skipped after a failed exchange")
        state.client_models[cid] = parts
        nxt = clients[(i + 1) % len(clients)]
        failed_up = sample_failure(topo.link(cid, edge), fail_rng)
        leg0 = rec.transmit(HANDOFF, cid, edge, handoff_bytes, after=[ready], failed_units=int(failed_up))
        failed_down = sample_failure(topo.link(edge, nxt), fail_rng)
        leg1 = rec.transmit(
            HANDOFF, edge, nxt, handoff_bytes, after=[leg0], failed_units=int(failed_down), relay_leg=1
        )
        ready = leg1
        if not (failed_up or failed_down):
            state.client_models[nxt] = [p.copy() for p in parts]
        else:
            rec.notes.append(f"handoff {cid} -> {nxt} failed")
    state.server_models[edge] = server
    state.round_index += 1
    return RoundResult(state, rec.finish())


def sl_parts(state: ExperimentState) -> list:
    """Composed model for evaluation: the next client's parts around the server part."""
    (edge,) = state.topology.edges
    c = state.client_models[state.topology.clients[0]]
    return [c[0], state.server_models[edge], *c[1:]]
