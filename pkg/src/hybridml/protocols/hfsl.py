"""Hybrid federated split learning.

Cellular clients train in parallel, each against its own copy of the edge
server's part; the edge then averages the client parts and the copies.
Each D2D cluster trains the whole model as a pipeline along its chain and
joins the edge average as one participant.
"""
from __future__ import annotations

import numpy as np

from ..netsim import Cluster, sample_failure
from ..nn import Model, backprop, count_flops, forward, forward_flops, loss_and_grad, sgd_step
from ..partition import balanced_layer_cuts, fedavg, join_models, split_model
from ..trace import ACTIVATION, CUT_GRAD, LABELS, MODEL, PIECES, RoundRecorder
from .common import batch_of, edge_to_main, local_batches
from .splitstep import split_batch
from .state import ExperimentState, RoundResult


def pipeline_order(cluster: Cluster, round_index: int) -> list[str]:
    """Chain rotated so the pipeline starts one member later each round."""
    k = len(cluster.chain)
    s = round_index % k
    return list(cluster.chain[s:] + cluster.chain[:s])


def _slice(model: Model, lo: int, hi: int) -> Model:
    sub = model.spec.sub(lo, hi)
    return Model(sub, [w.copy() for w in model.weights[lo:hi]], [b.copy() for b in model.biases[lo:hi]])


def _chain_path(cluster: Cluster, src: str, dst: str) -> list[tuple[str, str]]:
    """Hops from ``src`` to ``dst`` walking the chain in declaration order."""
    chain = list(cluster.chain)
    i, j = chain.index(src), chain.index(dst)
    step = 1 if j >= i else -1
    return [(chain[a], chain[a + step]) for a in range(i, j, step)]


def run_pipeline(
    state: ExperimentState,
    rec: RoundRecorder,
    cluster: Cluster,
    model: Model,
    fail_rng: np.random.Generator,
    after: dict[str, int | None],
) -> tuple[Model, str, dict[str, int | None], bool]:
    """Train ``model`` on the start member's shard as a pipeline over the chain.

    Returns ``(model, start, done, clean)``. ``done`` maps each piece holder
    to its last event; ``clean`` is false if any exchange failed.
    """
    spec, lr = state.spec, state.protocol.lr
    s_bytes = spec.param_dtype_bytes
    order = pipeline_order(cluster, state.round_index)
    bounds = balanced_layer_cuts(spec, min(len(order), len(spec.layers)))
    holders = order[: len(bounds)]
    pieces = [_slice(model, lo, hi) for lo, hi in bounds]
    start = order[0]
    done = dict(after)
    clean = True
    for idx in local_batches(state, start):
        batch = batch_of(state.train, idx)
        n = len(batch)
        caches, x, ev = [], batch.inputs, done.get(start)
        ok = True
        for k, (piece, holder) in enumerate(zip(pieces, holders)):
            if k:
                prev = holders[k - 1]
                link = rec.topology.link(prev, holder)
                failed = sample_failure(link, fail_rng)
                ev = rec.transmit(
                    ACTIVATION, prev, holder, piece.spec.input_width * n * s_bytes, after=[ev, done.get(holder)],
                    failed_units=int(failed),
                )
                lab_failed = sample_failure(link, fail_rng)
                ev = rec.transmit(LABELS, prev, holder, n * state.label_bytes, after=[ev], failed_units=int(lab_failed))
                if failed or lab_failed:
                    ok = False
                    break
            cache, x = forward(piece, x)
            caches.append(cache)
            ev = rec.compute(holder, forward_flops(piece.spec, n), "pipeline_forward", after=[ev])
        if not ok:
            clean = False
            done[holders[0]] = ev
            continue
        _, g = loss_and_grad(x, batch.labels)
        new_pieces = list(pieces)
        for k in range(len(pieces) - 1, -1, -1):
            grads, g = backprop(pieces[k], caches[k], g)
            new_pieces[k] = sgd_step(pieces[k], grads, lr)
            ev = rec.compute(holders[k], 2 * forward_flops(pieces[k].spec, n), "pipeline_backward", after=[ev])
            done[holders[k]] = ev
            if k:
                link = rec.topology.link(holders[k], holders[k - 1])
                failed = sample_failure(link, fail_rng)
                ev = rec.transmit(
                    CUT_GRAD, holders[k], holders[k - 1], pieces[k].spec.input_width * n * s_bytes, after=[ev],
                    failed_units=int(failed),
                )
                if failed:
                    ok = False
                    break
        pieces = new_pieces
        if not ok:
            clean = False
    return join_models(pieces, spec), start, done, clean


def run_hfsl_round(state: ExperimentState) -> RoundResult:
    topo, proto = state.topology, state.protocol
    plan = state.plan
    assert plan is not None
    r = state.round_index
    rec = RoundRecorder(topo, "hfsl", r, proto.aggregation_cost)
    fail_rng = state.streams.rng("failures", r)
    spec = state.spec
    P, W = spec.param_count, spec.model_bytes
    c_bytes = plan.client_param_count * spec.param_dtype_bytes

    edge_models, edge_w, edge_ready = {}, {}, {}
    for e in topo.edges:
        server = state.server_models[e]
        parts_up, copies, ups, branch_ends = [], [], [], []
        for cid in topo.cellular[e]:
            parts = [p.copy() for p in state.client_models[cid]]
            copy = server.copy()
            ready, s_ready = None, None
            for idx in local_batches(state, cid):
                out = split_batch(state, rec, cid, e, parts, copy, idx, fail_rng, ready, s_ready, parallel_server=True)
                parts, copy, ready, s_ready = out.client_parts, out.server, out.ready, out.server_ready
                if not out.completed:
                    rec.notes.append(f"batch of {cid} skipped after a failed exchange")
            state.client_models[cid] = parts
            copies.append((copy, state.weight(cid)))
            failed = sample_failure(topo.link(cid, e), fail_rng)
            ev = rec.transmit(MODEL, cid, e, c_bytes, after=[ready], failed_units=int(failed))
            ups.append(ev)
            branch_ends.append(s_ready)
            if not failed:
                parts_up.append((parts, state.weight(cid)))

        members: list[tuple[Model, float]] = []
        if topo.cellular[e]:
            new_server = fedavg(copies)
            if parts_up:
                new_client = [fedavg([(p[k], w) for p, w in parts_up]) for k in range(len(parts_up[0][0]))]
            else:
                prev = split_model(state.edge_models[e], plan)
                new_client = [prev[0]] + prev[2:]
            composed = join_models([new_client[0], new_server, *new_client[1:]], spec)
            members.append((composed, sum(w for _, w in copies)))
        agg_deps = ups + branch_ends
        n_contrib = len(copies) + len(parts_up)

        for cl in topo.clusters[e]:
            trained, start, done, _ = run_pipeline(state, rec, cl, state.cluster_models[cl.cluster_id], fail_rng, {})
            state.cluster_models[cl.cluster_id] = trained
            relay_evs = _relay_to_terminus(state, rec, cl, trained, done, fail_rng)
            if relay_evs is None:
                rec.notes.append(f"cluster {cl.cluster_id}: piece relay failed")
                continue
            failed = sample_failure(topo.link(cl.terminus, e), fail_rng)
            ev = rec.transmit(MODEL, cl.terminus, e, W, after=relay_evs, failed_units=int(failed))
            agg_deps.append(ev)
            if not failed:
                members.append((trained, state.weight(start)))
                n_contrib += 1

        if members:
            edge_models[e] = fedavg(members)
            edge_w[e] = sum(w for _, w in members)
            edge_ready[e] = [rec.aggregate(e, P, n_contrib, after=agg_deps)]
        else:
            edge_models[e] = state.edge_models[e]
            edge_w[e] = 0.0
            edge_ready[e] = agg_deps

    synced = proto.main_sync_every > 0 and (r + 1) % proto.main_sync_every == 0
    if synced and any(w > 0 for w in edge_w.values()):
        new_global, edge_models, at = edge_to_main(state, rec, edge_models, edge_w, edge_ready, fail_rng)
        if new_global is not None:
            state.global_model = new_global
        edge_ready = {e: [at[e]] for e in topo.edges}
    state.edge_models = edge_models

    for e in topo.edges:
        parts = split_model(edge_models[e], plan)
        state.server_models[e] = parts[1]
        client_side = [parts[0]] + parts[2:]
        receivers = topo.cellular[e]
        if receivers:
            fails = [sample_failure(topo.link(e, cid), fail_rng) for cid in receivers]
            rec.broadcast(
                MODEL, e, receivers, c_bytes, after=edge_ready[e], units=len(receivers), failed_units=sum(fails)
            )
            for cid, failed in zip(receivers, fails):
                if not failed:
                    state.client_models[cid] = [p.copy() for p in client_side]
        for cl in topo.clusters[e]:
            failed = sample_failure(topo.link(e, cl.terminus), fail_rng)
            ev = rec.transmit(MODEL, e, cl.terminus, W, after=edge_ready[e], failed_units=int(failed))
            if failed:
                continue
            state.cluster_models[cl.cluster_id] = edge_models[e].copy()
            _relay_from_terminus(state, rec, cl, ev, fail_rng)

    aborted = not any(w > 0 for w in edge_w.values())
    if aborted:
        rec.notes.append("nothing reached any edge server; round aborted")
    state.round_index += 1
    return RoundResult(state, rec.finish(aborted=aborted))


def _relay_to_terminus(state, rec, cl, model, done, fail_rng) -> list[int | None] | None:
    """Each piece holder forwards its trained piece to the terminus over the chain."""
    spec = state.spec
    order = pipeline_order(cl, state.round_index)
    bounds = balanced_layer_cuts(spec, min(len(order), len(spec.layers)))
    evs: list[int | None] = []
    for (lo, hi), holder in zip(bounds, order):
        nbytes = spec.sub(lo, hi).model_bytes
        ev = done.get(holder)
        for a, b in _chain_path(cl, holder, cl.terminus):
            failed = sample_failure(rec.topology.link(a, b), fail_rng)
            ev = rec.transmit(PIECES, a, b, nbytes, after=[ev], failed_units=int(failed))
            if failed:
                return None
        evs.append(ev)
    return evs


def _relay_from_terminus(state, rec, cl, after, fail_rng) -> None:
    """The terminus sends each member the piece it holds in the next round's pipeline."""
    spec = state.spec
    order = pipeline_order(cl, state.round_index + 1)
    bounds = balanced_layer_cuts(spec, min(len(order), len(spec.layers)))
    for (lo, hi), holder in zip(bounds, order):
        nbytes = spec.sub(lo, hi).model_bytes
        ev = after
        for a, b in _chain_path(cl, cl.terminus, holder):
            failed = sample_failure(rec.topology.link(a, b), fail_rng)
            ev = rec.transmit(PIECES, a, b, nbytes, after=[ev], failed_units=int(failed))
            if failed:
                break
