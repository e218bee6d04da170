"""Hybrid split federated learning: segment-wise transmission and aggregation.

Every client trains the full model; only ``m`` of the ``M`` equal-size
parameter segments travel per exchange. Edge servers average each segment
over whoever delivered it and keep their previous value for the rest.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..netsim import Cluster, Link, sample_failure
from ..nn import count_flops
from ..partition import aggregate_masked, flatten, pad_to_segments, segment_length, unflatten
from ..trace import SEGMENTS, RoundRecorder
from .common import edge_to_main, local_batches, overlay_segments, train_full
from .state import ExperimentState, RoundResult

FailFn = Callable[[Link, np.random.Generator], bool]


def d2d_chain_pass(
    rec: RoundRecorder,
    cluster: Cluster,
    vectors: dict[str, np.ndarray],
    weights: dict[str, float],
    chosen: dict[str, list[int]],
    M: int,
    seg_bytes: int,
    fail_rng: np.random.Generator,
    fail: FailFn = sample_failure,
    after: dict[str, int | None] | None = None,
) -> tuple[np.ndarray, np.ndarray, int | None]:
    """Pass a running segment-wise mean along the chain to its terminus.

    ``vectors`` are padded parameter vectors. Each member folds its chosen
    segments into the running mean with incremental weights and forwards
    every populated segment to the next member. A segment lost on a hop
    reverts to the running value from before the sender's contribution, so
    the sender's share is dropped and the chain carries on.

    Returns ``(running, seg_w, ready)``: the terminus' vector, per-segment
    accumulated weights (0 = segment empty) and the event at which the
    terminus holds the aggregate.
    """
    after = after or {}
    width = next(iter(vectors.values())).shape[0]
    seg = width // M
    running = np.zeros(width)
    seg_w = np.zeros(M)
    prev_running, prev_w = running.copy(), seg_w.copy()
    arrival: int | None = None
    chain = cluster.chain
    for i, cid in enumerate(chain):
        x, w = vectors[cid], weights[cid]
        prev_running, prev_w = running.copy(), seg_w.copy()
        for s in chosen[cid]:
            lo, hi = s * seg, (s + 1) * seg
            total = seg_w[s] + w
            if seg_w[s] == 0.0:
                running[lo:hi] = x[lo:hi]
            else:
                running[lo:hi] += (w / total) * (x[lo:hi] - running[lo:hi])
            seg_w[s] = total
        ready = [arrival, after.get(cid)]
        if i == len(chain) - 1:
            return running, seg_w, max((a for a in ready if a is not None), default=None)
        nxt = chain[i + 1]
        link = rec.topology.link(cid, nxt)
        populated = [s for s in range(M) if seg_w[s] > 0]
        lost = [s for s in populated if fail(link, fail_rng)]
        arrival = rec.transmit(
            SEGMENTS, cid, nxt, len(populated) * seg_bytes, after=ready, units=len(populated), failed_units=len(lost)
        )
        for s in lost:
            lo, hi = s * seg, (s + 1) * seg
            running[lo:hi] = prev_running[lo:hi]
            seg_w[s] = prev_w[s]
    raise AssertionError("unreachable")


def run_hsfl_round(state: ExperimentState) -> RoundResult:
    topo, proto = state.topology, state.protocol
    r = state.round_index
    M, m = proto.M, proto.m
    P = state.spec.param_count
    seg = segment_length(P, M)
    seg_bytes = seg * state.spec.param_dtype_bytes
    rec = RoundRecorder(topo, "hsfl", r, proto.aggregation_cost)
    fail_rng = state.streams.rng("failures", r)
    policy = state.segment_policy()
    N = state.n_clients

    def choose(key: int, v: int) -> list[int]:
        return policy.choose(M, m, state.streams.rng("segments", r, key, v), requester=key)

    client_ready: dict[str, int | None] = {cid: None for cid in topo.clients}
    edge_ready: dict[str, list] = {e: [] for e in topo.edges}
    delivered_any = {e: False for e in topo.edges}
    edge_models = dict(state.edge_models)
    for v in range(proto.vertical_rounds):
        extra = (v,) if v else ()
        for e in topo.edges:
            rows, seg_w, ups = [], [], []
            members = topo.edge_clients(e)
            trained = {}
            for cid in members:
                batches = local_batches(state, cid, extra=extra)
                model = train_full(state.client_models[cid][0], state.train, batches, proto.lr)
                state.client_models[cid] = [model]
                trained[cid] = pad_to_segments(flatten(model).scalars, M)
                client_ready[cid] = rec.compute(
                    cid, count_flops(state.spec, sum(len(b) for b in batches)), "train", after=[client_ready[cid]]
                )
            for cid in topo.cellular[e]:
                ids = choose(state.client_pos(cid), v)
                link = topo.link(cid, e)
                lost = {s for s in ids if sample_failure(link, fail_rng)}
                ups.append(
                    rec.transmit(
                        SEGMENTS, cid, e, m * seg_bytes, after=[client_ready[cid]], units=m, failed_units=len(lost)
                    )
                )
                row_w = np.zeros(M)
                row_w[[s for s in ids if s not in lost]] = state.weight(cid)
                rows.append(trained[cid])
                seg_w.append(row_w)
            for cl in topo.clusters[e]:
                chosen = {cid: choose(state.client_pos(cid), v) for cid in cl.chain}
                vec, cw, t_ready = d2d_chain_pass(
                    rec,
                    cl,
                    {cid: trained[cid] for cid in cl.chain},
                    {cid: state.weight(cid) for cid in cl.chain},
                    chosen,
                    M,
                    seg_bytes,
                    fail_rng,
                    after=client_ready,
                )
                populated = [s for s in range(M) if cw[s] > 0]
                link = topo.link(cl.terminus, e)
                lost = {s for s in populated if sample_failure(link, fail_rng)}
                ups.append(
                    rec.transmit(
                        SEGMENTS,
                        cl.terminus,
                        e,
                        len(populated) * seg_bytes,
                        after=[t_ready],
                        units=len(populated),
                        failed_units=len(lost),
                    )
                )
                row_w = cw.copy()
                row_w[list(lost)] = 0.0
                rows.append(vec)
                seg_w.append(row_w)
            contributors = sum(1 for w in seg_w if w.any())
            if contributors:
                delivered_any[e] = True
                fallback = flatten(edge_models[e])
                agg = aggregate_masked(np.stack(rows), np.stack(seg_w), fallback, M)
                edge_models[e] = unflatten(agg, state.spec)
                edge_ready[e] = [rec.aggregate(e, P, contributors, after=ups)]
            else:
                edge_ready[e] = ups

        if v == proto.vertical_rounds - 1:
            if not any(delivered_any.values()):
                rec.notes.append("no segment reached any edge server; round aborted")
                state.round_index += 1
                return RoundResult(state, rec.finish(aborted=True))
            weights = {e: state.edge_weight(e) if delivered_any[e] else 0.0 for e in topo.edges}
            new_global, edge_models, at = edge_to_main(state, rec, edge_models, weights, edge_ready, fail_rng)
            if new_global is not None:
                state.global_model = new_global
            edge_ready = {e: [at[e]] for e in topo.edges}

        for ei, e in enumerate(topo.edges):
            _downlink(state, rec, e, edge_models[e], choose(N + ei, v), seg_bytes, fail_rng, edge_ready[e], client_ready)
    state.edge_models = edge_models
    state.round_index += 1
    return RoundResult(state, rec.finish())


def _downlink(state, rec, e, model, ids, seg_bytes, fail_rng, after, client_ready) -> None:
    """Broadcast segments ``ids`` of the edge model; D2D termini relay them down their chain."""
    topo, M = state.topology, state.protocol.M
    termini = [cl.terminus for cl in topo.clusters[e]]
    receivers = topo.cellular[e] + termini
    if not receivers:
        return
    source = pad_to_segments(flatten(model).scalars, M)
    got = {}
    for cid in receivers:
        link = topo.link(e, cid)
        got[cid] = [s for s in ids if not sample_failure(link, fail_rng)]
    lost = sum(len(ids) - len(g) for g in got.values())
    b = rec.broadcast(SEGMENTS, e, receivers, len(ids) * seg_bytes, after=after, units=len(ids) * len(receivers), failed_units=lost)
    for cid in topo.cellular[e]:
        state.client_models[cid] = [overlay_segments(state.client_models[cid][0], source, got[cid], M)]
        client_ready[cid] = b
    for cl in topo.clusters[e]:
        chain = list(cl.chain)
        holder, have, ev = chain[-1], got[chain[-1]], b
        state.client_models[holder] = [overlay_segments(state.client_models[holder][0], source, have, M)]
        client_ready[holder] = b
        for nxt in reversed(chain[:-1]):
            if not have:
                break
            link = topo.link(holder, nxt)
            arrived = [s for s in have if not sample_failure(link, fail_rng)]
            ev = rec.transmit(
                SEGMENTS, holder, nxt, len(have) * seg_bytes, after=[ev], units=len(have),
                failed_units=len(have) - len(arrived),
            )
            state.client_models[nxt] = [overlay_segments(state.client_models[nxt][0], source, arrived, M)]
            client_ready[nxt] = ev
            holder, have = nxt, arrived
