"""Training loops and server-tier helpers used by several protocols."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..datasets import Dataset
from ..netsim import sample_failure
from ..nn import Batch, Model, predict, train_step
from ..partition import ParamVector, fedavg, flatten, pad_to_segments, segment_length, unflatten
from ..trace import MODEL, RoundRecorder
from .state import ExperimentState


def local_batches(
    state: ExperimentState, cid: str, indices: np.ndarray | None = None, extra: tuple[int, ...] = ()
) -> list[np.ndarray]:
    """Minibatch index arrays for one client's local epochs this round.

    Each epoch reshuffles the shard with the client's ``data`` stream for
    this round; ``extra`` keys repeated passes within a round.
    """
    idx = state.shards[cid].indices if indices is None else indices
    rng = state.streams.rng("data", state.round_index, state.client_pos(cid), *extra)
    bs = state.protocol.batch_size
    out = []
    for _ in range(state.protocol.local_epochs):
        perm = rng.permutation(idx)
        out.extend(perm[s : s + bs] for s in range(0, perm.shape[0], bs))
    return out


def batch_of(data: Dataset, idx: np.ndarray) -> Batch:
    return Batch(data.inputs[idx], data.labels[idx])


def train_full(model: Model, data: Dataset, batches: Sequence[np.ndarray], lr: float) -> Model:
    for idx in batches:
        model, _ = train_step(model, batch_of(data, idx), lr)
    return model


def overlay_segments(model: Model, source: np.ndarray, ids, M: int) -> Model:
    """Copy segments ``ids`` of the padded vector ``source`` into ``model``."""
    pv = flatten(model)
    seg = segment_length(len(pv), M)
    padded = pad_to_segments(pv.scalars, M).copy()
    for s in ids:
        padded[s * seg : (s + 1) * seg] = source[s * seg : (s + 1) * seg]
    return unflatten(ParamVector(padded[: len(pv)].copy(), pv.spec_fingerprint), model.spec)


def evaluate(model_or_parts, test_set: Dataset) -> float:
    """Argmax accuracy over the whole test set."""
    pred = predict(model_or_parts, test_set.inputs)
    return float(np.mean(pred == test_set.labels))


def edge_to_main(
    state: ExperimentState,
    rec: RoundRecorder,
    edge_models: dict[str, Model],
    edge_weights: dict[str, float],
    ready: dict[str, list],
    fail_rng: np.random.Generator,
) -> tuple[Model | None, dict[str, Model], dict[str, int | None]]:
    """Optional horizontal averaging, upload to the main server, FedAvg, download.

    Edges with zero weight had nothing delivered and are left out of the
    averages. Returns the new global model (``None`` if nothing reached the
    main server), the edge models afterwards and the event at which each
    edge holds its model.
    """
    topo = state.topology
    P, W = state.spec.param_count, state.spec.model_bytes
    models = dict(edge_models)
    active = [e for e in topo.edges if edge_weights.get(e, 0) > 0]
    at: dict[str, list] = {e: list(ready.get(e, [])) for e in topo.edges}

    if state.protocol.horizontal_enabled and len(topo.edges) > 1:
        inbox: dict[str, list[str]] = {e: [] for e in topo.edges}
        for e in active:
            for n in topo.edge_neighbors[e]:
                ev = rec.transmit(MODEL, e, n, W, after=at[e])
                if not sample_failure(topo.link(e, n), fail_rng):
                    inbox[n].append(e)
                    at[n].append(ev)
        mixed = {}
        for e in active:
            items = [(models[e], edge_weights[e])] + [(models[s], edge_weights[s]) for s in inbox[e]]
            mixed[e] = fedavg(items)
            at[e] = [rec.aggregate(e, P, len(items), after=at[e])]
        models.update(mixed)

    delivered, ups = [], []
    for e in active:
        ev = rec.transmit(MODEL, e, topo.main, W, after=at[e])
        ups.append(ev)
        if not sample_failure(topo.link(e, topo.main), fail_rng):
            delivered.append(e)
    new_global = None
    main_ready = None
    if delivered:
        new_global = fedavg([(models[e], edge_weights[e]) for e in delivered])
        main_ready = rec.aggregate(topo.main, P, len(delivered), after=ups)
    out_ready: dict[str, int | None] = {}
    for e in topo.edges:
        if new_global is None:
            out_ready[e] = max(at[e], default=None) if at[e] else None
            continue
        ev = rec.transmit(MODEL, topo.main, e, W, after=[main_ready])
        if sample_failure(topo.link(topo.main, e), fail_rng):
            out_ready[e] = max(at[e], default=None) if at[e] else ev
        else:
            models[e] = new_global.copy()
            out_ready[e] = ev
    return new_global, models, out_ready
