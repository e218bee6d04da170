"""One split-training exchange between a client and a server part.

Shared by SL and cellular HFSL. The arithmetic is exactly the unsplit
forward/backward pass, so split and unsplit training agree bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..netsim import sample_failure
from ..nn import Model, backprop, count_flops, forward, forward_flops, loss_and_grad, sgd_step
from ..trace import ACTIVATION, CUT_GRAD, LABELS, RoundRecorder
from .common import batch_of
from .state import ExperimentState


@dataclass
class SplitOutcome:
    client_parts: list[Model]  # [C] or [C, T]
    server: Model
    ready: int | None  # event after which the client may continue
    server_ready: int | None
    completed: bool


def split_batch(
    state: ExperimentState,
    rec: RoundRecorder,
    cid: str,
    edge: str,
    client_parts: list[Model],
    server: Model,
    idx: np.ndarray,
    fail_rng: np.random.Generator,
    after: int | None,
    server_after: int | None = None,
    parallel_server: bool = False,
) -> SplitOutcome:
    """Train one minibatch across the cut.

    Each transmission is one failure unit; a failure skips the rest of the
    batch, leaving whichever parts already stepped as they are.
    """
    topo, lr = state.topology, state.protocol.lr
    plan = state.plan
    assert plan is not None
    s_bytes = state.spec.param_dtype_bytes
    up, down = topo.link(cid, edge), topo.link(edge, cid)
    batch = batch_of(state.train, idx)
    n = len(batch)
    client = client_parts[0]
    tail = client_parts[1] if len(client_parts) > 1 else None

    def tx(kind, src, dst, nbytes, deps):
        link = topo.link(src, dst)
        failed = sample_failure(link, fail_rng)
        return rec.transmit(kind, src, dst, nbytes, after=deps, failed_units=int(failed)), failed

    c_cache, act = forward(client, batch.inputs)
    ev = rec.compute(cid, forward_flops(plan.client_spec, n), "client_forward", after=[after])
    up_ev, failed = tx(ACTIVATION, cid, edge, plan.b * n * s_bytes, [ev])
    deps = [up_ev]
    if plan.label_sharing:
        lab_ev, lab_failed = tx(LABELS, cid, edge, n * state.label_bytes, [ev])
        deps.append(lab_ev)
        failed = failed or lab_failed
    if failed:
        return SplitOutcome(client_parts, server, up_ev, server_after, False)

    s_cache, s_out = forward(server, act)
    if tail is None:
        _, g_logits = loss_and_grad(s_out, batch.labels)
        s_grads, g_act = backprop(server, s_cache, g_logits)
        new_server = sgd_step(server, s_grads, lr)
        s_ev = rec.compute(
            edge, count_flops(plan.server_spec, n), "server_train", after=deps + [server_after], parallel=parallel_server
        )
    else:
        f_ev = rec.compute(
            edge, forward_flops(plan.server_spec, n), "server_forward", after=deps + [server_after],
            parallel=parallel_server,
        )
        mid_ev, failed = tx(ACTIVATION, edge, cid, plan.b_tail * n * s_bytes, [f_ev])
        if failed:
            return SplitOutcome(client_parts, server, mid_ev, f_ev, False)
        t_cache, logits = forward(tail, s_out)
        _, g_logits = loss_and_grad(logits, batch.labels)
        t_grads, g_mid = backprop(tail, t_cache, g_logits)
        tail = sgd_step(tail, t_grads, lr)
        t_ev = rec.compute(cid, count_flops(plan.tail_spec, n), "client_tail", after=[mid_ev])
        back_ev, failed = tx(CUT_GRAD, cid, edge, plan.b_tail * n * s_bytes, [t_ev])
        if failed:
            return SplitOutcome([client, tail], server, back_ev, f_ev, False)
        s_grads, g_act = backprop(server, s_cache, g_mid)
        new_server = sgd_step(server, s_grads, lr)
        s_ev = rec.compute(
            edge, 2 * forward_flops(plan.server_spec, n), "server_backward", after=[back_ev, f_ev],
            parallel=parallel_server,
        )
    down_ev, failed = tx(CUT_GRAD, edge, cid, plan.b * n * s_bytes, [s_ev])
    parts = [client] + ([tail] if tail is not None else [])
    if failed:
        return SplitOutcome(parts, new_server, down_ev, s_ev, False)
    c_grads = backprop(client, c_cache, g_act)[0]
    parts[0] = sgd_step(client, c_grads, lr)
    b_ev = rec.compute(cid, 2 * forward_flops(plan.client_spec, n), "client_backward", after=[down_ev])
    return SplitOutcome(parts, new_server, b_ev, s_ev, True)
