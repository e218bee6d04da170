"""Segmenting and cutting parameter vectors, and averaging them."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, FormatError, IncompatibilityError
from .nn import Model, ModelSpec


@dataclass(eq=False)
class ParamVector:
    scalars: np.ndarray
    spec_fingerprint: bytes

    def __len__(self) -> int:
        return self.scalars.shape[0]

    def equals(self, other: "ParamVector") -> bool:
        return self.spec_fingerprint == other.spec_fingerprint and np.array_equal(self.scalars, other.scalars)


def flatten(model: Model) -> ParamVector:
    """Weights (row-major) then biases, layer by layer."""
    parts = []
    for w, b in zip(model.weights, model.biases):
        parts.append(w.ravel())
        parts.append(b)
    return ParamVector(np.concatenate(parts).astype(np.float64, copy=False), model.spec.fingerprint())


def unflatten(pv: ParamVector, spec: ModelSpec) -> Model:
    if pv.spec_fingerprint != spec.fingerprint():
        raise IncompatibilityError("parameter vector was flattened from a different spec")
    if len(pv) != spec.param_count:
        raise IncompatibilityError(f"expected {spec.param_count} scalars, got {len(pv)}")
    weights, biases, pos = [], [], 0
    for layer in spec.layers:
        n_w = layer.in_width * layer.out_width
        weights.append(pv.scalars[pos : pos + n_w].reshape(layer.out_width, layer.in_width).copy())
        pos += n_w
        biases.append(pv.scalars[pos : pos + layer.out_width].copy())
        pos += layer.out_width
    return Model(spec, weights, biases)


_PV_MAGIC = b"HMPV"


def serialize_param_vector(pv: ParamVector) -> bytes:
    """``HMPV`` | 8-byte spec fingerprint | uint64 LE length | float64 LE scalars."""
    return (
        _PV_MAGIC
        + pv.spec_fingerprint
        + struct.pack("<Q", len(pv))
        + np.ascontiguousarray(pv.scalars, dtype="<f8").tobytes()
    )


def deserialize_param_vector(data: bytes) -> ParamVector:
    if data[:4] != _PV_MAGIC:
        raise FormatError("bad parameter-vector magic", 0)
    if len(data) < 20:
        raise FormatError("truncated parameter-vector header", len(data))
    (n,) = struct.unpack_from("<Q", data, 12)
    if len(data) != 20 + 8 * n:
        raise FormatError(f"expected {n} scalars", 20)
    return ParamVector(np.frombuffer(data, dtype="<f8", offset=20).astype(np.float64), data[4:12])


# -- segments -----------------------------------------------------------------


@dataclass(eq=False)
class Segment:
    segment_id: int
    payload: np.ndarray
    logical_len: int
    padded_len: int
    M: int


def segment_length(total: int, M: int) -> int:
    if M < 1:
        raise ConfigError("segment count M must be >= 1")
    if M > total:
        raise ConfigError(f"segment count M={M} exceeds parameter count {total}")
    return -(-total // M)


def pad_to_segments(scalars: np.ndarray, M: int) -> np.ndarray:
    seg = segment_length(scalars.shape[-1], M)
    pad = seg * M - scalars.shape[-1]
    if pad == 0:
        return np.ascontiguousarray(scalars, dtype=np.float64)
    widths = [(0, 0)] * (scalars.ndim - 1) + [(0, pad)]
    return np.pad(scalars.astype(np.float64, copy=False), widths)


def make_segments(pv: ParamVector, M: int) -> list[Segment]:
    """Split into M equal-size segments; zero padding only at the tail."""
    total = len(pv)
    seg = segment_length(total, M)
    padded = pad_to_segments(pv.scalars, M)
    return [
        Segment(
            segment_id=i,
            payload=padded[i * seg : (i + 1) * seg].copy(),
            logical_len=max(0, min(total, (i + 1) * seg) - i * seg),
            padded_len=seg,
            M=M,
        )
        for i in range(M)
    ]


def join_segments(segments: Sequence[Segment], total: int, fingerprint: bytes) -> ParamVector:
    ordered = sorted(segments, key=lambda s: s.segment_id)
    if [s.segment_id for s in ordered] != list(range(ordered[0].M)):
        raise IncompatibilityError("segment set is incomplete")
    return ParamVector(np.concatenate([s.payload for s in ordered])[:total].copy(), fingerprint)


def aggregate_segments(
    received: Mapping[int, Sequence[tuple[Segment, float]]], fallback: ParamVector
) -> ParamVector:
    """Segment-wise weighted mean; segments nobody sent keep the fallback values."""
    total = len(fallback)
    Ms = {seg.M for items in received.values() for seg, _ in items}
    if len(Ms) > 1:
        raise IncompatibilityError(f"segments disagree on M: {sorted(Ms)}")
    if not Ms:
        return ParamVector(fallback.scalars.copy(), fallback.spec_fingerprint)
    (M,) = Ms
    seg_len = segment_length(total, M)
    out = pad_to_segments(fallback.scalars, M).copy()
    for seg_id, items in sorted(received.items()):
        if not 0 <= seg_id < M:
            raise IncompatibilityError(f"segment id {seg_id} outside [0, {M})")
        if not items:
            continue
        for seg, w in items:
            if seg.segment_id != seg_id or seg.padded_len != seg_len:
                raise IncompatibilityError(f"segment {seg.segment_id} filed under id {seg_id}")
            if not w > 0:
                raise ConfigError("aggregation weights must be positive")
        rows = np.stack([seg.payload for seg, _ in items])
        weights = np.array([w for _, w in items], dtype=np.float64)
        out[seg_id * seg_len : (seg_id + 1) * seg_len] = kernels.weighted_mean_rows(rows, weights)
    return ParamVector(out[:total].copy(), fallback.spec_fingerprint)


def aggregate_masked(
    vectors: np.ndarray, seg_weights: np.ndarray, fallback: ParamVector, M: int
) -> ParamVector:
    """Same arithmetic as :func:`aggregate_segments` on a dense (senders x params) stack.

    ``seg_weights[i, s]`` is sender ``i``'s weight for segment ``s``; zero
    means not received.
    """
    total = len(fallback)
    seg_len = segment_length(total, M)
    stack = pad_to_segments(np.atleast_2d(vectors), M)
    out = kernels.segment_weighted_mean(
        stack, np.ascontiguousarray(seg_weights, dtype=np.float64), pad_to_segments(fallback.scalars, M), seg_len
    )
    return ParamVector(out[:total].copy(), fallback.spec_fingerprint)


def fedavg(models: Sequence[tuple[Model, float]]) -> Model:
    """Parameter-wise weighted mean, accumulated in list order."""
    if not models:
        raise ConfigError("fedavg needs at least one model")
    spec = models[0][0].spec
    for m, w in models:
        if m.spec != spec:
            raise IncompatibilityError("fedavg over models with different specs")
        if not w > 0:
            raise ConfigError("aggregation weights must be positive")
    rows = np.stack([flatten(m).scalars for m, _ in models])
    mean = kernels.weighted_mean_rows(rows, np.array([w for _, w in models], dtype=np.float64))
    return unflatten(ParamVector(mean, spec.fingerprint()), spec)


# -- segment choice ---------------------------------------------------------


class RandomSegmentPolicy:
    """Seeded uniform choice of m segment ids without replacement."""

    def choose(self, M: int, m: int, rng: np.random.Generator, requester=None) -> list[int]:
        if not 1 <= m <= M:
            raise ConfigError(f"need 1 <= m <= M, got m={m}, M={M}")
        return sorted(int(i) for i in rng.choice(M, size=m, replace=False))


class ReceiverSpecifiedPolicy:
    """The receiver asks for specific ids, e.g. a round-robin schedule.

    ``schedule(requester, M, m)`` must return m distinct ids in [0, M).
    """

    def __init__(self, schedule):
        self.schedule = schedule

    def choose(self, M: int, m: int, rng: np.random.Generator, requester=None) -> list[int]:
        ids = sorted(int(i) for i in self.schedule(requester, M, m))
        if len(ids) != m or len(set(ids)) != m or not all(0 <= i < M for i in ids):
            raise ConfigError(f"receiver schedule returned invalid ids {ids}")
        return ids


def round_robin_schedule(round_index: int):
    """Receiver policy: requester k asks for ids starting at (k + round) * m mod M."""

    def schedule(requester, M, m):
        start = ((requester or 0) + round_index) * m
        return [(start + j) % M for j in range(m)]

    return schedule


# -- layer cuts -------------------------------------------------------------


@dataclass(frozen=True)
class CutPlan:
    cut_layer: int
    client_spec: ModelSpec
    server_spec: ModelSpec
    b: int  # activation width at the cut, scalars per sample
    gamma: Fraction  # client-side share of the parameters
    label_sharing: bool
    tail_spec: ModelSpec | None = None  # client-held output layer when labels stay local
    b_tail: int = 0  # width at the second cut

    @property
    def exchange_width(self) -> int:
        """Scalars per sample crossing the network in each direction."""
        return self.b + self.b_tail

    @property
    def client_param_count(self) -> int:
        return self.client_spec.param_count + (self.tail_spec.param_count if self.tail_spec else 0)

    def parts(self) -> list[ModelSpec]:
        return [self.client_spec, self.server_spec] + ([self.tail_spec] if self.tail_spec else [])


def cut_at_layer(spec: ModelSpec, cut_layer: int, label_sharing: bool = True) -> CutPlan:
    """Client keeps layers [0, cut_layer); without label sharing it also keeps the last layer."""
    n = len(spec.layers)
    hi = n - 1 if label_sharing else n - 2
    if not 1 <= cut_layer <= hi:
        raise ConfigError(
            f"cut_layer {cut_layer} out of range [1, {hi}] for a {n}-layer model"
            + ("" if label_sharing else " without label sharing")
        )
    client = spec.sub(0, cut_layer)
    if label_sharing:
        server, tail = spec.sub(cut_layer, n), None
    else:
        server, tail = spec.sub(cut_layer, n - 1), spec.sub(n - 1, n)
    client_params = client.param_count + (tail.param_count if tail else 0)
    return CutPlan(
        cut_layer=cut_layer,
        client_spec=client,
        server_spec=server,
        b=spec.layers[cut_layer - 1].out_width,
        gamma=Fraction(client_params, spec.param_count),
        label_sharing=label_sharing,
        tail_spec=tail,
        b_tail=tail.layers[0].in_width if tail else 0,
    )


def _slice_model(model: Model, sub: ModelSpec, start: int) -> Model:
    stop = start + len(sub.layers)
    return Model(sub, [w.copy() for w in model.weights[start:stop]], [b.copy() for b in model.biases[start:stop]])


def split_model(model: Model, plan: CutPlan) -> list[Model]:
    """Client part, server part and (U-shaped plans) client tail."""
    parts = [_slice_model(model, plan.client_spec, 0), _slice_model(model, plan.server_spec, plan.cut_layer)]
    if plan.tail_spec is not None:
        parts.append(_slice_model(model, plan.tail_spec, len(model.spec.layers) - 1))
    return parts


def join_models(parts: Iterable[Model], spec: ModelSpec) -> Model:
    weights, biases = [], []
    for part in parts:
        weights.extend(w.copy() for w in part.weights)
        biases.extend(b.copy() for b in part.biases)
    return Model(spec, weights, biases)


def balanced_layer_cuts(spec: ModelSpec, pieces: int) -> list[tuple[int, int]]:
    """Contiguous layer ranges minimising the largest piece's parameter count.

    Ties resolve to the earliest cut positions.
    """
    n = len(spec.layers)
    if not 1 <= pieces <= n:
        raise ConfigError(f"cannot cut a {n}-layer model into {pieces} pieces")
    sizes = [l.param_count for l in spec.layers]
    prefix = [0]
    for s in sizes:
        prefix.append(prefix[-1] + s)
    inf = math.inf
    # best[k][i]: minimal max-piece size covering the first i layers with k pieces
    best = [[inf] * (n + 1) for _ in range(pieces + 1)]
    choice = [[0] * (n + 1) for _ in range(pieces + 1)]
    best[0][0] = 0
    for k in range(1, pieces + 1):
        for i in range(k, n + 1):
            for j in range(k - 1, i):
                cand = max(best[k - 1][j], prefix[i] - prefix[j])
                if cand < best[k][i]:
                    best[k][i], choice[k][i] = cand, j
    bounds, i = [], n
    for k in range(pieces, 0, -1):
        j = choice[k][i]
        bounds.append((j, i))
        i = j
    return bounds[::-1]
