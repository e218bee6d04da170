from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridml.errors import ConfigError, FormatError, IncompatibilityError
from hybridml.nn import ModelSpec, forward, init_model
from hybridml.partition import (
    ParamVector,
    RandomSegmentPolicy,
    ReceiverSpecifiedPolicy,
    aggregate_masked,
    aggregate_segments,
    balanced_layer_cuts,
    cut_at_layer,
    deserialize_param_vector,
    fedavg,
    flatten,
    join_models,
    join_segments,
    make_segments,
    round_robin_schedule,
    serialize_param_vector,
    split_model,
    unflatten,
)

FP = b"\x00" * 8


def pv(values):
    return ParamVector(np.asarray(values, dtype=float), FP)


class TestFlatten:
    def test_round_trip(self):
        m = init_model(ModelSpec.mlp([3, 5, 2]), 4)
        assert unflatten(flatten(m), m.spec).params_equal(m)

    def test_length(self):
        m = init_model(ModelSpec.mlp([3, 5, 2]), 4)
        assert len(flatten(m)) == 3 * 5 + 5 + 5 * 2 + 2

    def test_order_weights_then_biases(self):
        m = init_model(ModelSpec.mlp([2, 2]), 0)
        m.biases[0][:] = [7.0, 8.0]
        flat = flatten(m).scalars
        assert flat[:4].tolist() == m.weights[0].ravel().tolist()
        assert flat[4:].tolist() == [7.0, 8.0]

    def test_mismatched_spec(self):
        m = init_model(ModelSpec.mlp([3, 5, 2]), 4)
        with pytest.raises(IncompatibilityError):
            unflatten(flatten(m), ModelSpec.mlp([3, 4, 2]))

    def test_serialization_round_trip(self):
        m = init_model(ModelSpec.mlp([3, 5, 2]), 4)
        p = flatten(m)
        data = serialize_param_vector(p)
        assert data[:4] == b"HMPV"
        assert deserialize_param_vector(data).equals(p)

    def test_serialization_truncated(self):
        data = serialize_param_vector(flatten(init_model(ModelSpec.mlp([3, 2]), 0)))
        with pytest.raises(FormatError):
            deserialize_param_vector(data[:-3])


class TestSegments:
    def test_padding_example(self):
        segs = make_segments(pv([1, 2, 3, 4, 5]), 2)
        assert segs[0].payload.tolist() == [1, 2, 3]
        assert segs[1].payload.tolist() == [4, 5, 0]
        assert [s.logical_len for s in segs] == [3, 2]
        assert {s.padded_len for s in segs} == {3}

    def test_single_segment(self):
        segs = make_segments(pv([1, 2, 3]), 1)
        assert len(segs) == 1 and segs[0].payload.tolist() == [1, 2, 3]

    def test_too_many_segments(self):
        with pytest.raises(ConfigError):
            make_segments(pv([1, 2]), 3)

    @given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e6, 1e6)), st.data())
    def test_round_trip(self, values, data):
        M = data.draw(st.integers(1, values.shape[0]))
        segs = make_segments(pv(values), M)
        assert [s.segment_id for s in segs] == list(range(M))
        assert np.array_equal(join_segments(segs, values.shape[0], FP).scalars, values)
        # padding is zero and sits only at the tail
        flat = np.concatenate([s.payload for s in segs])
        assert np.all(flat[values.shape[0] :] == 0)


class TestAggregateSegments:
    def _received(self, senders):
        out = {}
        for values, ids in senders:
            segs = make_segments(pv(values), 2)
            for i in ids:
                out.setdefault(i, []).append((segs[i], 1.0))
        return out

    def test_mean(self):
        got = aggregate_segments(self._received([([1, 2, 3, 4], [0, 1]), ([3, 4, 5, 6], [0, 1])]), pv([0] * 4))
        assert got.scalars.tolist() == [2, 3, 4, 5]

    def test_partial(self):
        got = aggregate_segments(self._received([([1, 2, 3, 4], [0]), ([3, 4, 5, 6], [0, 1])]), pv([0] * 4))
        assert got.scalars.tolist() == [2, 3, 5, 6]

    def test_fallback(self):
        got = aggregate_segments(self._received([([1, 2, 3, 4], [0]), ([3, 4, 5, 6], [0])]), pv([9] * 4))
        assert got.scalars.tolist() == [2, 3, 9, 9]

    def test_inconsistent_M(self):
        a = make_segments(pv([1, 2, 3, 4]), 2)
        b = make_segments(pv([1, 2, 3, 4]), 4)
        with pytest.raises(IncompatibilityError):
            aggregate_segments({0: [(a[0], 1.0), (b[0], 1.0)]}, pv([0] * 4))

    def test_padding_neutral(self):
        got = aggregate_segments(self._received([([1, 2, 3], [0, 1]), ([5, 6, 7], [1])]), pv([0, 0, 0]))
        assert got.scalars.tolist() == [1, 2, 5]

    def test_masked_matches_dict_form(self, rng):
        vecs = rng.normal(size=(3, 11))
        M = 4
        w = np.array([[1, 0, 2, 0], [3, 3, 0, 0], [1, 1, 1, 0]], dtype=float)
        fb = pv(rng.normal(size=11))
        received = {}
        for i in range(3):
            segs = make_segments(pv(vecs[i]), M)
            for s in range(M):
                if w[i, s] > 0:
                    received.setdefault(s, []).append((segs[s], w[i, s]))
        a = aggregate_segments(received, fb)
        b = aggregate_masked(vecs, w, fb, M)
        assert np.array_equal(a.scalars, b.scalars)


class TestFedAvg:
    def test_idempotent(self):
        m = init_model(ModelSpec.mlp([3, 2]), 0)
        assert fedavg([(m, 1.0), (m.copy(), 1.0)]).params_equal(m)

    def test_mean(self):
        spec = ModelSpec.mlp([1, 2])
        a = unflatten(ParamVector(np.array([0.0, 2.0, 0.0, 0.0]), spec.fingerprint()), spec)
        b = unflatten(ParamVector(np.array([4.0, 0.0, 0.0, 0.0]), spec.fingerprint()), spec)
        assert flatten(fedavg([(a, 1.0), (b, 1.0)])).scalars[:2].tolist() == [2.0, 1.0]

    def test_empty(self):
        with pytest.raises(ConfigError):
            fedavg([])

    def test_weighted(self):
        spec = ModelSpec.mlp([1, 1])
        a = unflatten(ParamVector(np.array([0.0, 0.0]), spec.fingerprint()), spec)
        b = unflatten(ParamVector(np.array([4.0, 8.0]), spec.fingerprint()), spec)
        assert flatten(fedavg([(a, 3.0), (b, 1.0)])).scalars.tolist() == [1.0, 2.0]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**16), st.integers(1, 5), st.sampled_from([1, 2, 3, 7, 16]))
    def test_segment_equivalence_bitwise(self, seed, k, M):
        spec = ModelSpec.mlp([3, 4, 2])
        models = [init_model(spec, seed + i) for i in range(k)]
        weights = [float(10 + i) for i in range(k)]
        received = {}
        for m, w in zip(models, weights):
            for seg in make_segments(flatten(m), M):
                received.setdefault(seg.segment_id, []).append((seg, w))
        seg_avg = aggregate_segments(received, flatten(models[0]))
        assert np.array_equal(seg_avg.scalars, flatten(fedavg(list(zip(models, weights)))).scalars)


class TestPolicies:
    def test_random_distinct_sorted(self, rng):
        ids = RandomSegmentPolicy().choose(10, 4, rng)
        assert ids == sorted(set(ids)) and len(ids) == 4 and all(0 <= i < 10 for i in ids)

    def test_random_seeded(self):
        a = RandomSegmentPolicy().choose(10, 4, np.random.default_rng(1))
        b = RandomSegmentPolicy().choose(10, 4, np.random.default_rng(1))
        assert a == b

    def test_round_robin(self):
        policy = ReceiverSpecifiedPolicy(round_robin_schedule(1))
        assert policy.choose(4, 2, None, requester=0) == [2, 3]
        assert policy.choose(4, 2, None, requester=1) == [0, 1]

    def test_bad_schedule(self):
        policy = ReceiverSpecifiedPolicy(lambda r, M, m: [0, 0])
        with pytest.raises(ConfigError):
            policy.choose(4, 2, None)


class TestCuts:
    def test_counting_example(self):
        plan = cut_at_layer(ModelSpec.mlp([4, 8, 3]), 1)
        assert plan.b == 8
        assert plan.client_spec.param_count == 40
        assert plan.gamma == Fraction(40, 67)

    def test_compose(self):
        spec = ModelSpec.mlp([4, 8, 6, 5, 3])
        plan = cut_at_layer(spec, 2)
        assert plan.client_spec.layers + plan.server_spec.layers == spec.layers

    def test_u_shaped(self):
        spec = ModelSpec.mlp([4, 8, 6, 3])
        plan = cut_at_layer(spec, 1, label_sharing=False)
        assert plan.tail_spec.layers == spec.layers[-1:]
        assert plan.client_spec.layers + plan.server_spec.layers + plan.tail_spec.layers == spec.layers
        assert plan.exchange_width == 8 + 6

    @pytest.mark.parametrize("cut", [0, 3])
    def test_out_of_range(self, cut):
        with pytest.raises(ConfigError):
            cut_at_layer(ModelSpec.mlp([4, 8, 6, 3]), cut)

    def test_u_shaped_needs_three_layers(self):
        with pytest.raises(ConfigError):
            cut_at_layer(ModelSpec.mlp([4, 8, 3]), 1, label_sharing=False)

    def test_gamma_monotone(self):
        spec = ModelSpec.mlp([4, 8, 6, 5, 3])
        gammas = [cut_at_layer(spec, c).gamma for c in range(1, 4)]
        assert gammas == sorted(gammas) and all(0 < g < 1 for g in gammas)

    def test_split_forward_transparent(self, rng):
        spec = ModelSpec.mlp([4, 8, 6, 3])
        m = init_model(spec, 0)
        x = rng.normal(size=(5, 4))
        for label_sharing, cut in ((True, 1), (True, 2), (False, 1)):
            parts = split_model(m, cut_at_layer(spec, cut, label_sharing))
            y = x
            for p in parts:
                _, y = forward(p, y)
            assert np.array_equal(y, forward(m, x)[1])
            assert join_models(parts, spec).params_equal(m)

    def test_balanced_cuts(self):
        spec = ModelSpec.mlp([10, 10, 10, 10, 2])
        bounds = balanced_layer_cuts(spec, 2)
        assert bounds == [(0, 2), (2, 4)]
        assert balanced_layer_cuts(spec, 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]
        with pytest.raises(ConfigError):
            balanced_layer_cuts(spec, 5)
