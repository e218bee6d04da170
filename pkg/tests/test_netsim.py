from fractions import Fraction

import numpy as np
import pytest

from hybridml.errors import ConfigError, ProtocolError
from hybridml.netsim import (
    MB,
    Event,
    Link,
    Node,
    build_topology,
    compute_time,
    sample_failure,
    schedule_round,
    transmission_time,
)


class TestTopology:
    def test_star(self):
        topo = build_topology({"clients": 4, "rates": {"uplink": 10 * MB, "downlink": 50 * MB, "d2d": 5 * MB}})
        assert topo.clients == ["c0", "c1", "c2", "c3"]
        assert topo.link("c0", "edge0").datarate == 10 * MB
        assert topo.link("edge0", "c0").datarate == 50 * MB
        assert topo.link("edge0", "main").tier == "backbone"
        assert not topo.has_d2d

    def test_disconnected_client(self):
        cfg = {"clients": [{"id": "x", "kind": "cellular", "edge": "nowhere"}]}
        with pytest.raises(ConfigError, match="'x'"):
            build_topology(cfg)

    def test_d2d_client_outside_cluster(self):
        with pytest.raises(ConfigError, match="'d9'"):
            build_topology({"clients": [{"id": "d9", "kind": "d2d"}]})

    def test_two_chains(self):
        cfg = {
            "clients": [{"id": f"d{i}", "kind": "d2d"} for i in range(6)],
            "clusters": [
                {"id": "k0", "edge": "edge0", "chain": ["d0", "d1", "d2"]},
                {"id": "k1", "edge": "edge0", "chain": ["d5", "d4", "d3"]},
            ],
        }
        topo = build_topology(cfg)
        chains = [cl.chain for cl in topo.clusters["edge0"]]
        assert chains == [("d0", "d1", "d2"), ("d5", "d4", "d3")]
        assert topo.link("d0", "d1").link_class == "d2d"
        assert topo.link("d2", "edge0").link_class == "uplink"
        assert topo.has_d2d

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="topology.colour"):
            build_topology({"clients": 2, "colour": "red"})

    def test_unknown_neighbor(self):
        with pytest.raises(ConfigError):
            build_topology({"edge_servers": [{"id": "a", "neighbors": ["b"]}], "clients": []})

    def test_failure_prob_table(self):
        topo = build_topology({"clients": 2, "failure_prob": 0.3})
        assert topo.link("c0", "edge0").failure_prob == 0.3
        assert topo.link("edge0", "main").failure_prob == 0.0
        assert topo.with_failure_prob(0.0).link("c0", "edge0").failure_prob == 0.0


class TestTiming:
    def test_transmission(self):
        link = Link("a", "b", Fraction(10 * MB))
        assert transmission_time(30_470_000, link) == Fraction(3047, 1000)
        assert transmission_time(0, link) == 0
        assert transmission_time(5 * MB, Link("a", "b", Fraction(5 * MB))) == 1

    def test_compute(self):
        node = Node("c", "cellular_client", Fraction(10**9))
        assert compute_time(10**8, node) == Fraction(1, 10)
        assert compute_time(0, node) == 0


class TestFailures:
    def test_zero_prob(self, rng):
        link = Link("a", "b", Fraction(1), 0.0)
        assert not any(sample_failure(link, rng) for _ in range(1000))

    def test_rate(self):
        link = Link("a", "b", Fraction(1), 0.5)
        rng = np.random.default_rng(0)
        rate = np.mean([sample_failure(link, rng) for _ in range(10_000)])
        assert 0.48 <= rate <= 0.52

    def test_deterministic(self):
        link = Link("a", "b", Fraction(1), 0.3)
        a = [sample_failure(link, np.random.default_rng(5)) for _ in range(1)]
        r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
        assert [sample_failure(link, r1) for _ in range(50)] == [sample_failure(link, r2) for _ in range(50)]
        assert a


class TestScheduler:
    def test_parallel_branches_then_join(self):
        evs = [Event(i, f"r{i}", Fraction(2)) for i in range(4)]
        evs.append(Event(4, "join", Fraction(1), (0, 1, 2, 3)))
        assert schedule_round(evs).round_duration == 3

    def test_chain(self):
        evs = [Event(i, "r", Fraction(3), (i - 1,) if i else ()) for i in range(5)]
        assert schedule_round(evs).round_duration == 15

    def test_same_resource_serializes(self):
        evs = [Event(0, "node:x", Fraction(1)), Event(1, "node:x", Fraction(1))]
        assert schedule_round(evs).round_duration == 2

    def test_parallel_flag_overlaps(self):
        evs = [Event(0, "node:x", Fraction(1), parallel=True), Event(1, "node:x", Fraction(1), parallel=True)]
        assert schedule_round(evs).round_duration == 1

    def test_ratio_law(self):
        n, t = 4, Fraction(7, 3)
        chain = [Event(i, "node:s", t, (i - 1,) if i else ()) for i in range(n)]
        par = [Event(i, f"node:{i}", t) for i in range(n)]
        assert schedule_round(chain).round_duration / schedule_round(par).round_duration == n

    def test_work_conserved(self):
        evs = [Event(i, f"r{i % 2}", Fraction(i + 1)) for i in range(6)]
        timing = schedule_round(evs)
        assert timing.busy_time() == sum(Fraction(i + 1) for i in range(6))

    def test_cycle(self):
        with pytest.raises(ProtocolError):
            schedule_round([Event(0, "a", Fraction(1), (1,)), Event(1, "b", Fraction(1), (0,))])

    def test_deterministic(self):
        evs = [Event(i, f"r{i % 3}", Fraction(i + 1), (i - 2,) if i >= 2 else ()) for i in range(9)]
        a, b = schedule_round(evs), schedule_round(evs)
        assert a.start == b.start and a.order == b.order
