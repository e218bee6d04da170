"""Wireless topology and failures, plus the logical-clock round scheduler.

Time is a logical clock of exact :class:`fractions.Fraction` seconds, so
ratios between schedules are exact.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ProtocolError

NODE_KINDS = ("d2d_client", "cellular_client", "edge_server", "main_server")

MB = 10**6

DEFAULT_RATES = {"uplink": 10 * MB, "downlink": 50 * MB, "d2d": 5 * MB, "backbone": 100 * MB}
DEFAULT_COMPUTE = {"client": 10**9, "edge": 10**10, "main": 10**10}


def exact(value) -> Fraction:
    """Exact rational from a number or numeric string (floats via their decimal repr)."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ConfigError("boolean where a number was expected")
    if isinstance(value, int):
        return Fraction(value)
    try:
        return Fraction(str(value))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {value!r}") from None


@dataclass(frozen=True)
class Node:
    node_id: str
    kind: str
    compute_rate: Fraction  # FLOP/s
    attached_edge: str | None = None
    cluster_id: str | None = None

    @property
    def is_client(self) -> bool:
        return self.kind in ("d2d_client", "cellular_client")


@dataclass(frozen=True)
class Link:
    src: str
    dst: str
    datarate: Fraction  # bytes/s
    failure_prob: float = 0.0
    tier: str = "client"  # client | backbone
    link_class: str = "uplink"


@dataclass(frozen=True)
class Cluster:
    cluster_id: str
    edge: str
    chain: tuple[str, ...]

    @property
    def terminus(self) -> str:
        return self.chain[-1]


@dataclass
class Topology:
    nodes: dict[str, Node]
    links: dict[tuple[str, str], Link]
    main: str
    edges: list[str]
    clients: list[str]  # deterministic node-id order used everywhere
    cellular: dict[str, list[str]]  # edge -> cellular clients
    clusters: dict[str, list[Cluster]]  # edge -> clusters
    edge_neighbors: dict[str, list[str]]

    def link(self, src: str, dst: str) -> Link:
        try:
            return self.links[(src, dst)]
        except KeyError:
            raise ConfigError(f"no link {src} -> {dst}") from None

    def node(self, node_id: str) -> Node:
        return self.nodes[node_id]

    def edge_of(self, client: str) -> str:
        edge = self.nodes[client].attached_edge
        assert edge is not None
        return edge

    def edge_clients(self, edge: str) -> list[str]:
        members = list(self.cellular[edge])
        for cl in self.clusters[edge]:
            members.extend(cl.chain)
        return members

    @property
    def has_d2d(self) -> bool:
        return any(self.clusters[e] for e in self.edges)

    def with_failure_prob(self, p: float) -> "Topology":
        links = {k: Link(l.src, l.dst, l.datarate, p, l.tier, l.link_class) for k, l in self.links.items()}
        return Topology(
            self.nodes, links, self.main, self.edges, self.clients, self.cellular, self.clusters, self.edge_neighbors
        )


_TOPOLOGY_KEYS = {"rates", "compute", "failure_prob", "main_server", "edge_servers", "clients", "clusters"}
_CLIENT_KEYS = {"id", "kind", "edge", "cluster", "compute", "uplink", "downlink", "failure_prob"}
_EDGE_KEYS = {"id", "neighbors", "compute"}
_CLUSTER_KEYS = {"id", "edge", "chain"}


def _strict(d: Mapping, allowed: set, where: str) -> None:
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}.{key}'")


def _failure_table(value) -> dict[str, float]:
    classes = ("uplink", "downlink", "d2d", "backbone")
    if value is None:
        return dict.fromkeys(classes, 0.0)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        table = dict.fromkeys(classes, float(value))
        table["backbone"] = 0.0
    else:
        _strict(value, set(classes), "topology.failure_prob")
        table = dict.fromkeys(classes, 0.0)
        table.update({k: float(v) for k, v in value.items()})
    for k, p in table.items():
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"topology.failure_prob.{k} must lie in [0, 1)")
    return table


def build_topology(config: Mapping[str, Any]) -> Topology:
    """Validate a topology section and materialise nodes and links.

    ``clients`` may be an integer when there is a single edge server; it
    then creates that many cellular clients ``c0, c1, ...``.
    """
    _strict(config, _TOPOLOGY_KEYS, "topology")
    rates = dict(DEFAULT_RATES)
    _strict(config.get("rates", {}), set(DEFAULT_RATES), "topology.rates")
    rates.update(config.get("rates", {}))
    compute = dict(DEFAULT_COMPUTE)
    _strict(config.get("compute", {}), set(DEFAULT_COMPUTE), "topology.compute")
    compute.update(config.get("compute", {}))
    for k, v in {**rates, **compute}.items():
        if exact(v) <= 0:
            raise ConfigError(f"rate '{k}' must be positive")
    fail = _failure_table(config.get("failure_prob"))

    main = str(config.get("main_server", "main"))
    edge_entries = config.get("edge_servers") or [{"id": "edge0"}]
    nodes: dict[str, Node] = {main: Node(main, "main_server", exact(compute["main"]))}
    edges: list[str] = []
    neighbors: dict[str, list[str]] = {}
    for i, e in enumerate(edge_entries):
        if isinstance(e, str):
            e = {"id": e}
        _strict(e, _EDGE_KEYS, f"topology.edge_servers[{i}]")
        eid = str(e["id"])
        if eid in nodes:
            raise ConfigError(f"duplicate node id '{eid}'")
        nodes[eid] = Node(eid, "edge_server", exact(e.get("compute", compute["edge"])))
        edges.append(eid)
        neighbors[eid] = [str(n) for n in e.get("neighbors", [])]
    for eid, ns in neighbors.items():
        for n in ns:
            if n not in neighbors:
                raise ConfigError(f"edge server '{eid}' lists unknown neighbor '{n}'")
            if n == eid:
                raise ConfigError(f"edge server '{eid}' lists itself as neighbor")
    # neighbor relation is symmetric
    for eid in edges:
        for n in list(neighbors[eid]):
            if eid not in neighbors[n]:
                neighbors[n].append(eid)

    raw_clients = config.get("clients", [])
    if isinstance(raw_clients, int) and not isinstance(raw_clients, bool):
        if len(edges) != 1:
            raise ConfigError("an integer client count needs exactly one edge server")
        raw_clients = [{"id": f"c{i}", "kind": "cellular", "edge": edges[0]} for i in range(raw_clients)]
    client_cfg: dict[str, dict] = {}
    for i, c in enumerate(raw_clients):
        _strict(c, _CLIENT_KEYS, f"topology.clients[{i}]")
        cid = str(c.get("id", ""))
        if not cid:
            raise ConfigError(f"topology.clients[{i}] needs an id")
        if cid in nodes or cid in client_cfg:
            raise ConfigError(f"duplicate node id '{cid}'")
        kind = c.get("kind", "cellular")
        if kind not in ("cellular", "d2d"):
            raise ConfigError(f"client '{cid}' has unknown kind {kind!r}")
        client_cfg[cid] = dict(c, kind=kind)

    clusters: dict[str, list[Cluster]] = {e: [] for e in edges}
    in_chain: dict[str, str] = {}
    for i, cl in enumerate(config.get("clusters", [])):
        _strict(cl, _CLUSTER_KEYS, f"topology.clusters[{i}]")
        clid = str(cl.get("id", f"k{i}"))
        edge = cl.get("edge")
        if edge not in clusters:
            raise ConfigError(f"cluster '{clid}' references unknown edge server '{edge}'")
        chain = tuple(str(m) for m in cl.get("chain", []))
        if not chain:
            raise ConfigError(f"cluster '{clid}' has an empty chain")
        for m in chain:
            if m in in_chain:
                raise ConfigError(f"client '{m}' appears in clusters '{in_chain[m]}' and '{clid}'")
            if m in nodes:
                raise ConfigError(f"cluster '{clid}' chain member '{m}' is not a client id")
            cfg = client_cfg.get(m)
            if cfg is not None and (cfg["kind"] != "d2d" or cfg.get("cluster", clid) != clid):
                raise ConfigError(f"client '{m}' is in cluster '{clid}' but not declared as its d2d member")
            in_chain[m] = clid
        clusters[edge].append(Cluster(clid, str(edge), chain))

    cellular: dict[str, list[str]] = {e: [] for e in edges}
    for cid, c in client_cfg.items():
        if c["kind"] == "cellular":
            edge = c.get("edge")
            if edge is None or edge not in cellular:
                raise ConfigError(f"client '{cid}' has no path to any edge server (edge={edge!r})")
            cellular[edge].append(cid)
        elif cid not in in_chain:
            raise ConfigError(f"d2d client '{cid}' has no path to any edge server (not in any cluster chain)")

    links: dict[tuple[str, str], Link] = {}

    def add(src, dst, rate, cls, tier="client", p=None):
        links[(src, dst)] = Link(src, dst, exact(rate), fail[cls] if p is None else float(p), tier, cls)

    clients: list[str] = []
    for edge in edges:
        for cid in cellular[edge]:
            c = client_cfg[cid]
            nodes[cid] = Node(cid, "cellular_client", exact(c.get("compute", compute["client"])), edge)
            add(cid, edge, c.get("uplink", rates["uplink"]), "uplink", p=c.get("failure_prob"))
            add(edge, cid, c.get("downlink", rates["downlink"]), "downlink", p=c.get("failure_prob"))
            clients.append(cid)
        for cl in clusters[edge]:
            for m in cl.chain:
                c = client_cfg.get(m, {})
                nodes[m] = Node(m, "d2d_client", exact(c.get("compute", compute["client"])), edge, cl.cluster_id)
                clients.append(m)
            ring = list(cl.chain)
            pairs = list(zip(ring, ring[1:]))
            if len(ring) > 2:
                pairs.append((ring[-1], ring[0]))  # closing hop for rotated pipelines
            for a, b in pairs:
                add(a, b, rates["d2d"], "d2d")
                add(b, a, rates["d2d"], "d2d")
            t = cl.terminus
            c = client_cfg.get(t, {})
            add(t, edge, c.get("uplink", rates["uplink"]), "uplink", p=c.get("failure_prob"))
            add(edge, t, c.get("downlink", rates["downlink"]), "downlink", p=c.get("failure_prob"))
        add(edge, main, rates["backbone"], "backbone", "backbone")
        add(main, edge, rates["backbone"], "backbone", "backbone")
        for n in neighbors[edge]:
            add(edge, n, rates["backbone"], "backbone", "backbone")
    for cid in clients:
        if nodes[cid].compute_rate <= 0:
            raise ConfigError(f"client '{cid}' compute rate must be positive")
    if not clients:
        raise ConfigError("topology has no clients")
    return Topology(nodes, links, main, edges, clients, cellular, clusters, neighbors)


def transmission_time(nbytes: int, link: Link) -> Fraction:
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    return Fraction(nbytes) / link.datarate


def compute_time(flops: int, node: Node) -> Fraction:
    if flops < 0:
        raise ValueError("FLOP count must be non-negative")
    return Fraction(flops) / node.compute_rate


def sample_failure(link: Link, rng: np.random.Generator) -> bool:
    """One Bernoulli(failure_prob) draw; always consumes exactly one variate."""
    return bool(rng.random() < link.failure_prob)


# -- scheduling ---------------------------------------------------------------


@dataclass(frozen=True)
class Event:
    event_id: int
    resource: str
    duration: Fraction
    deps: tuple[int, ...] = ()
    parallel: bool = False
    label: str = ""


@dataclass
class RoundTiming:
    start: dict[int, Fraction]
    end: dict[int, Fraction]
    round_duration: Fraction
    order: list[int] = field(default_factory=list)

    def busy_time(self) -> Fraction:
        return sum((self.end[i] - self.start[i] for i in self.order), Fraction(0))


def schedule_round(events: Sequence[Event]) -> RoundTiming:
    """Earliest-start list schedule of a dependency DAG.

    Events are taken in topological order, ties broken by id. An event
    starts once its dependencies end and, unless it is declared parallel,
    once the previous serial event on its resource has ended.
    """
    by_id = {e.event_id: e for e in events}
    if len(by_id) != len(events):
        raise ProtocolError("duplicate event ids")
    indeg = {e.event_id: 0 for e in events}
    children: dict[int, list[int]] = {e.event_id: [] for e in events}
    for e in events:
        if e.duration < 0:
            raise ProtocolError(f"event {e.event_id} has negative duration")
        for d in e.deps:
            if d not in by_id:
                raise ProtocolError(f"event {e.event_id} depends on unknown event {d}")
            indeg[e.event_id] += 1
            children[d].append(e.event_id)
    ready = [i for i, n in indeg.items() if n == 0]
    heapq.heapify(ready)
    start: dict[int, Fraction] = {}
    end: dict[int, Fraction] = {}
    free: dict[str, Fraction] = {}
    order: list[int] = []
    while ready:
        i = heapq.heappop(ready)
        e = by_id[i]
        t = max((end[d] for d in e.deps), default=Fraction(0))
        if not e.parallel:
            t = max(t, free.get(e.resource, Fraction(0)))
        start[i], end[i] = t, t + e.duration
        if not e.parallel:
            free[e.resource] = end[i]
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(events):
        stuck = sorted(set(by_id) - set(order))
        raise ProtocolError(f"event graph has a cycle through events {stuck[:10]}")
    duration = max(end.values(), default=Fraction(0))
    return RoundTiming(start, end, duration, order)
