"""Experiment state shared by every protocol."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import ExperimentConfig, ProtocolConfig
from ..datasets import Dataset, Shard, load_idx, partition_by_labels, synth_from_descriptor, train_test_split
from ..errors import ConfigError
from ..netsim import Topology, build_topology
from ..nn import Model, ModelSpec, init_model
from ..partition import (
    CutPlan,
    RandomSegmentPolicy,
    ReceiverSpecifiedPolicy,
    cut_at_layer,
    fedavg,
    round_robin_schedule,
    split_model,
)
from ..trace import RoundTrace

PURPOSES = ("init", "data", "segments", "failures")


class Streams:
    """Purpose-keyed generators: ``rng("data", round, client)`` is independent of call order."""

    def __init__(self, seeds: dict[str, int]):
        missing = set(PURPOSES) - set(seeds)
        if missing:
            raise ConfigError(f"missing seeds {sorted(missing)}")
        self.seeds = dict(seeds)

    def rng(self, purpose: str, *keys: int) -> np.random.Generator:
        tag = PURPOSES.index(purpose)
        return np.random.default_rng(np.random.SeedSequence([self.seeds[purpose], tag, *map(int, keys)]))


@dataclass
class ExperimentState:
    arch: str
    protocol: ProtocolConfig
    topology: Topology
    spec: ModelSpec
    train: Dataset
    test: Dataset
    shards: dict[str, Shard]
    streams: Streams
    global_model: Model
    client_models: dict[str, list[Model]]  # full model, or split parts held by the client
    edge_models: dict[str, Model]
    server_models: dict[str, Model] = field(default_factory=dict)  # SL/HFSL server part per edge
    cluster_models: dict[str, Model] = field(default_factory=dict)  # HFSL D2D clusters
    plan: CutPlan | None = None
    round_index: int = 0
    label_bytes: int = 1
    phantom_bytes: int = 0  # test hook for validation

    @property
    def n_clients(self) -> int:
        return len(self.topology.clients)

    def client_pos(self, cid: str) -> int:
        return self.topology.clients.index(cid)

    def weight(self, cid: str) -> float:
        return float(len(self.shards[cid]))

    def segment_policy(self):
        if self.protocol.segment_policy == "receiver":
            return ReceiverSpecifiedPolicy(round_robin_schedule(self.round_index))
        return RandomSegmentPolicy()

    def edge_weight(self, edge: str) -> float:
        return sum(self.weight(c) for c in self.topology.edge_clients(edge))


@dataclass
class RoundResult:
    state: ExperimentState
    trace: RoundTrace
    accuracy: float | None = None


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.train.startswith("synth:"):
        if d.test is not None:
            raise ConfigError("'dataset.test' is not used with a synth: training descriptor")
        full = synth_from_descriptor(d.train)
        return train_test_split(full, d.test_fraction, cfg.seeds.data)
    if d.train_labels is None:
        raise ConfigError("'dataset.train_labels' is required for IDX data")
    train = load_idx(d.train, d.train_labels)
    if d.test is None:
        return train_test_split(train, d.test_fraction, cfg.seeds.data)
    if d.test_labels is None:
        raise ConfigError("'dataset.test_labels' is required when 'dataset.test' is set")
    test = load_idx(d.test, d.test_labels, class_count=train.class_count)
    return train, test


def build_state(cfg: ExperimentConfig, arch: str | None = None, datasets: tuple[Dataset, Dataset] | None = None) -> ExperimentState:
    arch = arch or cfg.architecture
    if arch not in ("cl", "fl", "sl", "hsfl", "hfsl"):
        raise ConfigError(f"unknown architecture {arch!r}")
    topology = build_topology(cfg.topology)
    train, test = datasets if datasets is not None else load_datasets(cfg)
    groups = cfg.partition
    if groups is None:
        if len(topology.clients) != train.class_count and arch != "cl":
            raise ConfigError("'partition' is required unless there is one client per class")
        groups = [[c] for c in range(train.class_count)][: len(topology.clients)]
    if len(groups) != len(topology.clients):
        raise ConfigError(
            f"'partition' has {len(groups)} groups but the topology has {len(topology.clients)} clients"
        )
    shards = {cid: s for cid, s in zip(topology.clients, partition_by_labels(train, groups))}
    spec = ModelSpec.mlp([train.dim, *cfg.model.hidden, train.class_count], cfg.model.activation, cfg.model.param_dtype_bytes)
    return initial_state(arch, cfg.protocol, topology, spec, train, test, shards, cfg.seeds.__dict__, cfg.accounting.label_bytes)


def initial_state(
    arch: str,
    protocol: ProtocolConfig,
    topology: Topology,
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
    shards: dict[str, Shard],
    seeds: dict[str, int],
    label_bytes: int = 1,
) -> ExperimentState:
    if arch in ("fl", "sl", "cl") and topology.has_d2d:
        raise ConfigError(f"{arch} runs on a star topology; D2D clusters need hsfl or hfsl")
    if arch == "sl" and len(topology.edges) != 1:
        raise ConfigError("sl needs exactly one edge server (the SL server)")
    if arch == "hsfl" and protocol.M > spec.param_count:
        raise ConfigError(f"'protocol.M' exceeds the model's {spec.param_count} parameters")
    streams = Streams(seeds)
    model = init_model(spec, seeds["init"])
    plan = None
    client_models: dict[str, list[Model]] = {}
    server_models: dict[str, Model] = {}
    if arch in ("sl", "hfsl"):
        plan = cut_at_layer(spec, protocol.cut_layer, protocol.label_sharing)
        parts = split_model(model, plan)
        client_side = [parts[0]] + parts[2:]
        for cid in topology.clients:
            client_models[cid] = [p.copy() for p in client_side]
        for e in topology.edges:
            server_models[e] = parts[1].copy()
    else:
        for cid in topology.clients:
            client_models[cid] = [model.copy()]
    state = ExperimentState(
        arch=arch,
        protocol=protocol,
        topology=topology,
        spec=spec,
        train=train,
        test=test,
        shards=shards,
        streams=streams,
        global_model=model,
        client_models=client_models,
        edge_models={e: model.copy() for e in topology.edges},
        server_models=server_models,
        cluster_models={cl.cluster_id: model.copy() for e in topology.edges for cl in topology.clusters[e]},
        plan=plan,
        label_bytes=label_bytes,
    )
    return state


def virtual_global(state: ExperimentState, models: dict[str, Model]) -> Model:
    """Sample-weighted mean of edge models, for evaluation when no main sync ran."""
    items = [(models[e], state.edge_weight(e)) for e in state.topology.edges if state.edge_weight(e) > 0]
    if len(items) == 1:
        return items[0][0].copy()
    return fedavg(items)
