import numpy as np
import pytest

from hybridml.config import ProtocolConfig
from hybridml.datasets import partition_by_labels, synth_blobs, train_test_split
from hybridml.netsim import build_topology
from hybridml.nn import Batch, ModelSpec
from hybridml.protocols import initial_state

SEEDS = {"init": 0, "data": 1, "segments": 2, "failures": 3}


def small_data(classes=4, per_class=30, dim=6, seed=1):
    return train_test_split(synth_blobs(classes, per_class, dim, 4.0, seed), 0.25, seed)


def make_state(
    arch,
    clients=4,
    hidden=(8,),
    topology=None,
    groups=None,
    data=None,
    seeds=None,
    **protocol,
):
    """A small experiment state; by default one class per cellular client."""
    train, test = data or small_data(classes=max(clients, 2) if groups is None else 4)
    topo = build_topology(topology if topology is not None else {"clients": clients})
    n = len(topo.clients)
    if groups is None:
        groups = [[c] for c in range(n)]
    shards = dict(zip(topo.clients, partition_by_labels(train, groups)))
    spec = ModelSpec.mlp([train.dim, *hidden, train.class_count])
    proto = ProtocolConfig(**{"batch_size": 8, "lr": 0.1, **protocol})
    return initial_state(arch, proto, topo, spec, train, test, shards, seeds or SEEDS)


def random_batch(spec, n, seed):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, spec.input_width)), rng.integers(0, spec.output_width, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
