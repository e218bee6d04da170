"""Structured experiment configuration with strict key checking.

Configs are YAML or JSON files whose top-level keys mirror
:class:`ExperimentConfig`. Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, get_args, get_origin, get_type_hints

import yaml

from .errors import ConfigError

ARCHITECTURES = ("cl", "fl", "sl", "hsfl", "hfsl")


def _help(text: str, **kw):
    return field(metadata={"help": text}, **kw)


@dataclass
class DatasetConfig:
    train: str = _help("'synth:classes=..,per_class=..,dim=..,sep=..,seed=..' or IDX images path", default="synth:classes=4,per_class=200,dim=16,sep=4.0,seed=1")
    train_labels: str | None = _help("IDX labels path for 'train'", default=None)
    test: str | None = _help("IDX test images path; omitted = stratified split of train", default=None)
    test_labels: str | None = _help("IDX test labels path", default=None)
    test_fraction: float = _help("held-out fraction when no test files are given", default=0.25)


@dataclass
class ModelConfig:
    hidden: list[int] = _help("hidden layer widths; input/output widths come from the data", default_factory=lambda: [32])
    activation: str = _help("hidden activation (relu | identity)", default="relu")
    param_dtype_bytes: int = _help("bytes per parameter scalar for accounting", default=4)


@dataclass
class ProtocolConfig:
    M: int = _help("HSFL segment count", default=2)
    m: int = _help("HSFL segments transmitted per client per exchange", default=1)
    segment_policy: str = _help("random | receiver (round-robin requested by receiver)", default="random")
    cut_layer: int = _help("SL/HFSL: client keeps layers [0, cut_layer)", default=1)
    label_sharing: bool = _help("SL/HFSL: send labels to the server; false = U-shaped split", default=True)
    vertical_rounds: int = _help("HSFL client-edge exchanges per main-server upload", default=1)
    horizontal_enabled: bool = _help("average neighboring edge models before the main upload", default=False)
    main_sync_every: int = _help("HFSL: rounds between main-server syncs (0 = never)", default=1)
    aggregation_cost: bool = _help("charge FLOPs for averaging at servers", default=True)
    local_epochs: int = _help("local epochs per round", default=1)
    lr: float = _help("SGD learning rate", default=0.05)
    batch_size: int = _help("minibatch size", default=32)
    rounds: int = _help("global rounds to run", default=10)


@dataclass
class SeedConfig:
    init: int = _help("model initialisation seed", default=0)
    data: int = _help("batch-order seed", default=0)
    segments: int = _help("segment-choice seed", default=0)
    failures: int = _help("link-failure seed", default=0)


@dataclass
class AccountingConfig:
    convention: str = _help("downlink byte convention for reported totals: per_client | broadcast", default="per_client")
    include_labels: bool = _help("count label bytes in the formula comparison", default=False)
    include_handoffs: bool = _help("count SL client-to-client handoffs in the formula comparison", default=True)
    label_bytes: int = _help("bytes per transmitted label", default=1)


@dataclass
class OutputConfig:
    dir: str | None = _help("report directory (default: $HYBRIDML_OUT_DIR or ./out)", default=None)
    prefix: str = _help("report file name prefix", default="report")
    formats: list[str] = _help("report formats: csv, json", default_factory=lambda: ["csv", "json"])


@dataclass
class ExperimentConfig:
    architecture: str = _help("cl | fl | sl | hsfl | hfsl", default="fl")
    compare: list[str] = _help("architectures for the compare subcommand", default_factory=list)
    dataset: DatasetConfig = _help("dataset section", default_factory=DatasetConfig)
    partition: list[list[int]] | None = _help("label groups, one per client in topology order; omitted = one label per client", default=None)
    model: ModelConfig = _help("model section", default_factory=ModelConfig)
    protocol: ProtocolConfig = _help("protocol knobs", default_factory=ProtocolConfig)
    topology: dict = _help("topology section (see README)", default_factory=lambda: {"clients": 4})
    seeds: SeedConfig = _help("named seeds", default_factory=SeedConfig)
    accounting: AccountingConfig = _help("accounting section", default_factory=AccountingConfig)
    output: OutputConfig = _help("output section", default_factory=OutputConfig)

    def validate(self) -> None:
        p = self.protocol
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for a in self.compare:
            if a not in ARCHITECTURES:
                raise ConfigError(f"compare entry {a!r} is not an architecture")
        checks = [
            ("protocol.M", p.M >= 1),
            ("protocol.m", 1 <= p.m <= p.M),
            ("protocol.cut_layer", p.cut_layer >= 1),
            ("protocol.vertical_rounds", p.vertical_rounds >= 1),
            ("protocol.main_sync_every", p.main_sync_every >= 0),
            ("protocol.local_epochs", p.local_epochs >= 1),
            ("protocol.lr", p.lr > 0),
            ("protocol.batch_size", p.batch_size >= 1),
            ("protocol.rounds", p.rounds >= 1),
            ("protocol.segment_policy", p.segment_policy in ("random", "receiver")),
            ("model.activation", self.model.activation in ("relu", "identity")),
            ("model.param_dtype_bytes", self.model.param_dtype_bytes >= 1),
            ("model.hidden", all(h >= 1 for h in self.model.hidden)),
            ("dataset.test_fraction", 0 < self.dataset.test_fraction < 1),
            ("accounting.convention", self.accounting.convention in ("per_client", "broadcast")),
            ("accounting.label_bytes", self.accounting.label_bytes >= 0),
            ("output.formats", bool(self.output.formats) and set(self.output.formats) <= {"csv", "json"}),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for '{key}'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = get_origin(tp)
    args = get_args(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is None and tp is Any:
        return value
    if type(None) in args:  # Optional[...]
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"'{path}' must be a list")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)] if args else value
    if origin is dict or tp is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(f"'{path}' must be a mapping")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
        return value
    return value


def _build(cls, data: Any, path: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"'{path or 'config'}' must be a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key '{path + '.' if path else ''}{key}'")
    kwargs = {k: _coerce(v, hints[k], f"{path + '.' if path else ''}{k}") for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    return config_from_dict(data or {})


def config_keys_help() -> str:
    """Every config key with its default, one per line."""
    lines = []

    def walk(cls, prefix):
        for f in dataclasses.fields(cls):
            hints = get_type_hints(cls)
            key = prefix + f.name
            if dataclasses.is_dataclass(hints[f.name]):
                walk(hints[f.name], key + ".")
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()  # type: ignore[misc]
            lines.append(f"  {key:<28} {f.metadata.get('help', '')} [default: {default!r}]")

    walk(ExperimentConfig, "")
    return "\n".join(lines)
