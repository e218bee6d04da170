"""Dataset loading (IDX files or synthetic blobs) and label-group partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, GenerationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class Dataset:
    inputs: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64
    class_count: int
    name: str = ""
    image_shape: tuple[int, int] | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise DataError("a dataset needs at least one row")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataError("one label per row is required")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.class_count, self.name, self.image_shape)


@dataclass(frozen=True, eq=False)
class Shard:
    client_id: int
    indices: np.ndarray
    label_set: frozenset[int]

    def __len__(self) -> int:
        return int(self.indices.shape[0])


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(data: bytes, expected_magic: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    if len(data) < 4:
        raise FormatError(f"{what} file is shorter than its magic number", len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic != expected_magic:
        raise FormatError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{what} file header truncated", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    size = int(np.prod(dims)) if dims else 0
    if len(data) < header + size:
        raise FormatError(f"{what} payload truncated: need {size} bytes", len(data))
    if len(data) > header + size:
        raise FormatError(f"{what} file has trailing bytes", header + size)
    return dims, np.frombuffer(data, dtype=np.uint8, count=size, offset=header)


def load_idx(images_path, labels_path, name: str | None = None, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair; gzip-compressed files are accepted."""
    dims, pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    (n_labels,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    n, rows, cols = dims
    if n != n_labels:
        raise FormatError(f"images file holds {n} items but labels file holds {n_labels}", 4)
    if n == 0:
        raise FormatError("IDX files contain no items", 4)
    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    classes = class_count if class_count is not None else int(labels.max()) + 1
    return Dataset(inputs, labels, classes, name or Path(images_path).name, (rows, cols))


def idx_bytes(dataset: Dataset) -> tuple[bytes, bytes]:
    """Encode a dataset as (images, labels) IDX payloads, undoing the 1/255 scaling."""
    rows, cols = dataset.image_shape or (1, dataset.dim)
    pixels = np.rint(dataset.inputs * 255.0)
    if pixels.min() < 0 or pixels.max() > 255:
        raise DataError("inputs outside [0, 1] cannot be written as IDX bytes")
    n = len(dataset)
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.astype(np.uint8).tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    images, labels = idx_bytes(dataset)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)


def synth_blobs(
    class_count: int, per_class: int, dim: int, separation: float, seed: int, max_retries: int = 1000
) -> Dataset:
    """Unit-variance Gaussian clusters around centers at least ``separation`` apart."""
    if min(class_count, per_class, dim) < 1:
        raise ConfigError("class_count, per_class and dim must all be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB10B]))
    # spread the centers so the required spacing is reachable in low dimensions
    scale = separation * max(1.0, class_count ** (1.0 / dim))
    centers: list[np.ndarray] = []
    for c in range(class_count):
        for _ in range(max_retries):
            cand = rng.normal(0.0, scale, size=dim)
            if all(np.linalg.norm(cand - other) >= separation for other in centers):
                centers.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place center {c} at distance >= {separation} in {dim} dimensions "
                f"after {max_retries} attempts"
            )
    inputs = np.concatenate([ctr + rng.normal(0.0, 1.0, size=(per_class, dim)) for ctr in centers])
    labels = np.repeat(np.arange(class_count), per_class)
    return Dataset(inputs, labels, class_count, f"synth-blobs-{class_count}x{per_class}-d{dim}-s{seed}")


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class keeps at least one training item."""
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5717]))
    train_idx, test_idx = [], []
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_test = min(int(round(idx.size * test_fraction)), idx.size - 1)
        test_idx.append(idx[:n_test])
        train_idx.append(idx[n_test:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    if test.size == 0:
        raise ConfigError("test split is empty; raise test_fraction or per-class counts")
    return dataset.subset(train), dataset.subset(test)


def partition_by_labels(dataset: Dataset, groups: Sequence[Iterable[int]]) -> list[Shard]:
    """Shard i holds every item whose label is in ``groups[i]``."""
    label_sets = [frozenset(int(c) for c in g) for g in groups]
    seen: set[int] = set()
    for i, g in enumerate(label_sets):
        if not g:
            raise ConfigError(f"label group {i} is empty")
        overlap = seen & g
        if overlap:
            raise ConfigError(f"label group {i} overlaps earlier groups on {sorted(overlap)}")
        seen |= g
    return [
        Shard(i, np.flatnonzero(np.isin(dataset.labels, sorted(g))), g) for i, g in enumerate(label_sets)
    ]


def parse_synth_descriptor(desc: str) -> dict:
    """``synth:classes=4,per_class=200,dim=16,sep=4.0,seed=1``"""
    if not desc.startswith("synth:"):
        raise ConfigError(f"not a synth descriptor: {desc!r}")
    keys = {"classes": int, "per_class": int, "dim": int, "sep": float, "seed": int}
    out = {}
    body = desc[len("synth:") :]
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise ConfigError(f"malformed synth descriptor item {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        if k not in keys:
            raise ConfigError(f"unknown synth descriptor key {k!r}")
        try:
            out[k] = keys[k](v)
        except ValueError:
            raise ConfigError(f"synth descriptor key {k!r} has invalid value {v!r}") from None
    missing = set(keys) - set(out) - {"seed"}
    if missing:
        raise ConfigError(f"synth descriptor missing {sorted(missing)}")
    out.setdefault("seed", 0)
    return out


def synth_from_descriptor(desc: str) -> Dataset:
    p = parse_synth_descriptor(desc)
    return synth_blobs(p["classes"], p["per_class"], p["dim"], p["sep"], p["seed"])
