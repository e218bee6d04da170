import gzip
import struct

import numpy as np
import pytest

from hybridml.datasets import (
    Dataset,
    idx_bytes,
    load_idx,
    parse_synth_descriptor,
    partition_by_labels,
    synth_blobs,
    synth_from_descriptor,
    train_test_split,
    write_idx,
)
from hybridml.errors import ConfigError, FormatError, GenerationError


def write_pair(tmp_path, images: bytes, labels: bytes):
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    ip.write_bytes(images)
    lp.write_bytes(labels)
    return ip, lp


def tiny_idx(n=3, rows=2, cols=2):
    pixels = bytes(range(n * rows * cols))
    images = struct.pack(">IIII", 0x803, n, rows, cols) + pixels
    labels = struct.pack(">II", 0x801, n) + bytes(i % 2 for i in range(n))
    return images, labels


class TestIdx:
    def test_load(self, tmp_path):
        ds = load_idx(*write_pair(tmp_path, *tiny_idx()))
        assert ds.inputs.shape == (3, 4)
        assert ds.inputs[0, 1] == 1 / 255
        assert ds.labels.tolist() == [0, 1, 0]
        assert ds.image_shape == (2, 2)

    def test_gzip(self, tmp_path):
        images, labels = tiny_idx()
        ds = load_idx(*write_pair(tmp_path, gzip.compress(images), gzip.compress(labels)))
        assert len(ds) == 3

    def test_bad_magic(self, tmp_path):
        images, labels = tiny_idx()
        with pytest.raises(FormatError, match="offset 0"):
            load_idx(*write_pair(tmp_path, b"\x00\x00\x08\x04" + images[4:], labels))

    def test_truncated(self, tmp_path):
        images, labels = tiny_idx()
        with pytest.raises(FormatError, match="truncated"):
            load_idx(*write_pair(tmp_path, images[:-1], labels))

    def test_count_mismatch(self, tmp_path):
        images, _ = tiny_idx(3)
        _, labels = tiny_idx(2)
        with pytest.raises(FormatError, match="2"):
            load_idx(*write_pair(tmp_path, images, labels))

    def test_trailing_bytes(self, tmp_path):
        images, labels = tiny_idx()
        with pytest.raises(FormatError, match="trailing"):
            load_idx(*write_pair(tmp_path, images + b"\x00", labels))

    def test_round_trip_bytes(self, tmp_path):
        images, labels = tiny_idx(5, 3, 3)
        ds = load_idx(*write_pair(tmp_path, images, labels))
        assert idx_bytes(ds) == (images, labels)
        write_idx(ds, tmp_path / "a", tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == images


class TestSynth:
    def test_shape_and_determinism(self):
        a = synth_blobs(3, 10, 4, 4.0, 7)
        b = synth_blobs(3, 10, 4, 4.0, 7)
        assert a.inputs.shape == (30, 4)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.bincount(a.labels).tolist() == [10, 10, 10]

    def test_seed_sensitive(self):
        assert not np.array_equal(synth_blobs(3, 10, 4, 4.0, 7).inputs, synth_blobs(3, 10, 4, 4.0, 8).inputs)

    def test_separation(self):
        ds = synth_blobs(5, 200, 3, 6.0, 0)
        means = np.stack([ds.inputs[ds.labels == c].mean(axis=0) for c in range(5)])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert d[np.triu_indices(5, 1)].min() > 5.0

    def test_impossible_separation(self):
        with pytest.raises(GenerationError):
            synth_blobs(400, 2, 1, 4.0, 0, max_retries=1)

    def test_descriptor(self):
        p = parse_synth_descriptor("synth:classes=4,per_class=20,dim=3,sep=2.5,seed=9")
        assert p == {"classes": 4, "per_class": 20, "dim": 3, "sep": 2.5, "seed": 9}
        assert len(synth_from_descriptor("synth:classes=2,per_class=5,dim=2,sep=3")) == 10

    @pytest.mark.parametrize("bad", ["synth:classes=2", "synth:classes=x,per_class=1,dim=1,sep=1", "blob:1", "synth:foo=1"])
    def test_bad_descriptor(self, bad):
        with pytest.raises(ConfigError):
            parse_synth_descriptor(bad)


class TestPartition:
    def test_label_purity_and_disjointness(self):
        ds = synth_blobs(10, 20, 4, 4.0, 1)
        groups = [[0, 1], [2, 3], [4, 5, 6], [7, 8, 9]]
        shards = partition_by_labels(ds, groups)
        seen = set()
        for g, s in zip(groups, shards):
            assert set(ds.labels[s.indices].tolist()) == set(g)
            assert not seen & set(s.indices.tolist())
            seen |= set(s.indices.tolist())
        assert len(seen) == len(ds)

    def test_overlap_rejected(self):
        with pytest.raises(ConfigError, match="overlaps"):
            partition_by_labels(synth_blobs(4, 5, 2, 4.0, 0), [[0, 1], [1, 2]])

    def test_empty_group_rejected(self):
        with pytest.raises(ConfigError):
            partition_by_labels(synth_blobs(4, 5, 2, 4.0, 0), [[0], []])

    def test_stratified_split(self):
        ds = synth_blobs(4, 40, 3, 4.0, 0)
        train, test = train_test_split(ds, 0.25, 0)
        assert np.bincount(test.labels).tolist() == [10, 10, 10, 10]
        assert len(train) + len(test) == len(ds)


def test_dataset_rejects_bad_labels():
    with pytest.raises(Exception):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 2)
