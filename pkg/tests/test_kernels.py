import numpy as np
import pytest

from hybridml import kernels
from hybridml._kernels_py import segment_weighted_mean, weighted_mean_rows

BACKENDS = kernels.available_backends()


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert kernels.BACKEND in BACKENDS


def test_weighted_mean_rows_oracle(rng):
    rows = rng.normal(size=(5, 17))
    w = rng.uniform(1, 10, size=5)
    assert np.allclose(weighted_mean_rows(rows, w), (w[:, None] * rows).sum(0) / w.sum(), rtol=0, atol=1e-12)


def test_segment_fallback():
    stack = np.array([[1.0, 2.0, 3.0, 4.0], [3.0, 4.0, 5.0, 6.0]])
    w = np.array([[1.0, 0.0], [1.0, 0.0]])
    out = segment_weighted_mean(stack, w, np.full(4, 9.0), 2)
    assert out.tolist() == [2.0, 3.0, 9.0, 9.0]


@pytest.mark.skipif("cython" not in BACKENDS, reason="extension not built")
@pytest.mark.parametrize("k,width,M", [(1, 5, 1), (3, 40, 4), (7, 101, 7), (16, 64, 16)])
def test_backends_bitwise(rng, k, width, M):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    seg = -(-width // M)
    stack = np.ascontiguousarray(rng.normal(size=(k, seg * M)))
    w = rng.uniform(0.5, 3.0, size=k)
    assert np.array_equal(py.weighted_mean_rows(stack, w), cy.weighted_mean_rows(stack, w))
    sw = np.ascontiguousarray(np.where(rng.random((k, M)) < 0.6, rng.uniform(1, 5, (k, M)), 0.0))
    fb = rng.normal(size=seg * M)
    assert np.array_equal(py.segment_weighted_mean(stack, sw, fb, seg), cy.segment_weighted_mean(stack, sw, fb, seg))
