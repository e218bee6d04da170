"""Compare the compiled and numpy aggregation kernels.

    python3 benchmarks/bench_kernels.py [--params 200000] [--clients 16] [--repeat 5]

Prints the best wall time per backend and checks the outputs agree bitwise.
"""
import argparse
import timeit

import numpy as np

from hybridml.kernels import available_backends


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--params", type=int, default=200_000)
    ap.add_argument("--clients", type=int, default=16)
    ap.add_argument("--segments", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    seg_len = -(-args.params // args.segments)
    width = seg_len * args.segments
    rows = rng.normal(size=(args.clients, width))
    weights = rng.integers(50, 150, size=args.clients).astype(np.float64)
    seg_w = np.where(rng.random((args.clients, args.segments)) < 0.5, weights[:, None], 0.0)
    fallback = rng.normal(size=width)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    outputs = {}
    print(f"{args.clients} clients x {width} params, {args.segments} segments, best of {args.repeat}")
    for name, mod in backends.items():
        t_rows = min(timeit.repeat(lambda: mod.weighted_mean_rows(rows, weights), number=1, repeat=args.repeat))
        t_seg = min(
            timeit.repeat(
                lambda: mod.segment_weighted_mean(rows, seg_w, fallback, seg_len), number=1, repeat=args.repeat
            )
        )
        outputs[name] = (mod.weighted_mean_rows(rows, weights), mod.segment_weighted_mean(rows, seg_w, fallback, seg_len))
        print(f"{name:>7}: weighted_mean_rows {t_rows * 1e3:8.3f} ms   segment_weighted_mean {t_seg * 1e3:8.3f} ms")
    if len(outputs) == 2:
        a, b = outputs["python"], outputs["cython"]
        same = all(np.array_equal(x, y) for x, y in zip(a, b))
        print(f"outputs bit-identical: {same}")


if __name__ == "__main__":
    main()
