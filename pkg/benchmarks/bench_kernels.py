"""Timing comparison of the LSTM recurrence backends.

Runs the fused sequence kernels on realistic training shapes with both the
numba-compiled and the plain numpy time loop, and prints a small table of
medians plus the speedup. The surrounding BLAS work (input projection,
weight-gradient matmuls) is identical for both, so the difference isolates
the per-timestep Python/JIT overhead.

Usage: python benchmarks/bench_kernels.py [--bptt 70] [--batch 16]
       [--hidden 64] [--emb 64] [--repeats 20] [--dtype f32]
"""

import argparse
import statistics
import time

import numpy as np

from opscan.kernels import HAS_NUMBA, lstm_seq_backward, lstm_seq_forward


def make_inputs(T, B, D, H, dtype, seed=0):
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(H)
    return {
        "x": rng.normal(0, 0.5, (T, B, D)).astype(dtype),
        "wx": rng.uniform(-bound, bound, (D, 4 * H)).astype(dtype),
        "wh": rng.uniform(-bound, bound, (H, 4 * H)).astype(dtype),
        "b": np.zeros(4 * H, dtype=dtype),
        "h0": np.zeros((B, H), dtype=dtype),
        "c0": np.zeros((B, H), dtype=dtype),
    }


def time_backend(backend, inp, repeats):
    fw = lambda: lstm_seq_forward(
        inp["x"], inp["wx"], inp["wh"], inp["b"], inp["h0"], inp["c0"], backend=backend
    )
    h_seq, c_seq, gates = fw()  # warmup: first numba call compiles
    dh = np.ones_like(h_seq)
    bw = lambda: lstm_seq_backward(
        dh, inp["x"], inp["wx"], inp["wh"], inp["h0"], inp["c0"],
        h_seq, c_seq, gates, backend=backend,
    )
    bw()
    fw_times, bw_times = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fw()
        fw_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        bw()
        bw_times.append(time.perf_counter() - t0)
    return statistics.median(fw_times), statistics.median(bw_times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bptt", type=int, default=70)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--emb", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    args = ap.parse_args()

    dtype = np.float32 if args.dtype == "f32" else np.float64
    inp = make_inputs(args.bptt, args.batch, args.emb, args.hidden, dtype)
    backends = ["numpy"] + (["numba"] if HAS_NUMBA else [])
    if not HAS_NUMBA:
        print("numba not importable: timing the numpy path only")

    print(f"shape: bptt={args.bptt} batch={args.batch} emb={args.emb} "
          f"hidden={args.hidden} dtype={args.dtype} repeats={args.repeats}")
    results = {}
    for backend in backends:
        fw_ms, bw_ms = time_backend(backend, inp, args.repeats)
        results[backend] = (fw_ms, bw_ms)

    header = f"{'backend':<8} {'forward ms':>11} {'backward ms':>12} {'total ms':>9}"
    print(header)
    print("-" * len(header))
    for backend, (fw_ms, bw_ms) in results.items():
        print(f"{backend:<8} {fw_ms * 1e3:>11.3f} {bw_ms * 1e3:>12.3f} "
              f"{(fw_ms + bw_ms) * 1e3:>9.3f}")
    if "numba" in results:
        np_total = sum(results["numpy"])
        nb_total = sum(results["numba"])
        print(f"\nnumba speedup: {np_total / nb_total:.2f}x")


if __name__ == "__main__":
    main()
