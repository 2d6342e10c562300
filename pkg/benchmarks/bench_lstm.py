"""Time the compiled LSTM recurrence against the numpy fallback.

    python3 benchmarks/bench_lstm.py [--repeat 20]

Each row runs forward + backward on one (T, B, H) shape with both backends,
checks that they agree, and reports the median wall time and the speed-up.
The shapes cover the model's real workloads: the region sequence of a
batch (short T, moderate B) and a longer single sequence.
"""
import argparse
import statistics
import time

import numpy as np

from fashionke.numcore import kernels

SHAPES = [  # (T, B, H)
    (4, 32, 16),
    (8, 32, 64),
    (12, 64, 128),
    (64, 1, 64),
]


def _inputs(T, B, H, rng):
    gx = rng.normal(size=(T, B, 4 * H))
    wh = rng.normal(scale=1.0 / np.sqrt(H), size=(H, 4 * H))
    lengths = rng.integers(1, T + 1, size=B)
    mask = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)
    return gx, wh, mask, np.zeros((B, H)), np.zeros((B, H))


def _run(fwd, bwd, args, dout):
    gx, wh, mask, h0, c0 = args
    out, hs, cs, gates, tc = fwd(gx, wh, mask, h0, c0)
    dg, dh0, dc0 = bwd(dout, np.ones_like(h0), np.zeros_like(c0), wh, mask, cs, gates, tc)
    return out, dg


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    available = kernels.backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(available))}")
    if "cython" not in available:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'T':>4} {'B':>4} {'H':>4}  {'python ms':>10}  {'cython ms':>10}  {'speed-up':>8}  {'max diff':>9}")
    for T, B, H in SHAPES:
        inputs = _inputs(T, B, H, rng)
        dout = rng.normal(size=(T, B, H))
        timings, results = {}, {}
        for name, (fwd, bwd) in sorted(available.items()):
            results[name] = _run(fwd, bwd, inputs, dout)
            timings[name] = _median_time(lambda: _run(fwd, bwd, inputs, dout), args.repeat)
        py = timings["python"] * 1e3
        if "cython" in timings:
            cy = timings["cython"] * 1e3
            diff = max(float(np.abs(a - b).max()) for a, b in zip(results["python"], results["cython"]))
            print(f"{T:>4} {B:>4} {H:>4}  {py:>10.3f}  {cy:>10.3f}  {py / cy:>7.1f}x  {diff:>9.1e}")
        else:
            print(f"{T:>4} {B:>4} {H:>4}  {py:>10.3f}  {'-':>10}  {'-':>8}  {'-':>9}")


if __name__ == "__main__":
    main()
