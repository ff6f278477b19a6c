"""Time each accelerated kernel on its numba and numpy paths.

Shapes follow one batch of 32 through the full-size network. Run with
``python3 benchmarks/bench_kernels.py [--repeat N] [--float64]``.
"""

import argparse
import time

import numpy as np

from capsroute import accel
from capsroute.memory import tune_allocator


def _time(fn, repeat):
    fn()  # warm-up and JIT compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(dtype, rng):
    x = rng.standard_normal((32, 15, 15, 8 * 16)).astype(dtype)
    g = rng.standard_normal((32, 7, 7, 3, 3, 8 * 16)).astype(dtype)
    d2 = rng.random((32, 49, 16, 72)).astype(dtype) * 4
    t1 = np.full(4, 0.25, dtype)
    t2 = np.geomspace(0.5, 2.0, 4).astype(dtype)
    gd = rng.standard_normal(d2.shape).astype(dtype)
    z = rng.standard_normal((32, 49, 16, 72, 64)).astype(dtype)
    s_prev = rng.standard_normal((32, 49, 16, 72, 16)).astype(dtype)
    h, s, gates, ts = accel._np_lstm_forward(z, s_prev)
    gh = rng.standard_normal(h.shape).astype(dtype)
    gs = rng.standard_normal(h.shape).astype(dtype)
    return {
        "window_gather": lambda: accel.window_gather(x, 3, 2),
        "window_scatter": lambda: accel.window_scatter(g, 15, 15, 2),
        "gm_forward": lambda: accel.gm_forward(d2, t1, t2),
        "gm_backward": lambda: accel.gm_backward(gd, d2, t1, t2),
        "lstm_forward": lambda: accel.lstm_forward(z, s_prev),
        "lstm_backward": lambda: accel.lstm_backward(gh, gs, s_prev, gates, ts),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--float64", action="store_true")
    args = ap.parse_args(argv)
    tune_allocator()
    dtype = np.float64 if args.float64 else np.float32
    table = cases(dtype, np.random.default_rng(0))
    print(f"{'kernel':<16}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  auto")
    for name, fn in table.items():
        with accel.backend("numba"):
            t_nb = _time(fn, args.repeat)
        with accel.backend("numpy"):
            t_np = _time(fn, args.repeat)
        pick = accel.AUTO_PREFERENCE[name]
        print(f"{name:<16}{t_nb * 1e3:>10.1f}{t_np * 1e3:>10.1f}{t_np / t_nb:>8.2f}x  {pick}")


if __name__ == "__main__":
    main()
