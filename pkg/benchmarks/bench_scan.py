"""Time the selective scan: reference vs chunked, compiled core vs numpy fallback.

    python3 benchmarks/bench_scan.py [--lengths 1000 10000 100000] [--repeats 3]

Prints one row per (length, scan, backend) with the best wall time and the
speedup of the compiled core over the fallback.
"""

import argparse
import time

import numpy as np

from spoofmamba.kernels import compiled_available, get_backend
from spoofmamba.ssm import selective_scan_chunked, selective_scan_ref


def inputs(L, D, N, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((L, D)), rng.uniform(1e-3, 0.5, (L, D)), rng.standard_normal((L, N)),
            rng.standard_normal((L, N)), -rng.uniform(0.1, 4.0, (D, N)), rng.standard_normal(D))


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lengths", type=int, nargs="+", default=[1000, 10000, 100000])
    parser.add_argument("--dim", type=int, default=8)
    parser.add_argument("--state", type=int, default=16)
    parser.add_argument("--chunk", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args(argv)

    backends = ["compiled", "python"] if compiled_available() else ["python"]
    print(f"{'L':>7} {'scan':>8} {'backend':>9} {'best ms':>10} {'speedup':>8}")
    for L in args.lengths:
        u, delta, B, C, A, d = inputs(L, args.dim, args.state)
        for scan in ("ref", "chunked"):
            timings = {}
            for name in backends:
                k = get_backend(name)
                if scan == "ref":
                    fn = lambda: selective_scan_ref(u, delta, B, C, A, d, backend=k)
                else:
                    fn = lambda: selective_scan_chunked(u, delta, B, C, A, d, args.chunk, backend=k)
                timings[name] = best_time(fn, args.repeats)
            for name in backends:
                speed = timings["python"] / timings[name]
                print(f"{L:>7} {scan:>8} {name:>9} {timings[name] * 1e3:>10.3f} {speed:>7.1f}x")


if __name__ == "__main__":
    main()
