"""Time the compiled and numpy kernels on shared inputs and check they agree.

Usage: python3 benchmarks/bench_kernels.py [--repeat R] [--paths P] [--grid N ...]
"""
import argparse
import timeit

import numpy as np

from fbmlab import _kernels as python_backend
from fbmlab import kernels


def dbeta_inputs(P, N, n, seed=0):
    r = np.random.default_rng(seed)
    A, A2 = 0.3 / np.sqrt(N) * r.normal(size=(2, P, N, n, n))
    Q, Q2 = 0.3 / np.sqrt(N) * r.normal(size=(2, P, N, n, n, n))
    jump = r.normal(size=(P, N + 1, n, n, n))
    c = r.normal(size=(P, N + 1, n, n))
    return [np.ascontiguousarray(a) for a in (A, A2, Q, Q2, jump, c)]


def holder_inputs(N, n, seed=0):
    r = np.random.default_rng(seed)
    return np.linspace(0.0, 1.0, N + 1), np.cumsum(r.normal(size=(N + 1, n)), axis=0) / np.sqrt(N)


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--paths", type=int, default=4)
    ap.add_argument("--grid", type=int, nargs="+", default=[32, 64, 128])
    args = ap.parse_args(argv)
    backends = {"python": python_backend}
    if kernels.compiled_backend is not None:
        backends["cython"] = kernels.compiled_backend
    else:
        print("compiled extension not built; timing the numpy backend only")
    print(f"{'kernel':<16}{'N':>6}" + "".join(f"{name:>12}" for name in backends) + f"{'speedup':>10}{'max diff':>12}")
    for N in args.grid:
        cases = {"propagate_dbeta": (lambda b, a=dbeta_inputs(args.paths, N, 2): b.propagate_dbeta(*a, heun=True)),
                 "holder_seminorm": (lambda b, a=holder_inputs(4 * N, 2): b.holder_seminorm(*a, 0.5))}
        for name, call in cases.items():
            times = {k: best(lambda b=b: call(b), args.repeat) for k, b in backends.items()}
            outs = [np.asarray(call(b)) for b in backends.values()]
            diff = max(float(np.abs(o - outs[0]).max()) for o in outs)
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<16}{N:>6}" + "".join(f"{t:>11.4f}s" for t in times.values()) + f"{speed:>9.1f}x{diff:>12.1e}")


if __name__ == "__main__":
    main()
