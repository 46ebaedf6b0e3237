"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and problem size with the best-of-N time for
each backend and the speedup.
"""

import argparse
import timeit

import numpy as np

from mcu_lab import _backend
from mcu_lab import _kernels_py as py

SIZES = [(32, 16, 32, 4), (256, 32, 64, 4), (2048, 64, 128, 8)]


def problem(N, d, hidden, C, seed=0):
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((hidden, d)) / np.sqrt(d)
    b1 = rng.standard_normal(hidden)
    Wout = rng.standard_normal((C, hidden))
    bout = rng.standard_normal(C)
    X = rng.standard_normal((N, d))
    H = np.tanh(X @ W1.T + b1)
    return W1, b1, Wout, bout, X, H, rng.standard_normal((N, hidden)), rng.standard_normal((N, C))


def calls(mod, W1, b1, Wout, bout, X, H, g_h, g_z):
    return {
        "forward_batch": lambda: mod.forward_batch(W1, b1, Wout, bout, X),
        "backward_batch": lambda: mod.backward_batch(Wout, X, H, g_h, g_z),
        "per_sample_grads": lambda: mod.per_sample_grads(Wout, X, H, g_h, g_z),
    }


def best(fn, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    compiled = _backend.compiled_kernels
    if compiled is None:
        print("compiled kernels are not built; only the fallback can be timed")
    print(f"{'kernel':<18}{'N,d,hidden,C':<20}{'compiled_ms':>12}{'python_ms':>12}{'speedup':>9}")
    for size in SIZES:
        args_ = problem(*size)
        py_calls = calls(py, *args_)
        c_calls = calls(compiled, *args_) if compiled is not None else {}
        for name, fn in py_calls.items():
            t_py = best(fn, args.repeat)
            t_c = best(c_calls[name], args.repeat) if c_calls else float("nan")
            label = ",".join(map(str, size))
            print(f"{name:<18}{label:<20}{t_c * 1e3:>12.4f}{t_py * 1e3:>12.4f}{t_py / t_c:>9.2f}")


if __name__ == "__main__":
    main()
