"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
Prints one line per kernel with the best-of-N time for each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from opinfnet.kernels import available_backends, load_backend


def cases(rng):
    K, B = 10, 50
    nl, ns = K * (K + 1) // 2, K * (K - 1) // 2
    P_l, P_s = rng.normal(size=(B, nl)), rng.normal(size=(B, ns))
    X, G = rng.normal(size=(B, K)), rng.normal(size=(B, K))
    u = 2.0 + 0.05 * rng.normal(size=500)
    T = rng.uniform(size=51 * 51)
    return {
        "burgers_rhs (N=500)": lambda m: m.burgers_rhs(u, 2 * np.pi / 500),
        "heat_rhs (51x51)": lambda m: m.heat_rhs(T, 50, 50, 0.02, 0.02, 1e-2, 0.2, 0.3, 2e-2),
        "skew_apply (B=50, K=10)": lambda m: m.skew_apply(P_s, X),
        "skew_vjp (B=50, K=10)": lambda m: m.skew_vjp(P_s, X, G),
        "spsd_apply (B=50, K=10)": lambda m: m.spsd_apply(P_l, X),
        "spsd_vjp (B=50, K=10)": lambda m: m.spsd_vjp(P_l, X, G),
        "sqr_pack (B=50, K=10)": lambda m: m.sqr_pack(X),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    backends = available_backends()
    mods = {b: load_backend(b) for b in backends}
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + "   speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        times = {}
        for b, m in mods.items():
            t = min(timeit.repeat(lambda: fn(m), number=args.number, repeat=args.repeat))
            times[b] = t / args.number
        line = f"{name:28s}" + "".join(f"{times[b] * 1e6:11.2f} us" for b in backends)
        if "cython" in times:
            line += f"   {times['python'] / times['cython']:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
