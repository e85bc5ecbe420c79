"""Time the numba and numpy implementations of each hot kernel.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--small]

Shapes default to the experiment sizes: 18 nodes, LRCS n=600, q=600,
r=4, m_tilde=11. ``--small`` shrinks everything for a quick check.
"""

import argparse
import time

import numpy as np

from byzfed import _kernels as K


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def make_cases(small: bool):
    rng = np.random.default_rng(0)
    L = 18
    n, q, r, m = (120, 120, 4, 11) if small else (600, 600, 4, 11)
    d = 2000 if small else 36000  # flattened payload size (n * r at n=600, r=60)
    pts = rng.standard_normal((L, d))
    G = rng.standard_normal((L, 50))
    gram = G @ G.T
    A = rng.standard_normal((q, m, n))
    Y = rng.standard_normal((q, m))
    U = np.linalg.qr(rng.standard_normal((n, r)))[0]
    return [
        ("weiszfeld_points", (pts, pts.mean(axis=0), 10, 0.0, 1e-12)),
        ("weiszfeld_gram", (gram, np.full(L, 1.0 / L), 10, 0.0, 1e-12)),
        ("lrcs_node_step", (A, Y, U)),
        ("backproject", (A, Y)),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--small", action="store_true")
    args = p.parse_args(argv)

    if not K.HAVE_NUMBA:
        print("numba not available; nothing to compare")
        return 1
    cases = make_cases(args.small)
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  max|diff|")
    for name, kargs in cases:
        f_np = getattr(K, f"{name}_numpy")
        f_nb = getattr(K, f"{name}_numba")
        out_nb = f_nb(*kargs)  # JIT warm-up
        out_np = f_np(*kargs)
        first = lambda o: o[0] if isinstance(o, tuple) else o  # noqa: E731
        diff = float(np.max(np.abs(first(out_np) - first(out_nb))))
        t_np = _best(f_np, kargs, args.repeat)
        t_nb = _best(f_nb, kargs, args.repeat)
        print(f"{name:<18} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.2f}x  {diff:.1e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
