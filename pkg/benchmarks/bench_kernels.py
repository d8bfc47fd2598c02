"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--voxels N] [--repeat R]

Each kernel runs single-threaded on identical inputs; the table reports the
best of ``R`` wall-clock timings and the largest absolute disagreement.
"""

import argparse
import os
import time

os.environ.setdefault("SPINREV_THREADS", "1")

import numpy as np  # noqa: E402

from spinrev import kernels  # noqa: E402
from spinrev.fitting import default_protocol  # noqa: E402
from spinrev.physics import Bssfp, Gre, Molli, Msasha  # noqa: E402


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(n, rng):
    pd = rng.uniform(0.05, 1.2, n)
    t1 = rng.uniform(100, 2500, n)
    t2 = np.minimum(rng.uniform(20, 400, n), t1)
    for p in (Bssfp(0.8), Molli(0.6, 400.0), Gre(0.26, 5.0, 1.5), Msasha(600.0, 30.0, 25.0)):
        yield f"signal_grad {p.kind}", lambda impl, p=p: kernels.signal_grad(
            p.code, p.kernel_params(), pd, t1, t2, impl=impl)

    zq = rng.standard_normal((n, 3))
    centers = rng.standard_normal((192, 3))
    logw = np.zeros(192)
    yield "kde_posterior (192 centres)", lambda impl: kernels.kde_posterior(
        zq, centers, logw, want_second=True, impl=impl)

    protocol = default_protocol()
    m = max(n // 50, 1)
    ts = np.array([p.ts for p in protocol])
    td = np.array([p.td for p in protocol])
    te = np.array([p.te for p in protocol])
    a, b, c = pd[:m, None], t1[:m, None], t2[:m, None]
    y = a * (1 - (1 - (1 - np.exp(-ts / b)) * np.exp(-te / c)) * np.exp(-td / b))
    starts = np.array([(300.0, 30.0), (300.0, 200.0), (1500.0, 30.0), (1500.0, 200.0)])
    yield f"lm_msasha ({m} voxels)", lambda impl: kernels.lm_msasha(
        y, ts, td, te, False, starts, np.array([0.0, 50.0, 5.0]), np.array([np.inf, 3000.0, 500.0]),
        10.0, 1e-8, 200, impl=impl)


def max_diff(a, b):
    # lm_msasha: compare fitted parameters only, iteration counts may differ
    if isinstance(a, tuple) and len(a) == 5:
        return max_diff(a[0], b[0])
    if isinstance(a, tuple):
        return max(max_diff(u, v) for u, v in zip(a, b) if u is not None)
    return float(np.max(np.abs(np.asarray(a, float) - np.asarray(b, float))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--voxels", type=int, default=128 * 128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend unavailable; timing numpy only")
    rng = np.random.default_rng(0)
    names = list(impls)
    print(f"{'kernel':32s}" + "".join(f"{n:>12s}" for n in names) + f"{'speedup':>10s}{'max |diff|':>12s}")
    for label, fn in cases(args.voxels, rng):
        res = {n: best_of(lambda: fn(impls[n]), args.repeat) for n in names}
        row = f"{label:32s}" + "".join(f"{res[n][0] * 1e3:10.2f}ms" for n in names)
        if len(names) > 1:
            row += f"{res['numpy'][0] / res['cython'][0]:9.1f}x{max_diff(res['numpy'][1], res['cython'][1]):12.1e}"
        print(row)


if __name__ == "__main__":
    main()
