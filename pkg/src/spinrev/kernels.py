"""Backend selection for the per-voxel hot loops.

The compiled extension ``spinrev._kernels`` is used when it imports;
otherwise the numpy implementation in ``spinrev._kernels_py`` takes over.
Set ``SPINREV_PURE_PYTHON=1`` to force the fallback and ``SPINREV_THREADS``
to cap the number of worker threads the voxel axis is split across.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels_py

logger = logging.getLogger(__name__)

BSSFP, MOLLI, GRE, MSASHA, LINEAR = range(5)

_compiled = None
if os.environ.get("SPINREV_PURE_PYTHON", "") != "1":
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "numpy"

_MIN_CHUNK = 4096


def backends() -> dict:
    """Available kernel modules keyed by name (for tests and benchmarks)."""
    out = {"numpy": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out


def thread_count() -> int:
    raw = os.environ.get("SPINREV_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer SPINREV_THREADS=%r", raw)
    return max(1, os.cpu_count() or 1)


def _chunks(n: int) -> list[slice]:
    workers = min(thread_count(), max(1, n // _MIN_CHUNK))
    if workers <= 1:
        return [slice(0, n)]
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def _run(fn, slices):
    if len(slices) == 1:
        fn(slices[0])
        return
    with ThreadPoolExecutor(max_workers=len(slices)) as pool:
        list(pool.map(fn, slices))


def signal_grad(kind, prm, pd, t1, t2, want_grad=True, impl=None):
    """Signal and (optionally) ``(d/dPD, d/dT1, d/dT2)`` for flat voxel arrays."""
    impl = impl or _impl
    prm = np.ascontiguousarray(prm, dtype=np.float64)
    pd = np.ascontiguousarray(pd, dtype=np.float64)
    t1 = np.ascontiguousarray(t1, dtype=np.float64)
    t2 = np.ascontiguousarray(t2, dtype=np.float64)
    n = pd.shape[0]
    out = np.empty(n)
    grad = np.empty((n, 3)) if want_grad else None

    def work(sl):
        impl.signal_grad(kind, prm, pd[sl], t1[sl], t2[sl], out[sl],
                         grad[sl] if grad is not None else None)

    _run(work, _chunks(n))
    return out, grad


def kde_posterior(zq, centers, logw, want_second=False, impl=None):
    """Responsibility-weighted mean (and second moments) of whitened centres."""
    impl = impl or _impl
    zq = np.ascontiguousarray(zq, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    logw = np.ascontiguousarray(logw, dtype=np.float64)
    n = zq.shape[0]
    mean = np.empty((n, 3))
    second = np.empty((n, 6)) if want_second else None

    def work(sl):
        impl.kde_posterior(zq[sl], centers, logw, mean[sl],
                           second[sl] if second is not None else None)

    _run(work, _chunks(n))
    return mean, second


def lm_msasha(y, ts, td, te, verbatim, starts, lower, upper, a_factor, tol, maxit, impl=None):
    """Multi-start bounded LM fit of the saturation-recovery/T2-prep model."""
    impl = impl or _impl
    y = np.ascontiguousarray(y, dtype=np.float64)
    n, _ = y.shape
    ns = len(starts)
    params = np.empty((n, 3))
    cost = np.empty(n)
    iters = np.empty(n, dtype=np.int64)
    conv = np.empty(n, dtype=np.uint8)
    start_cost = np.empty((n, ns))
    args = [np.ascontiguousarray(v, dtype=np.float64) for v in (ts, td, te)]
    starts = np.ascontiguousarray(starts, dtype=np.float64)
    lower = np.ascontiguousarray(lower, dtype=np.float64)
    upper = np.ascontiguousarray(upper, dtype=np.float64)

    def work(sl):
        impl.lm_msasha(y[sl], *args, int(verbatim), starts, lower, upper, float(a_factor),
                       float(tol), int(maxit), params[sl], cost[sl], iters[sl], conv[sl],
                       start_cost[sl])

    _run(work, _chunks(n))
    return params, cost, iters, conv.astype(bool), start_cost
