# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-voxel kernels.

Every function here has a numpy twin with the same signature in
``spinrev._kernels_py``; ``spinrev.kernels`` picks one at import time.
Arrays are C-contiguous float64. Loops release the GIL so callers can
split the voxel axis across threads.
"""

from libc.math cimport exp, sin, cos, fabs, isinf, INFINITY

DEF BSSFP = 0
DEF MOLLI = 1
DEF GRE = 2
DEF MSASHA = 3
DEF LINEAR = 4


cdef inline void _bssfp(double s, double c, double pd, double t1, double t2,
                        double* f, double* g) noexcept nogil:
    cdef double d = 1.0 + c + (1.0 - c) * t1 / t2
    cdef double d2 = d * d
    f[0] = pd * s / d
    g[0] = s / d
    g[1] = -pd * s * (1.0 - c) / t2 / d2
    g[2] = pd * s * (1.0 - c) * t1 / (t2 * t2) / d2


cdef inline void _molli(double w, double tinv, double pd, double t1, double t2,
                        double* f, double* g) noexcept nogil:
    cdef double s = sin(w), c = cos(w)
    cdef double s2 = sin(0.5 * w), c2 = cos(0.5 * w)
    cdef double fs, gs[3]
    _bssfp(s, c, pd, t1, t2, &fs, gs)
    cdef double d = 1.0 + c + (1.0 - c) * t1 / t2
    cdef double k = s2 / s
    cdef double inv = 1.0 + k * d
    cdef double rate = c2 * c2 / t1 + s2 * s2 / t2
    cdef double e = exp(-tinv * rate)
    cdef double shape = 1.0 - inv * e
    cdef double val = fs * shape
    cdef double sign = 1.0 if val >= 0.0 else -1.0
    cdef double dinv1 = k * (1.0 - c) / t2
    cdef double dinv2 = -k * (1.0 - c) * t1 / (t2 * t2)
    cdef double de1 = tinv * e * c2 * c2 / (t1 * t1)
    cdef double de2 = tinv * e * s2 * s2 / (t2 * t2)
    f[0] = fabs(val)
    g[0] = sign * gs[0] * shape
    g[1] = sign * (gs[1] * shape - fs * (dinv1 * e + inv * de1))
    g[2] = sign * (gs[2] * shape - fs * (dinv2 * e + inv * de2))


cdef inline void _gre(double s, double c, double tr, double te, double pd,
                      double t1, double t2, double* f, double* g) noexcept nogil:
    cdef double e1 = exp(-tr / t1)
    cdef double e2 = exp(-te / t2)
    cdef double den = 1.0 - c * e1
    cdef double h = (1.0 - e1) / den
    cdef double dh = (c - 1.0) / (den * den)
    f[0] = pd * s * h * e2
    g[0] = s * h * e2
    g[1] = pd * s * e2 * dh * e1 * tr / (t1 * t1)
    g[2] = pd * s * h * e2 * te / (t2 * t2)


cdef inline void _msasha(double ts, double td, double te, int verbatim, double a,
                         double t1, double t2, double* f, double* g) noexcept nogil:
    cdef double es, q, dq1
    if ts == 0.0:
        q = 0.0
        dq1 = 0.0
    elif isinf(ts):
        q = 1.0
        dq1 = 0.0
    elif verbatim:
        q = 1.0 - exp(-ts / te)
        dq1 = 0.0
    else:
        es = exp(-ts / t1)
        q = 1.0 - es
        dq1 = -es * ts / (t1 * t1)
    cdef double e2 = exp(-te / t2)
    cdef double ed = exp(-td / t1)
    cdef double b = 1.0 - q * e2
    cdef double core = 1.0 - b * ed
    f[0] = a * core
    g[0] = core
    # d(b)/dT1 = -e2 * dq1 ; d(ed)/dT1 = ed * td / T1^2
    g[1] = a * (e2 * dq1 * ed - b * ed * td / (t1 * t1))
    g[2] = a * (q * e2 * te / (t2 * t2)) * ed


cdef inline void _eval(int kind, const double* prm, double pd, double t1, double t2,
                       double* f, double* g) noexcept nogil:
    if kind == BSSFP:
        _bssfp(sin(prm[0]), cos(prm[0]), pd, t1, t2, f, g)
    elif kind == MOLLI:
        _molli(prm[0], prm[1], pd, t1, t2, f, g)
    elif kind == GRE:
        _gre(sin(prm[0]), cos(prm[0]), prm[1], prm[2], pd, t1, t2, f, g)
    elif kind == MSASHA:
        _msasha(prm[0], prm[1], prm[2], <int> prm[3], pd, t1, t2, f, g)
    else:
        f[0] = prm[0] * pd + prm[1] * t1 + prm[2] * t2 + prm[3]
        g[0] = prm[0]
        g[1] = prm[1]
        g[2] = prm[2]


def signal_grad(int kind, const double[::1] prm, const double[::1] pd,
                const double[::1] t1, const double[::1] t2,
                double[::1] out, double[:, ::1] grad=None):
    """Evaluate one sequence's signal (and optionally its gradient) per voxel."""
    cdef Py_ssize_t i, n = pd.shape[0]
    cdef double f, g[3]
    cdef bint want = grad is not None
    cdef const double* p = &prm[0]
    with nogil:
        for i in range(n):
            _eval(kind, p, pd[i], t1[i], t2[i], &f, g)
            out[i] = f
            if want:
                grad[i, 0] = g[0]
                grad[i, 1] = g[1]
                grad[i, 2] = g[2]


def kde_posterior(const double[:, ::1] zq, const double[:, ::1] centers,
                  const double[::1] logw, double[:, ::1] mean_out,
                  double[:, ::1] second_out=None):
    """Softmax-weighted mean (and second moment) of whitened kernel centres.

    ``zq`` and ``centers`` live in the whitened space of the shared kernel
    covariance, so the responsibility of centre m for query i is
    proportional to ``exp(logw[m] - |zq[i] - centers[m]|^2 / 2)``.
    ``second_out`` holds the six unique entries xx, xy, xz, yy, yz, zz.
    """
    cdef Py_ssize_t i, m, n = zq.shape[0], nc = centers.shape[0]
    cdef double a, b, c, d, best, w, tot, mx, my, mz
    cdef double sxx, sxy, sxz, syy, syz, szz
    cdef bint want = second_out is not None
    with nogil:
        for i in range(n):
            best = -INFINITY
            for m in range(nc):
                a = zq[i, 0] - centers[m, 0]
                b = zq[i, 1] - centers[m, 1]
                c = zq[i, 2] - centers[m, 2]
                d = logw[m] - 0.5 * (a * a + b * b + c * c)
                if d > best:
                    best = d
            tot = 0.0
            mx = 0.0
            my = 0.0
            mz = 0.0
            sxx = 0.0
            sxy = 0.0
            sxz = 0.0
            syy = 0.0
            syz = 0.0
            szz = 0.0
            for m in range(nc):
                a = zq[i, 0] - centers[m, 0]
                b = zq[i, 1] - centers[m, 1]
                c = zq[i, 2] - centers[m, 2]
                w = exp(logw[m] - 0.5 * (a * a + b * b + c * c) - best)
                tot = tot + w
                a = centers[m, 0]
                b = centers[m, 1]
                c = centers[m, 2]
                mx = mx + w * a
                my = my + w * b
                mz = mz + w * c
                if want:
                    sxx = sxx + w * a * a
                    sxy = sxy + w * a * b
                    sxz = sxz + w * a * c
                    syy = syy + w * b * b
                    syz = syz + w * b * c
                    szz = szz + w * c * c
            mean_out[i, 0] = mx / tot
            mean_out[i, 1] = my / tot
            mean_out[i, 2] = mz / tot
            if want:
                second_out[i, 0] = sxx / tot
                second_out[i, 1] = sxy / tot
                second_out[i, 2] = sxz / tot
                second_out[i, 3] = syy / tot
                second_out[i, 4] = syz / tot
                second_out[i, 5] = szz / tot


cdef inline double _cost(const double* y, Py_ssize_t k, const double* ts,
                         const double* td, const double* te, int verbatim,
                         const double* p, double* r, double* jac) noexcept nogil:
    cdef Py_ssize_t j
    cdef double f, g[3], tot = 0.0
    for j in range(k):
        _msasha(ts[j], td[j], te[j], verbatim, p[0], p[1], p[2], &f, g)
        r[j] = f - y[j]
        tot = tot + r[j] * r[j]
        if jac != NULL:
            jac[3 * j] = g[0]
            jac[3 * j + 1] = g[1]
            jac[3 * j + 2] = g[2]
    return tot


cdef inline double _clip(double v, double lo, double hi) noexcept nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


cdef inline bint _solve3(double* h, double* rhs, double* x) noexcept nogil:
    # Cramer's rule on a symmetric positive-definite 3x3 system.
    cdef double a = h[0], b = h[1], c = h[2]
    cdef double d = h[3], e = h[4], f = h[5]
    cdef double g = h[6], hh = h[7], i = h[8]
    cdef double c00 = e * i - f * hh
    cdef double c01 = -(d * i - f * g)
    cdef double c02 = d * hh - e * g
    cdef double det = a * c00 + b * c01 + c * c02
    if det == 0.0 or det != det:
        return False
    x[0] = (rhs[0] * c00 + b * (f * rhs[2] - rhs[1] * i) + c * (rhs[1] * hh - e * rhs[2])) / det
    x[1] = (a * (rhs[1] * i - f * rhs[2]) + rhs[0] * c01 + c * (d * rhs[2] - rhs[1] * g)) / det
    x[2] = (a * (e * rhs[2] - rhs[1] * hh) + b * (rhs[1] * g - d * rhs[2]) + rhs[0] * c02) / det
    return True


def lm_msasha(const double[:, ::1] y, const double[::1] ts, const double[::1] td,
              const double[::1] te, int verbatim, const double[:, ::1] starts,
              const double[::1] lower, const double[::1] upper, double a_factor,
              double tol, int maxit, double[:, ::1] params, double[::1] cost,
              long[::1] iters, unsigned char[::1] conv, double[:, ::1] start_cost):
    """Bounded Levenberg-Marquardt fit of (A, T1, T2) per voxel, multi-start."""
    cdef Py_ssize_t n = y.shape[0], k = y.shape[1], ns = starts.shape[0]
    cdef Py_ssize_t i, j, s, a_, b_
    cdef int it, best_it, done
    cdef double ymax, sgg, sgy, lam, c, cn, step, rel, ysq, best
    cdef double p[3], pn[3], lo[3], hi[3], jtj[9], h[9], jtr[3], delta[3], neg[3]
    cdef double best_p[3]
    cdef double f, g[3]
    cdef bint best_conv, ok
    if k > 64:
        raise ValueError("at most 64 acquisitions per stack")
    cdef double r[64]
    cdef double jac[192]
    with nogil:
        for i in range(n):
            ymax = 0.0
            ysq = 0.0
            for j in range(k):
                if fabs(y[i, j]) > ymax:
                    ymax = fabs(y[i, j])
                ysq = ysq + y[i, j] * y[i, j]
            if ymax == 0.0:
                params[i, 0] = 0.0
                params[i, 1] = lower[1]
                params[i, 2] = lower[2]
                cost[i] = 0.0
                iters[i] = 0
                conv[i] = 1
                for s in range(ns):
                    start_cost[i, s] = 0.0
                continue
            lo[0] = lower[0]
            lo[1] = lower[1]
            lo[2] = lower[2]
            hi[0] = a_factor * ymax
            hi[1] = upper[1]
            hi[2] = upper[2]
            best = INFINITY
            best_it = 0
            best_conv = False
            for s in range(ns):
                sgg = 0.0
                sgy = 0.0
                for j in range(k):
                    _msasha(ts[j], td[j], te[j], verbatim, 1.0, starts[s, 0], starts[s, 1], &f, g)
                    sgg = sgg + f * f
                    sgy = sgy + f * y[i, j]
                p[0] = _clip(sgy / sgg if sgg > 0.0 else ymax, lo[0], hi[0])
                p[1] = _clip(starts[s, 0], lo[1], hi[1])
                p[2] = _clip(starts[s, 1], lo[2], hi[2])
                c = _cost(&y[i, 0], k, &ts[0], &td[0], &te[0], verbatim, p, r, jac)
                start_cost[i, s] = c
                lam = 1e-3
                done = 0
                it = 0
                while it < maxit:
                    it = it + 1
                    if c <= 1e-30 * ysq:
                        done = 1
                        break
                    for a_ in range(3):
                        jtr[a_] = 0.0
                        for b_ in range(3):
                            jtj[3 * a_ + b_] = 0.0
                    for j in range(k):
                        for a_ in range(3):
                            jtr[a_] = jtr[a_] + jac[3 * j + a_] * r[j]
                            for b_ in range(3):
                                jtj[3 * a_ + b_] = jtj[3 * a_ + b_] + jac[3 * j + a_] * jac[3 * j + b_]
                    for a_ in range(9):
                        h[a_] = jtj[a_]
                    for a_ in range(3):
                        h[4 * a_] = jtj[4 * a_] * (1.0 + lam) + 1e-300
                        neg[a_] = -jtr[a_]
                    ok = _solve3(h, neg, delta)
                    if ok:
                        for a_ in range(3):
                            pn[a_] = _clip(p[a_] + delta[a_], lo[a_], hi[a_])
                        cn = _cost(&y[i, 0], k, &ts[0], &td[0], &te[0], verbatim, pn, r, NULL)
                    else:
                        cn = INFINITY
                    if cn < c:
                        step = 0.0
                        for a_ in range(3):
                            rel = fabs(pn[a_] - p[a_]) / (fabs(p[a_]) if fabs(p[a_]) > 1e-12 else 1e-12)
                            if rel > step:
                                step = rel
                            p[a_] = pn[a_]
                        c = _cost(&y[i, 0], k, &ts[0], &td[0], &te[0], verbatim, p, r, jac)
                        lam = lam * 0.1
                        if lam < 1e-12:
                            lam = 1e-12
                        if step < tol:
                            done = 1
                            break
                    else:
                        # restore residuals at p (trial overwrote them)
                        c = _cost(&y[i, 0], k, &ts[0], &td[0], &te[0], verbatim, p, r, jac)
                        lam = lam * 10.0
                        if lam > 1e10:
                            done = 1
                            break
                if c < best:
                    best = c
                    best_p[0] = p[0]
                    best_p[1] = p[1]
                    best_p[2] = p[2]
                    best_it = it
                    best_conv = done == 1
            params[i, 0] = best_p[0]
            params[i, 1] = best_p[1]
            params[i, 2] = best_p[2]
            cost[i] = best
            iters[i] = best_it
            conv[i] = 1 if best_conv else 0
