"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

Signatures and output conventions match the Cython module exactly; the
loops are vectorised over voxels instead.
"""

import numpy as np

BSSFP, MOLLI, GRE, MSASHA, LINEAR = range(5)


def _bssfp(s, c, pd, t1, t2):
    d = 1.0 + c + (1.0 - c) * t1 / t2
    d2 = d * d
    f = pd * s / d
    g0 = s / d
    g1 = -pd * s * (1.0 - c) / t2 / d2
    g2 = pd * s * (1.0 - c) * t1 / (t2 * t2) / d2
    return f, g0, g1, g2


def _molli(w, tinv, pd, t1, t2):
    s, c = np.sin(w), np.cos(w)
    s2, c2 = np.sin(0.5 * w), np.cos(0.5 * w)
    fs, gs0, gs1, gs2 = _bssfp(s, c, pd, t1, t2)
    d = 1.0 + c + (1.0 - c) * t1 / t2
    k = s2 / s
    inv = 1.0 + k * d
    e = np.exp(-tinv * (c2 * c2 / t1 + s2 * s2 / t2))
    shape = 1.0 - inv * e
    val = fs * shape
    sign = np.where(val >= 0.0, 1.0, -1.0)
    dinv1 = k * (1.0 - c) / t2
    dinv2 = -k * (1.0 - c) * t1 / (t2 * t2)
    de1 = tinv * e * c2 * c2 / (t1 * t1)
    de2 = tinv * e * s2 * s2 / (t2 * t2)
    return (
        np.abs(val),
        sign * gs0 * shape,
        sign * (gs1 * shape - fs * (dinv1 * e + inv * de1)),
        sign * (gs2 * shape - fs * (dinv2 * e + inv * de2)),
    )


def _gre(s, c, tr, te, pd, t1, t2):
    e1 = np.exp(-tr / t1)
    e2 = np.exp(-te / t2)
    den = 1.0 - c * e1
    h = (1.0 - e1) / den
    dh = (c - 1.0) / (den * den)
    return (
        pd * s * h * e2,
        s * h * e2,
        pd * s * e2 * dh * e1 * tr / (t1 * t1),
        pd * s * h * e2 * te / (t2 * t2),
    )


def _msasha(ts, td, te, verbatim, a, t1, t2):
    if ts == 0.0:
        q = np.zeros_like(t1)
        dq1 = np.zeros_like(t1)
    elif np.isinf(ts):
        q = np.ones_like(t1)
        dq1 = np.zeros_like(t1)
    elif verbatim:
        q = np.full_like(t1, 1.0 - np.exp(-ts / te) if te > 0 else 1.0)
        dq1 = np.zeros_like(t1)
    else:
        es = np.exp(-ts / t1)
        q = 1.0 - es
        dq1 = -es * ts / (t1 * t1)
    e2 = np.exp(-te / t2)
    ed = np.exp(-td / t1)
    b = 1.0 - q * e2
    core = 1.0 - b * ed
    return (
        a * core,
        core,
        a * (e2 * dq1 * ed - b * ed * td / (t1 * t1)),
        a * (q * e2 * te / (t2 * t2)) * ed,
    )


def _eval(kind, prm, pd, t1, t2):
    if kind == BSSFP:
        return _bssfp(np.sin(prm[0]), np.cos(prm[0]), pd, t1, t2)
    if kind == MOLLI:
        return _molli(prm[0], prm[1], pd, t1, t2)
    if kind == GRE:
        return _gre(np.sin(prm[0]), np.cos(prm[0]), prm[1], prm[2], pd, t1, t2)
    if kind == MSASHA:
        return _msasha(prm[0], prm[1], prm[2], int(prm[3]), pd, t1, t2)
    f = prm[0] * pd + prm[1] * t1 + prm[2] * t2 + prm[3]
    one = np.ones_like(pd)
    return f, prm[0] * one, prm[1] * one, prm[2] * one


def signal_grad(kind, prm, pd, t1, t2, out, grad=None):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        f, g0, g1, g2 = _eval(kind, prm, pd, t1, t2)
    out[:] = f
    if grad is not None:
        grad[:, 0] = g0
        grad[:, 1] = g1
        grad[:, 2] = g2


def kde_posterior(zq, centers, logw, mean_out, second_out=None, block=1024):
    for lo in range(0, zq.shape[0], block):
        q = zq[lo:lo + block]
        d2 = (
            np.sum(q * q, axis=1)[:, None]
            - 2.0 * q @ centers.T
            + np.sum(centers * centers, axis=1)[None, :]
        )
        logits = logw[None, :] - 0.5 * d2
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        mean_out[lo:lo + block] = w @ centers
        if second_out is not None:
            cx, cy, cz = centers[:, 0], centers[:, 1], centers[:, 2]
            prods = np.stack([cx * cx, cx * cy, cx * cz, cy * cy, cy * cz, cz * cz], axis=1)
            second_out[lo:lo + block] = w @ prods


def _stack_eval(y, ts, td, te, verbatim, p, want_jac):
    n, k = y.shape
    f = np.empty((n, k))
    jac = np.empty((n, k, 3)) if want_jac else None
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        for j in range(k):
            fj, g0, g1, g2 = _msasha(ts[j], td[j], te[j], verbatim, p[:, 0], p[:, 1], p[:, 2])
            f[:, j] = fj
            if want_jac:
                jac[:, j, 0] = g0
                jac[:, j, 1] = g1
                jac[:, j, 2] = g2
    r = f - y
    return r, np.sum(r * r, axis=1), jac


def lm_msasha(y, ts, td, te, verbatim, starts, lower, upper, a_factor, tol, maxit,
              params, cost, iters, conv, start_cost):
    n, k = y.shape
    ns = starts.shape[0]
    ymax = np.max(np.abs(y), axis=1)
    ysq = np.sum(y * y, axis=1)
    zero = ymax == 0.0
    lo = np.broadcast_to(np.asarray(lower, dtype=float), (n, 3))
    hi = np.empty((n, 3))
    hi[:, 0] = a_factor * ymax
    hi[:, 1] = upper[1]
    hi[:, 2] = upper[2]

    best = np.full(n, np.inf)
    best_p = np.zeros((n, 3))
    best_it = np.zeros(n, dtype=np.int64)
    best_conv = np.zeros(n, dtype=bool)

    for s in range(ns):
        unit = np.column_stack([np.ones(n), np.full(n, starts[s, 0]), np.full(n, starts[s, 1])])
        g, _, _ = _stack_eval(np.zeros_like(y), ts, td, te, verbatim, unit, False)
        sgg = np.sum(g * g, axis=1)
        sgy = np.sum(g * y, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            a0 = np.where(sgg > 0.0, sgy / sgg, ymax)
        p = np.clip(np.column_stack([a0, unit[:, 1], unit[:, 2]]), lo, hi)
        r, c, jac = _stack_eval(y, ts, td, te, verbatim, p, True)
        start_cost[:, s] = c
        lam = np.full(n, 1e-3)
        done = np.zeros(n, dtype=bool)
        it = np.zeros(n, dtype=np.int64)
        active = ~zero
        for _ in range(maxit):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            it[idx] += 1
            small = c[idx] <= 1e-30 * ysq[idx]
            done[idx[small]] = True
            active[idx[small]] = False
            idx = idx[~small]
            if idx.size == 0:
                break
            J = jac[idx]
            jtr = np.einsum("nka,nk->na", J, r[idx])
            jtj = np.einsum("nka,nkb->nab", J, J)
            h = jtj.copy()
            diag = np.arange(3)
            h[:, diag, diag] = jtj[:, diag, diag] * (1.0 + lam[idx, None]) + 1e-300
            with np.errstate(all="ignore"):
                det = np.linalg.det(h)
                ok = np.isfinite(det) & (det != 0.0)
                delta = np.zeros((idx.size, 3))
                if ok.any():
                    delta[ok] = np.linalg.solve(h[ok], -jtr[ok][:, :, None])[:, :, 0]
            pn = np.clip(p[idx] + delta, lo[idx], hi[idx])
            _, cn, _ = _stack_eval(y[idx], ts, td, te, verbatim, pn, False)
            cn = np.where(ok, cn, np.inf)
            acc = cn < c[idx]
            ia = idx[acc]
            if ia.size:
                pold = p[ia]
                denom = np.where(np.abs(pold) > 1e-12, np.abs(pold), 1e-12)
                step = np.max(np.abs(pn[acc] - pold) / denom, axis=1)
                p[ia] = pn[acc]
                ra, ca, ja = _stack_eval(y[ia], ts, td, te, verbatim, p[ia], True)
                r[ia], c[ia], jac[ia] = ra, ca, ja
                lam[ia] = np.maximum(lam[ia] * 0.1, 1e-12)
                fin = ia[step < tol]
                done[fin] = True
                active[fin] = False
            ir = idx[~acc]
            if ir.size:
                lam[ir] *= 10.0
                stuck = ir[lam[ir] > 1e10]
                done[stuck] = True
                active[stuck] = False
        better = (~zero) & (c < best)
        best[better] = c[better]
        best_p[better] = p[better]
        best_it[better] = it[better]
        best_conv[better] = done[better]

    best_p[zero] = [0.0, lower[1], lower[2]]
    best[zero] = 0.0
    best_it[zero] = 0
    best_conv[zero] = True
    start_cost[zero] = 0.0
    params[:] = best_p
    cost[:] = best
    iters[:] = best_it
    conv[:] = best_conv.astype(np.uint8)
