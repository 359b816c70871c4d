"""Compiled inner loops for the iterative solvers.

These kernels operate on precomputed Gram matrices and flattened group
index arrays so the per-iteration work is a handful of BLAS calls and
tight scalar loops.  They are deterministic: no randomness, no
parallel reductions, IEEE semantics (no fastmath).
"""

import numpy as np
from numba import njit

__all__ = ["prox_grad_kernel", "admm_kernel"]


@njit(cache=True, nogil=True)
def _l1_ball_tau(buf, radius):
    """Threshold of the l1-ball projection of the magnitudes in ``buf``.

    ``buf`` is permuted in place.  Assumes ``sum(buf) > radius > 0``.
    Partition-based selection over the support boundary; expected linear
    time in the buffer length.
    """
    begin = 0
    end = buf.shape[0]
    s = 0.0
    rho = 0
    while end > begin:
        pivot = buf[(begin + end) // 2]
        # Move entries >= pivot to the front of the active region.
        i = begin
        for j in range(begin, end):
            if buf[j] >= pivot:
                tmp = buf[i]
                buf[i] = buf[j]
                buf[j] = tmp
                i += 1
        bsum = 0.0
        for m in range(begin, i):
            bsum += buf[m]
        bn = i - begin
        if (s + bsum) - (rho + bn) * pivot < radius:
            s += bsum
            rho += bn
            begin = i
        else:
            # Pivot is outside the support: discard one instance of it,
            # keep searching among the >= region.
            for m in range(begin, i):
                if buf[m] == pivot:
                    tmp = buf[m]
                    buf[m] = buf[begin]
                    buf[begin] = tmp
                    break
            begin += 1
            end = i
    return (s - radius) / rho


@njit(cache=True, nogil=True)
def prox_grad_kernel(gram, b, y2, lam_w, step_l, max_iter, tol, accelerated):
    """Proximal gradient descent for coordinate-separable penalties.

    Minimizes ``0.5*||y - D x||^2 + sum_j lam_w[j] * |x_j|`` given
    ``gram = D^T D``, ``b = D^T y`` and ``y2 = ||y||^2``, starting from
    zero.  With ``accelerated`` the momentum sequence
    ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2`` is used.

    Returns ``(x, trace, iterations, converged)`` where ``trace`` holds
    the objective at every iterate including the start.
    """
    p = b.shape[0]
    x = np.zeros(p)
    z = np.zeros(p)
    xn = np.empty(p)
    trace = np.empty(max_iter + 1)
    trace[0] = 0.5 * y2
    tmom = 1.0
    iters = 0
    converged = False

    for k in range(1, max_iter + 1):
        g = np.dot(gram, z)
        for j in range(p):
            u = z[j] - (g[j] - b[j]) / step_l
            thr = lam_w[j] / step_l
            if u > thr:
                xn[j] = u - thr
            elif u < -thr:
                xn[j] = u + thr
            else:
                xn[j] = 0.0

        gx = np.dot(gram, xn)
        lin = 0.0
        quad = 0.0
        pen = 0.0
        for j in range(p):
            lin += b[j] * xn[j]
            quad += xn[j] * gx[j]
            pen += lam_w[j] * abs(xn[j])
        trace[k] = 0.5 * y2 - lin + 0.5 * quad + pen
        iters = k

        tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tmom * tmom))
        if accelerated:
            beta = (tmom - 1.0) / tn
            for j in range(p):
                z[j] = xn[j] + beta * (xn[j] - x[j])
        else:
            for j in range(p):
                z[j] = xn[j]
        tmom = tn
        for j in range(p):
            x[j] = xn[j]

        if np.abs(trace[k - 1] - trace[k]) <= tol * (1.0 + np.abs(trace[k - 1])):
            converged = True
            break

    return x, trace[: iters + 1].copy(), iters, converged


@njit(cache=True, nogil=True)
def _group_objective(gram, b, y2, w, idx, starts, lam_eta, q_inf):
    """Objective ``0.5*||y - D w||^2 + sum_g lam_eta[g]*||w_g||_q``."""
    p = b.shape[0]
    gw = np.dot(gram, w)
    lin = 0.0
    quad = 0.0
    for j in range(p):
        lin += b[j] * w[j]
        quad += w[j] * gw[j]
    pen = 0.0
    for g in range(starts.shape[0] - 1):
        s0 = starts[g]
        s1 = starts[g + 1]
        if q_inf:
            mx = 0.0
            for i in range(s0, s1):
                av = abs(w[idx[i]])
                if av > mx:
                    mx = av
            pen += lam_eta[g] * mx
        else:
            sq = 0.0
            for i in range(s0, s1):
                wv = w[idx[i]]
                sq += wv * wv
            pen += lam_eta[g] * np.sqrt(sq)
    return 0.5 * y2 - lin + 0.5 * quad + pen


@njit(cache=True, nogil=True)
def admm_kernel(gram, b, y2, minv, counts, idx, starts, lam_eta, q_inf,
                gamma, adapt, tol, max_iter, want_trace):
    """Splitting solver: one auxiliary copy of the variables per group.

    Alternates (1) a ridge-like update of the primal ``w`` through the
    precomputed inverse of ``gram + gamma * diag(counts)``, (2) a
    per-group shrinkage of the copies ``z_g`` with threshold
    ``lam_eta[g] / gamma``, and (3) dual ascent, until both the maximal
    constraint violation ``max_g ||z_g - w_g||`` and the dual residual
    ``gamma * max_g ||z_g - z_g_prev||`` fall below ``tol * (1 + ||w||)``.

    When ``adapt`` is set, ``gamma`` is doubled (halved) whenever the
    primal residual exceeds ten times the dual one (or vice versa), the
    scaled duals are rescaled accordingly, and the system inverse is
    rebuilt.  Rebalancing is only considered every 50th iteration and at
    most 20 times in total: adjusting on every iteration lets ``gamma``
    ping-pong between two values forever, and each flip perturbs the
    iterates enough to stall convergence (the classic analysis assumes
    the penalty parameter is eventually constant).

    Returns ``(w, z, u, trace, r_pri_hist, r_dual_hist, iterations,
    converged, r_pri, r_dual, gamma)`` with ``u`` the scaled duals
    (``nu = gamma * u``) laid out like the concatenated group indices.
    """
    p = b.shape[0]
    nc = idx.shape[0]
    ng = starts.shape[0] - 1
    w = np.zeros(p)
    z = np.zeros(nc)
    uu = np.zeros(nc)
    zprev = np.zeros(nc)
    rhs = np.empty(p)
    vbuf = np.empty(nc)
    trace = np.empty(max_iter + 1)
    trace[0] = 0.5 * y2
    pri_hist = np.zeros(max_iter)
    dual_hist = np.zeros(max_iter)
    minv_cur = minv
    r_pri = np.inf
    r_dual = np.inf
    iters = 0
    converged = False
    gamma_changes = 0

    for k in range(1, max_iter + 1):
        # (1) primal update
        for j in range(p):
            rhs[j] = b[j]
        for i in range(nc):
            rhs[idx[i]] += gamma * (z[i] + uu[i])
        w = np.dot(minv_cur, rhs)

        # (2) per-group shrinkage of the copies, (3) dual ascent
        for i in range(nc):
            zprev[i] = z[i]
        pri2 = 0.0
        dual2 = 0.0
        for g in range(ng):
            s0 = starts[g]
            s1 = starts[g + 1]
            t = lam_eta[g] / gamma
            if q_inf:
                l1 = 0.0
                for i in range(s0, s1):
                    v = w[idx[i]] - uu[i]
                    vbuf[i] = v
                    l1 += abs(v)
                if l1 <= t:
                    for i in range(s0, s1):
                        z[i] = 0.0
                elif t == 0.0:
                    for i in range(s0, s1):
                        z[i] = vbuf[i]
                else:
                    mag = np.empty(s1 - s0)
                    for i in range(s0, s1):
                        mag[i - s0] = abs(vbuf[i])
                    tau = _l1_ball_tau(mag, t)
                    # refine tau over the exact support
                    ssum = 0.0
                    scnt = 0
                    for i in range(s0, s1):
                        av = abs(vbuf[i])
                        if av > tau:
                            ssum += av
                            scnt += 1
                    if scnt > 0:
                        tau = (ssum - t) / scnt
                    for i in range(s0, s1):
                        v = vbuf[i]
                        av = abs(v)
                        mn = av if av < tau else tau
                        z[i] = mn if v >= 0.0 else -mn
            else:
                nrm2 = 0.0
                for i in range(s0, s1):
                    v = w[idx[i]] - uu[i]
                    vbuf[i] = v
                    nrm2 += v * v
                nrm = np.sqrt(nrm2)
                if nrm <= t:
                    for i in range(s0, s1):
                        z[i] = 0.0
                else:
                    sc = 1.0 - t / nrm
                    for i in range(s0, s1):
                        z[i] = sc * vbuf[i]

            gp = 0.0
            gd = 0.0
            for i in range(s0, s1):
                d = z[i] - w[idx[i]]
                uu[i] += d
                gp += d * d
                dz = z[i] - zprev[i]
                gd += dz * dz
            if gp > pri2:
                pri2 = gp
            if gd > dual2:
                dual2 = gd

        r_pri = np.sqrt(pri2)
        r_dual = gamma * np.sqrt(dual2)
        pri_hist[k - 1] = r_pri
        dual_hist[k - 1] = r_dual
        iters = k

        if want_trace:
            trace[k] = _group_objective(gram, b, y2, w, idx, starts,
                                        lam_eta, q_inf)

        wn = 0.0
        for j in range(p):
            wn += w[j] * w[j]
        scale = tol * (1.0 + np.sqrt(wn))
        if r_pri <= scale and r_dual <= scale:
            converged = True
            break

        if adapt and gamma_changes < 20 and k % 50 == 0 \
                and np.isfinite(r_pri) and np.isfinite(r_dual):
            gamma_new = gamma
            if r_pri > 10.0 * r_dual and r_dual > 0.0:
                gamma_new = gamma * 2.0
            elif r_dual > 10.0 * r_pri and r_pri > 0.0:
                gamma_new = gamma * 0.5
            if gamma_new != gamma:
                for i in range(nc):
                    uu[i] *= gamma / gamma_new
                gamma = gamma_new
                gamma_changes += 1
                m = gram + gamma * np.diag(counts)
                minv_cur = np.ascontiguousarray(np.linalg.inv(m))

    if want_trace:
        out_trace = trace[: iters + 1].copy()
    else:
        out_trace = np.empty(1)
        out_trace[0] = _group_objective(gram, b, y2, w, idx, starts,
                                        lam_eta, q_inf)

    return (w, z, uu, out_trace, pri_hist[:iters].copy(),
            dual_hist[:iters].copy(), iters, converged, r_pri, r_dual, gamma)
