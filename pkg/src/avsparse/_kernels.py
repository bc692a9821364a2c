"""Compiled inner loops for the martingale and HC evaluators.

The exponential below is a range-reduced polynomial (relative error about
2e-16 on [-700, 700]) written so the compiler can vectorize it; libm's
scalar ``exp`` would dominate the mixture cost otherwise.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# Terms with ln(1 + r e^a) below e^-38 (~3e-17) are dropped.
NEGLIGIBLE_LOG = -38.0
# Above this exponent a stream leaves the chunked-product path.
HEAD_EXPONENT = 18.0
_CHUNK = 32

_FM_EXP = {"contract", "nnan", "ninf", "nsz", "arcp", "afn"}


@njit(cache=True, fastmath=_FM_EXP)
def vexp(x, out, ibuf, n):
    """``out[:n] = exp(x[:n])`` with inputs clamped to [-700, 700]."""
    for j in range(n):
        v = min(max(x[j], -700.0), 700.0)
        k = (v * 1.4426950408889634 + 6755399441055744.0) - 6755399441055744.0
        r = (v - k * 6.93147180369123816490e-01) - k * 1.90821492927058770002e-10
        p = 1.6059043836821613e-10
        p = p * r + 2.08767569878681e-09
        p = p * r + 2.505210838544172e-08
        p = p * r + 2.755731922398589e-07
        p = p * r + 2.7557319223985893e-06
        p = p * r + 2.48015873015873e-05
        p = p * r + 0.0001984126984126984
        p = p * r + 0.001388888888888889
        p = p * r + 0.008333333333333333
        p = p * r + 0.041666666666666664
        p = p * r + 0.16666666666666666
        p = p * r + 0.5
        p = p * r + 1.0
        p = p * r + 1.0
        out[j] = p
        ibuf[j] = (np.int64(k) + 1023) << 52
    scale = ibuf.view(np.float64)
    for j in range(n):
        out[j] *= scale[j]


@njit(cache=True, fastmath=True)
def _log_prod_affine(u, start, stop, c0, e):
    # sum_j log(c0 + e*u_j) via chunked products; factors lie in [c0, c0 + e*1e8]
    acc = 0.0
    if c0 < 0.25:
        # a chunk of small factors could underflow
        for k in range(start, stop):
            acc += math.log(c0 + e * u[k])
        return acc
    j = start
    while j + _CHUNK <= stop:
        p = 1.0
        for k in range(j, j + _CHUNK):
            p *= c0 + e * u[k]
        acc += math.log(p)
        j += _CHUNK
    p = 1.0
    for k in range(j, stop):
        p *= c0 + e * u[k]
    return acc + math.log(p)


@njit(cache=True)
def _count_above(s_desc, dl, half, cut, n):
    # number of leading entries with dl * s - half > cut (s_desc is decreasing)
    lo, hi = 0, n
    while lo < hi:
        mid = (lo + hi) // 2
        if dl * s_desc[mid] - half > cut:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True)
def mixture_pair_logs(s_desc, t, deltas, group_start, group_log_r_max, eps, log1m_eps, out, xbuf, ubuf, ibuf):
    """Fill ``out[p] = ln E_t(eps_p, delta_p)`` for every grid pair.

    ``s_desc`` holds the stream sums sorted in decreasing order. Pairs are
    grouped by their distinct delta: group ``d`` spans
    ``group_start[d]:group_start[d+1]``.
    """
    K = s_desc.shape[0]
    for d in range(deltas.shape[0]):
        dl = deltas[d]
        half = 0.5 * t * dl * dl
        xcut = NEGLIGIBLE_LOG - group_log_r_max[d]
        m = _count_above(s_desc, dl, half, xcut, K)
        for j in range(m):
            xbuf[j] = dl * s_desc[j] - half
        vexp(xbuf, ubuf, ibuf, m)
        h = _count_above(s_desc, dl, half, HEAD_EXPONENT, m)
        for p in range(group_start[d], group_start[d + 1]):
            e = eps[p]
            c0 = 1.0 - e
            acc = (K - m) * log1m_eps[p] if m < K else 0.0
            for j in range(h):
                a = xbuf[j]
                acc += a + math.log(e + c0 * math.exp(-a))
            if m > h:
                acc += _log_prod_affine(ubuf, h, m, c0, e)
            out[p] = acc


@njit(cache=True)
def log_mean_exp(values, log_weight):
    m = -np.inf
    for v in values:
        if v > m:
            m = v
    if m == -np.inf:
        return -np.inf
    s = 0.0
    for v in values:
        s += math.exp(v - m)
    return m + math.log(s) + log_weight


@njit(cache=True)
def mixture_log_batch(sums, t, deltas, group_start, group_log_r_max, eps, log1m_eps, log_weight):
    """``ln E_t(Pi)`` for each row of ``sums`` (paths x streams)."""
    n, K = sums.shape
    res = np.empty(n)
    pair_logs = np.empty(eps.shape[0])
    xbuf = np.empty(K)
    ubuf = np.empty(K)
    ibuf = np.empty(K, dtype=np.int64)
    for i in range(n):
        s_desc = np.sort(sums[i])[::-1].copy()
        mixture_pair_logs(s_desc, t, deltas, group_start, group_log_r_max, eps, log1m_eps,
                          pair_logs, xbuf, ubuf, ibuf)
        res[i] = log_mean_exp(pair_logs, log_weight)
    return res


@njit(cache=True)
def em_fit_kernel(z, init_eps, init_delta, m_max, tol, normalized, xbuf, ubuf, ibuf):
    """EM for the two-component ``(1-eps) N(0,1) + eps N(delta,1)`` mixture.

    Returns ``(eps, delta, converged, iterations)``.
    """
    K = z.shape[0]
    e = init_eps
    d = init_delta
    for it in range(1, m_max + 1):
        if e > 0.0:
            if e >= 1.0:
                lo = np.inf
            else:
                lo = math.log(e) - math.log1p(-e) - 0.5 * d * d
            for i in range(K):
                xbuf[i] = -(lo + d * z[i])
            vexp(xbuf, ubuf, ibuf, K)
            sp = 0.0
            spz = 0.0
            for i in range(K):
                p = 1.0 / (1.0 + ubuf[i])
                sp += p
                spz += p * z[i]
        else:
            # eps = 0 is absorbing: every responsibility vanishes
            d_new = d if normalized else 0.0
            return 0.0, d_new, True, it
        e_new = sp / K
        if normalized:
            d_new = spz / sp if sp > 0.0 else d
        else:
            d_new = spz
        if e_new > 0.0 and e > 0.0:
            de = abs(math.log(e_new) - math.log(e))
        elif e_new == 0.0 and e == 0.0:
            de = 0.0
        else:
            de = np.inf
        if de < tol and abs(d_new - d) < tol:
            return e_new, d_new, True, it
        e = e_new
        d = d_new
    return e, d, False, m_max


@njit(cache=True)
def em_fit_batch(zs, init_eps, init_delta, m_max, tol, normalized):
    n, K = zs.shape
    out = np.empty((n, 2))
    xbuf = np.empty(K)
    ubuf = np.empty(K)
    ibuf = np.empty(K, dtype=np.int64)
    for i in range(n):
        e, d, ok, _ = em_fit_kernel(zs[i], init_eps, init_delta, m_max, tol, normalized, xbuf, ubuf, ibuf)
        if ok:
            out[i, 0] = e
            out[i, 1] = d
        else:
            out[i, 0] = 0.0
            out[i, 1] = 1.0
    return out


@njit(cache=True)
def hc_sorted_rows(u_sorted, uc_sorted):
    """HC for rows of ascending p-values (with complements ``1 - u``).

    Ties take the ECDF value of the last tied position (``<=`` convention).
    """
    n, K = u_sorted.shape
    out = np.empty(n)
    rk = math.sqrt(K)
    for r in range(n):
        best = -np.inf
        j = K - 1
        while j >= 0:
            count = j + 1
            u = u_sorted[r, j]
            k = j
            while k >= 0 and u_sorted[r, k] == u:
                v = rk * (count / K - u) / math.sqrt(u * uc_sorted[r, k])
                if v > best:
                    best = v
                k -= 1
            j = k
        out[r] = best
    return out


@njit(cache=True)
def mixture_path_logs(cums, deltas, group_start, group_log_r_max, eps, log1m_eps, log_weight, stop_log):
    """``ln E_t(Pi)`` for ``t = 1..H`` along one path of cumulative sums.

    Entries after the first ``t`` with value ``>= stop_log`` are NaN.
    """
    H, K = cums.shape
    res = np.full(H, np.nan)
    pair_logs = np.empty(eps.shape[0])
    xbuf = np.empty(K)
    ubuf = np.empty(K)
    ibuf = np.empty(K, dtype=np.int64)
    for s in range(H):
        s_desc = np.sort(cums[s])[::-1].copy()
        mixture_pair_logs(s_desc, float(s + 1), deltas, group_start, group_log_r_max, eps, log1m_eps,
                          pair_logs, xbuf, ubuf, ibuf)
        v = log_mean_exp(pair_logs, log_weight)
        res[s] = v
        if v >= stop_log:
            break
    return res
