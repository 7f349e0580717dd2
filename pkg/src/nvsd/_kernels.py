"""Compiled product-of-coherence kernel for large spin sets (spin baths).

On a uniform tau grid the phase ``alpha = omega_tilde * tau`` is advanced by a
complex rotation instead of calling cos/sin per sample, and
``sin^2(N phi / 2) = (1 - T_N(cos phi)) / 2`` is evaluated with the Chebyshev
doubling recurrence, so no transcendental calls remain in the inner loop.
"""

import math

import numba
import numpy as np

_BLOCK = 512


@numba.njit(cache=True)
def _chebyshev(N, c):
    # (T_n, T_{n+1}) by binary expansion of N, most significant bit first.
    t0 = 1.0
    t1 = c
    bit = 1
    while bit * 2 <= N:
        bit *= 2
    while bit > 0:
        if N & bit:
            t0, t1 = 2.0 * t0 * t1 - c, 2.0 * t1 * t1 - 1.0
        else:
            t0, t1 = 2.0 * t0 * t0 - 1.0, 2.0 * t0 * t1 - c
        bit //= 2
    return t0


@numba.njit(parallel=True, cache=True)
def _product_uniform(A, B, omega_L, N, tau0, step, n_tau):
    two_pi = 2.0 * math.pi
    out = np.ones(n_tau)
    n_blocks = (n_tau + _BLOCK - 1) // _BLOCK
    for blk in numba.prange(n_blocks):
        j0 = blk * _BLOCK
        j1 = min(j0 + _BLOCK, n_tau)
        m = j1 - j0
        cb = np.empty(m)
        sb = np.empty(m)
        acc = np.ones(m)
        for j in range(m):
            be = omega_L * (tau0 + (j0 + j) * step)
            cb[j] = math.cos(be)
            sb[j] = math.sin(be)
        for i in range(A.size):
            a = two_pi * A[i] + omega_L
            b = two_pi * B[i]
            w_t = math.sqrt(a * a + b * b)
            m_z = a / w_t
            mx2 = (b / w_t) ** 2
            al0 = w_t * (tau0 + j0 * step)
            ca = math.cos(al0)
            sa = math.sin(al0)
            dc = math.cos(w_t * step)
            ds = math.sin(w_t * step)
            for j in range(m):
                c = ca * cb[j] - m_z * sa * sb[j]
                denom = 1.0 + c
                if denom > 1e-300:
                    om = mx2 * (1.0 - ca) * (1.0 - cb[j]) / denom
                    if om > 2.0:
                        om = 2.0
                else:
                    om = 0.0
                if c > 1.0:
                    c = 1.0
                elif c < -1.0:
                    c = -1.0
                acc[j] *= 1.0 - om * 0.5 * (1.0 - _chebyshev(N, c))
                ca, sa = ca * dc - sa * ds, sa * dc + ca * ds
        for j in range(m):
            out[j0 + j] = acc[j]
    return out


@numba.njit(parallel=True, cache=True)
def _product_general(A, B, omega_L, N, tau):
    two_pi = 2.0 * math.pi
    out = np.ones(tau.size)
    for j in numba.prange(tau.size):
        t = tau[j]
        cb = math.cos(omega_L * t)
        sb = math.sin(omega_L * t)
        acc = 1.0
        for i in range(A.size):
            a = two_pi * A[i] + omega_L
            b = two_pi * B[i]
            w_t = math.sqrt(a * a + b * b)
            al = w_t * t
            ca = math.cos(al)
            sa = math.sin(al)
            c = ca * cb - a / w_t * sa * sb
            denom = 1.0 + c
            if denom > 1e-300:
                om = (b / w_t) ** 2 * (1.0 - ca) * (1.0 - cb) / denom
                if om > 2.0:
                    om = 2.0
            else:
                om = 0.0
            if c > 1.0:
                c = 1.0
            elif c < -1.0:
                c = -1.0
            acc *= 1.0 - om * 0.5 * (1.0 - _chebyshev(N, c))
        out[j] = acc
    return out


def is_uniform(tau, rtol=1e-9):
    if tau.size < 3:
        return True
    d = np.diff(tau)
    return bool(np.max(np.abs(d - d[0])) <= rtol * max(abs(tau[-1]), abs(d[0])))


def coherence_product_kernel(A, B, omega_L, N, tau):
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if is_uniform(tau) and tau.size > 1:
        step = (tau[-1] - tau[0]) / (tau.size - 1)
        return _product_uniform(A, B, float(omega_L), int(N), float(tau[0]), float(step), tau.size)
    return _product_general(A, B, float(omega_L), int(N), tau)


@numba.njit(cache=True)
def em_weighted(x, w, mu, sigma, pi, sigma_floor, max_iter, tol):
    """Weighted 1-D Gaussian-mixture EM; inputs are copied, not mutated.

    Returns ``(pi, mu, sigma, loglik, converged)``. A component whose
    responsibility mass vanishes keeps ``pi = 0`` and is ignored thereafter.
    """
    n = x.size
    K = mu.size
    mu = mu.copy()
    sigma = sigma.copy()
    pi = pi.copy()
    W = 0.0
    for j in range(n):
        W += w[j]
    log_norm = 0.5 * math.log(2.0 * math.pi)
    resp = np.empty((n, K))
    ll = -np.inf
    prev = -np.inf
    converged = False
    for _ in range(max_iter):
        ll = 0.0
        for j in range(n):
            m = -np.inf
            for k in range(K):
                if pi[k] > 0.0:
                    z = (x[j] - mu[k]) / sigma[k]
                    v = -0.5 * z * z - math.log(sigma[k]) - log_norm + math.log(pi[k])
                else:
                    v = -np.inf
                resp[j, k] = v
                if v > m:
                    m = v
            tot = 0.0
            for k in range(K):
                e = math.exp(resp[j, k] - m) if resp[j, k] > -np.inf else 0.0
                resp[j, k] = e
                tot += e
            ll += w[j] * (math.log(tot) + m)
            for k in range(K):
                resp[j, k] = resp[j, k] / tot * w[j]
        for k in range(K):
            nk = 0.0
            s1 = 0.0
            for j in range(n):
                nk += resp[j, k]
                s1 += resp[j, k] * x[j]
            if nk <= 1e-12 * W:
                pi[k] = 0.0
                continue
            mk = s1 / nk
            s2 = 0.0
            for j in range(n):
                d = x[j] - mk
                s2 += resp[j, k] * d * d
            pi[k] = nk / W
            mu[k] = mk
            sigma[k] = math.sqrt(max(s2 / nk, sigma_floor * sigma_floor))
        if prev > -np.inf and abs(ll - prev) <= tol * abs(ll):
            converged = True
            break
        prev = ll
    return pi, mu, sigma, ll, converged
