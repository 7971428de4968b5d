# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dual active-set kernel; same contract as ``_kernel_py.dual_active_set``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()

cdef double ZN_EPS = 1e-11
cdef double R_EPS = 1e-12
cdef int REFRESH = 64


cdef int _chol_solve(double[:, ::1] gram, int[::1] E, int e, double[::1] rhs,
                     double[:, ::1] L, double[::1] out) noexcept nogil:
    """Solve gram[E, E] x = rhs by Cholesky; returns -1 if not positive definite."""
    cdef int i, j, k
    cdef double s
    for i in range(e):
        for j in range(i + 1):
            s = gram[E[i], E[j]]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 0.0:
                    return -1
                L[i, i] = sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    for i in range(e):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(e - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, e):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]
    return 0


cdef void _refresh_gram(double[:, ::1] C, unsigned char[::1] free, double[:, ::1] gram,
                        int m, int n) noexcept nogil:
    cdef int a, b, i
    cdef double s
    for a in range(m):
        for b in range(a + 1):
            s = 0.0
            for i in range(n):
                if free[i]:
                    s += C[a, i] * C[b, i]
            gram[a, b] = s
            gram[b, a] = s


cdef void _rank_one(double[:, ::1] C, int col, double sign, double[:, ::1] gram, int m) noexcept nogil:
    cdef int a, b
    for a in range(m):
        for b in range(m):
            gram[a, b] += sign * C[a, col] * C[b, col]


def dual_active_set(C_in, d_in, int n_eq, u_in, bint nonneg, double tol=1e-11, int max_iter=0):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] C_arr = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef double[:, ::1] C = C_arr
    cdef double[::1] d = np.ascontiguousarray(d_in, dtype=np.float64)
    cdef double[::1] u = np.ascontiguousarray(u_in, dtype=np.float64)
    cdef int m = C.shape[0]
    cdef int n = C.shape[1]
    if max_iter <= 0:
        max_iter = 20 * (n + m) + 100

    free_arr = np.ones(n, dtype=np.uint8)
    active_arr = np.zeros(m, dtype=np.uint8)
    w_arr = np.array(u, dtype=np.float64)
    cdef unsigned char[::1] free = free_arr
    cdef unsigned char[::1] active = active_arr
    cdef double[::1] w = w_arr
    cdef double[::1] lam = np.zeros(m)
    cdef double[::1] mu = np.zeros(n)
    cdef double[:, ::1] gram = np.zeros((m, m))
    cdef double[:, ::1] Lw = np.zeros((max(m, 1), max(m, 1)))
    cdef double[::1] rhs = np.zeros(max(m, 1))
    cdef double[::1] rE = np.zeros(max(m, 1))
    cdef double[::1] rZ = np.zeros(n)
    cdef double[::1] z = np.zeros(n)
    cdef int[::1] E = np.zeros(max(m, 1), dtype=np.intc)

    cdef int i, j, k, e, p, kind, drop, drop_kind, iters = 0, updates = 0
    cdef double s, worst, zn, t, t1, t2, lam_p, ratio

    _refresh_gram(C, free, gram, m, n)
    for i in range(n_eq):
        active[i] = 1
        E[i] = i
    if n_eq > 0:
        for i in range(n_eq):
            s = d[i]
            for j in range(n):
                s -= C[i, j] * u[j]
            rhs[i] = s
        if _chol_solve(gram, E, n_eq, rhs, Lw, rE) != 0:
            return 3, w_arr, free_arr.astype(bool), active_arr.astype(bool), 0
        for i in range(n_eq):
            lam[i] = rE[i]
        for j in range(n):
            s = u[j]
            for i in range(n_eq):
                s += C[i, j] * rE[i]
            w[j] = s

    with nogil:
        while True:
            kind = 0
            p = -1
            worst = -tol
            if nonneg:
                for j in range(n):
                    if free[j] and w[j] < worst:
                        worst = w[j]
                        kind = 1
                        p = j
            for k in range(n_eq, m):
                if not active[k]:
                    s = -d[k]
                    for j in range(n):
                        s += C[k, j] * w[j]
                    if s < worst:
                        worst = s
                        kind = 2
                        p = k
            if kind == 0:
                break

            lam_p = 0.0
            while True:
                iters += 1
                if iters > max_iter:
                    break
                if updates >= REFRESH:
                    _refresh_gram(C, free, gram, m, n)
                    updates = 0
                e = 0
                for k in range(m):
                    if active[k]:
                        E[e] = k
                        if kind == 1:
                            rhs[e] = C[k, p]
                        else:
                            rhs[e] = gram[k, p]
                        e += 1
                if e > 0 and _chol_solve(gram, E, e, rhs, Lw, rE) != 0:
                    iters = -iters
                    break
                # primal direction on free coordinates, dual direction on bounds
                zn = 0.0
                for j in range(n):
                    if kind == 1:
                        s = 1.0 if j == p else 0.0
                    else:
                        s = C[p, j]
                    for k in range(e):
                        s -= C[E[k], j] * rE[k]
                    if free[j]:
                        z[j] = s
                        rZ[j] = 0.0
                        if kind == 1:
                            if j == p:
                                zn = s
                        else:
                            zn += s * C[p, j]
                    else:
                        z[j] = 0.0
                        rZ[j] = s
                if kind == 1:
                    s = w[p]
                else:
                    s = -d[p]
                    for j in range(n):
                        s += C[p, j] * w[j]
                t2 = -s / zn if zn > ZN_EPS else INFINITY
                t1 = INFINITY
                drop_kind = 0
                drop = -1
                for k in range(e):
                    if E[k] >= n_eq and rE[k] > R_EPS:
                        ratio = lam[E[k]] / rE[k]
                        if ratio < t1:
                            t1 = ratio
                            drop_kind = 2
                            drop = E[k]
                for j in range(n):
                    if not free[j] and rZ[j] > R_EPS:
                        ratio = mu[j] / rZ[j]
                        if ratio < t1:
                            t1 = ratio
                            drop_kind = 1
                            drop = j
                if t1 == INFINITY and t2 == INFINITY:
                    kind = -1
                    break
                t = t1 if t1 < t2 else t2
                if t2 != INFINITY:
                    for j in range(n):
                        w[j] += t * z[j]
                for k in range(e):
                    lam[E[k]] -= t * rE[k]
                for j in range(n):
                    if not free[j]:
                        mu[j] -= t * rZ[j]
                lam_p += t
                if t2 <= t1:
                    if kind == 1:
                        free[p] = 0
                        w[p] = 0.0
                        mu[p] = lam_p
                        _rank_one(C, p, -1.0, gram, m)
                        updates += 1
                    else:
                        active[p] = 1
                        lam[p] = lam_p
                    break
                if drop_kind == 1:
                    free[drop] = 1
                    mu[drop] = 0.0
                    w[drop] = 0.0
                    _rank_one(C, drop, 1.0, gram, m)
                    updates += 1
                else:
                    active[drop] = 0
                    lam[drop] = 0.0
            if kind == -1 or iters > max_iter or iters < 0:
                break

    free_b = free_arr.astype(bool)
    active_b = active_arr.astype(bool)
    if kind == -1:
        return 1, w_arr, free_b, active_b, iters
    if iters < 0:
        return 3, w_arr, free_b, active_b, -iters
    if iters > max_iter:
        return 2, w_arr, free_b, active_b, iters
    return 0, w_arr, free_b, active_b, iters
