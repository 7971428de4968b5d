"""Pure-Python dual active-set kernel.

Solves::

    min 0.5 * ||w - u||^2
    s.t. C[:n_eq] @ w == d[:n_eq]
         C[n_eq:] @ w >= d[n_eq:]
         w >= 0                      (when nonneg)

with the Goldfarb-Idnani dual method specialised to an identity Hessian.
Active bounds are eliminated from the variable set, so every linear solve is
on the Gram matrix of the active general rows restricted to the free
variables. Rows of ``C`` are expected to have unit norm and the equality
rows to be linearly independent.

Return codes: 0 optimal, 1 infeasible, 2 iteration limit, 3 singular Gram.
"""

import numpy as np

OPTIMAL, INFEASIBLE, MAX_ITER, SINGULAR = 0, 1, 2, 3

_ZN_EPS = 1e-11
_R_EPS = 1e-12
_REFRESH = 64


def _chol_solve(G, rhs):
    L = np.linalg.cholesky(G)
    y = np.linalg.solve(L, rhs)
    return np.linalg.solve(L.T, y)


def dual_active_set(C, d, n_eq, u, nonneg, tol=1e-11, max_iter=0):
    C = np.ascontiguousarray(C, dtype=float)
    d = np.asarray(d, dtype=float)
    u = np.asarray(u, dtype=float)
    m, n = C.shape
    if max_iter <= 0:
        max_iter = 20 * (n + m) + 100
    free = np.ones(n, dtype=bool)
    active = np.zeros(m, dtype=bool)
    active[:n_eq] = True
    lam = np.zeros(m)
    mu = np.zeros(n)
    gram = C @ C.T
    w = u.copy()
    if n_eq:
        try:
            lam[:n_eq] = _chol_solve(gram[:n_eq, :n_eq], d[:n_eq] - C[:n_eq] @ u)
        except np.linalg.LinAlgError:
            return SINGULAR, w, free, active, 0
        w = u + C[:n_eq].T @ lam[:n_eq]

    iters = 0
    updates = 0
    while True:
        # most violated constraint among inactive bounds and inequality rows
        kind, p, worst = None, -1, -tol
        if nonneg:
            fidx = np.flatnonzero(free)
            if fidx.size:
                j = fidx[np.argmin(w[fidx])]
                if w[j] < worst:
                    kind, p, worst = "b", j, w[j]
        if m > n_eq:
            rows = np.flatnonzero(~active[n_eq:]) + n_eq
            if rows.size:
                s = C[rows] @ w - d[rows]
                j = int(np.argmin(s))
                if s[j] < worst:
                    kind, p, worst = "r", rows[j], s[j]
        if kind is None:
            return OPTIMAL, w, free, active, iters

        lam_p = 0.0
        while True:
            iters += 1
            if iters > max_iter:
                return MAX_ITER, w, free, active, iters
            if updates >= _REFRESH:
                gram = C[:, free] @ C[:, free].T
                updates = 0
            E = np.flatnonzero(active)
            fidx = np.flatnonzero(free)
            zidx = np.flatnonzero(~free)
            CE = C[E]
            if kind == "b":
                rhs = CE[:, p]
            else:
                rhs = gram[E, p]
            if E.size:
                try:
                    r_E = _chol_solve(gram[np.ix_(E, E)], rhs)
                except np.linalg.LinAlgError:
                    return SINGULAR, w, free, active, iters
            else:
                r_E = np.zeros(0)
            z = np.zeros(n)
            if kind == "b":
                z[fidx] = -(CE[:, fidx].T @ r_E)
                z[p] += 1.0
                zn = z[p]
                r_Z = -(CE[:, zidx].T @ r_E)
                s = w[p]
            else:
                z[fidx] = C[p, fidx] - CE[:, fidx].T @ r_E
                zn = float(z[fidx] @ C[p, fidx])
                r_Z = C[p, zidx] - CE[:, zidx].T @ r_E
                s = float(C[p] @ w - d[p])

            t2 = -s / zn if zn > _ZN_EPS else np.inf
            t1, drop_kind, drop = np.inf, None, -1
            for k, r in zip(E, r_E):
                if k >= n_eq and r > _R_EPS:
                    ratio = lam[k] / r
                    if ratio < t1:
                        t1, drop_kind, drop = ratio, "r", k
            if zidx.size:
                pos = r_Z > _R_EPS
                if np.any(pos):
                    ratios = mu[zidx[pos]] / r_Z[pos]
                    j = int(np.argmin(ratios))
                    if ratios[j] < t1:
                        t1, drop_kind, drop = ratios[j], "b", zidx[pos][j]
            if not np.isfinite(t1) and not np.isfinite(t2):
                return INFEASIBLE, w, free, active, iters
            t = min(t1, t2)
            if np.isfinite(t2):
                w += t * z
            if E.size:
                lam[E] -= t * r_E
            if zidx.size:
                mu[zidx] -= t * r_Z
            lam_p += t
            if t2 <= t1:
                if kind == "b":
                    free[p] = False
                    w[p] = 0.0
                    mu[p] = lam_p
                    col = C[:, p]
                    gram -= np.outer(col, col)
                    updates += 1
                else:
                    active[p] = True
                    lam[p] = lam_p
                break
            if drop_kind == "b":
                free[drop] = True
                mu[drop] = 0.0
                w[drop] = 0.0
                col = C[:, drop]
                gram += np.outer(col, col)
                updates += 1
            else:
                active[drop] = False
                lam[drop] = 0.0
