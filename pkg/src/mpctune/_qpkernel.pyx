# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of the numpy QP kernel.

Same dual active-set algorithm as _qp_kernel_py, ported branch for branch:
identical working-set updates, identical lowest-index tie-breaking, identical
status codes. Dense linear algebra goes through scipy's exported BLAS/LAPACK
bindings instead of numpy calls, so returned numbers can differ from the
reference kernel in the last few ulps but the discrete active set agrees and
both kernels stay deterministic bit-for-bit for identical inputs.

Keep this file in sync with _qp_kernel_py.py; the parity tests compare the
two on randomized problems.
"""

import numpy as np

from libc.math cimport INFINITY, fabs, isfinite
from scipy.linalg.cython_blas cimport daxpy, ddot, dgemm, dgemv
from scipy.linalg.cython_lapack cimport dgesv, dpotrf, dpotrs, dtrtrs

OK = 0
INFEASIBLE = 1
MAXITER = 2
NOTSPD = 3

cdef enum:
    C_OK = 0
    C_INFEASIBLE = 1
    C_MAXITER = 2
    C_NOTSPD = 3
    WARM_ROUNDS = 12    # KKT cascade budget before giving up and going cold

cdef double DEP_EPS = 1e-14   # relative residual^2 below which a normal is dependent
cdef double R_EPS = 1e-12     # dual direction entries below this never block
cdef double ONE = 1.0
cdef double ZERO = 0.0
cdef double MINUS = -1.0


cdef int _kkt_solve(double[:, ::1] Q, double[::1] q, double[:, ::1] G,
                    double[::1] g, double[:, ::1] F, double[::1] phi,
                    long* W, int k, double[::1] y, double* lamW,
                    double[::1] mu):
    """KKT solve on working set W; fills y, lamW[:k], mu. 0 ok, -1 singular."""
    cdef int n = q.shape[0]
    cdef int m_eq = phi.shape[0]
    cdef int dim = n + k + m_eq
    cdef int i, j, t, w, info = 0, one = 1
    K_arr = np.zeros((dim, dim), dtype=np.float64, order="F")
    rhs_arr = np.empty(dim, dtype=np.float64)
    piv_arr = np.empty(dim, dtype=np.intc)
    cdef double[::1, :] K = K_arr
    cdef double[::1] rhs = rhs_arr
    cdef int[::1] piv = piv_arr
    for j in range(n):
        for i in range(n):
            K[i, j] = Q[i, j]
    for t in range(k):
        w = <int> W[t]
        for i in range(n):
            K[i, n + t] = G[w, i]
            K[n + t, i] = G[w, i]
    for j in range(m_eq):
        for i in range(n):
            K[i, n + k + j] = F[j, i]
            K[n + k + j, i] = F[j, i]
    for i in range(n):
        rhs[i] = -q[i]
    for t in range(k):
        rhs[n + t] = g[W[t]]
    for j in range(m_eq):
        rhs[n + k + j] = phi[j]
    dgesv(&dim, &one, &K[0, 0], &dim, &piv[0], &rhs[0], &dim, &info)
    if info != 0:
        return -1
    for i in range(n):
        y[i] = rhs[i]
    for t in range(k):
        lamW[t] = rhs[n + t]
    for j in range(m_eq):
        mu[j] = rhs[n + k + j]
    return 0


cdef int _warm_cascade(double[:, ::1] Q, double[::1] q, double[:, ::1] G,
                       double[::1] g, double[:, ::1] F, double[::1] phi,
                       long[::1] warm, double tol, double[::1] y,
                       double[::1] lam, double[::1] mu, int* rounds_out):
    """Add/drop cascade from a warm guess; 1 accepted, 0 fall back cold."""
    cdef int n = q.shape[0]
    cdef int m_in = g.shape[0]
    cdef int m_eq = phi.shape[0]
    cdef int k = warm.shape[0]
    cdef int rounds, i, j, t, besti, inset
    cdef double mx, v, best
    cdef int n_ = n, one = 1
    if k + m_eq > n:
        return 0
    W_arr = np.empty(n + 1, dtype=np.int64)
    lamW_arr = np.empty(n + 1, dtype=np.float64)
    gy_arr = np.empty(max(m_in, 1), dtype=np.float64)
    cdef long[::1] W = W_arr
    cdef double[::1] lamW = lamW_arr
    cdef double[::1] gyv = gy_arr
    for t in range(k):
        W[t] = warm[t]
    for rounds in range(1, WARM_ROUNDS + 1):
        if _kkt_solve(Q, q, G, g, F, phi, &W[0], k, y, &lamW[0], mu) != 0:
            return 0
        for i in range(n):
            if not isfinite(y[i]):
                return 0
        if k:
            # drop the most negative multiplier first; ties go to the lowest
            # constraint index because W is kept sorted
            j = 0
            for t in range(1, k):
                if lamW[t] < lamW[j]:
                    j = t
            mx = 0.0
            for t in range(k):
                if fabs(lamW[t]) > mx:
                    mx = fabs(lamW[t])
            if lamW[j] < -tol * (1.0 + mx):
                for t in range(j, k - 1):
                    W[t] = W[t + 1]
                k -= 1
                continue
        if m_in:
            dgemv(b"T", &n_, &m_in, &ONE, &G[0, 0], &n_, &y[0], &one,
                  &ZERO, &gyv[0], &one)
            best = -INFINITY
            besti = -1
            for i in range(m_in):
                inset = 0
                for t in range(k):
                    if W[t] == i:
                        inset = 1
                        break
                if inset:
                    continue
                v = gyv[i] - g[i]
                if v > best:
                    best = v
                    besti = i
            if besti >= 0 and best > tol * (1.0 + fabs(g[besti])):
                if k + m_eq + 1 > n:
                    return 0
                t = k
                while t > 0 and W[t - 1] > besti:
                    W[t] = W[t - 1]
                    t -= 1
                W[t] = besti
                k += 1
                continue
        for i in range(m_in):
            lam[i] = 0.0
        for t in range(k):
            lam[W[t]] = lamW[t] if lamW[t] > 0.0 else 0.0
        rounds_out[0] = rounds
        return 1
    return 0


cdef void _normal_of(int cid, double[:, ::1] G, double[:, ::1] F,
                     double* sigma, int m_in, int n, double* out):
    cdef int i, j
    if cid < m_in:
        for i in range(n):
            out[i] = -G[cid, i]
    else:
        j = cid - m_in
        for i in range(n):
            out[i] = -sigma[j] * F[j, i]


cdef double _sviol_of(int cid, double[:, ::1] G, double[::1] g,
                      double[:, ::1] F, double[::1] phi, double* sigma,
                      int m_in, int n, double[::1] y):
    # c'y - b in the >= convention; <= 0 while the constraint is violated
    cdef int one = 1
    cdef int n_ = n
    cdef int j
    if cid < m_in:
        return g[cid] - ddot(&n_, &G[cid, 0], &one, &y[0], &one)
    j = cid - m_in
    return -sigma[j] * (ddot(&n_, &F[j, 0], &one, &y[0], &one) - phi[j])


cdef int _episode(int cid, double[:, ::1] G, double[::1] g, double[:, ::1] F,
                  double[::1] phi, double* sigma, double[::1, :] L,
                  double[::1] y, long* W, double* u, int* k_io,
                  double tol, int max_iter, int* iters_io,
                  double* nrm, double* chat, double* A, double* B,
                  double* BtB, double* rvec, double* resid, double* z):
    """One dual active-set episode for constraint cid."""
    cdef int n = y.shape[0]
    cdef int m_in = g.shape[0]
    cdef int n_ = n, one = 1, info = 0
    cdef int k, i, t, idx, w, j_drop
    cdef double u_plus = 0.0
    cdef double chat2, resid2, t1, t2, cand, sv
    _normal_of(cid, G, F, sigma, m_in, n, nrm)
    for i in range(n):
        chat[i] = nrm[i]
    dtrtrs(b"L", b"N", b"N", &n_, &one, &L[0, 0], &n_, chat, &n_, &info)
    chat2 = ddot(&n_, chat, &one, chat, &one)
    while True:
        iters_io[0] += 1
        if iters_io[0] > max_iter:
            return C_MAXITER
        k = k_io[0]
        if k:
            for t in range(k):
                _normal_of(<int> W[t], G, F, sigma, m_in, n, A + t * n)
            for i in range(k * n):
                B[i] = A[i]
            dtrtrs(b"L", b"N", b"N", &n_, &k, &L[0, 0], &n_, B, &n_, &info)
            dgemm(b"T", b"N", &k, &k, &n_, &ONE, B, &n_, B, &n_, &ZERO,
                  BtB, &k)
            dpotrf(b"L", &k, BtB, &k, &info)
            if info != 0:
                return C_INFEASIBLE  # working set degenerated; should not happen
            dgemv(b"T", &n_, &k, &ONE, B, &n_, chat, &one, &ZERO, rvec, &one)
            dpotrs(b"L", &k, &one, BtB, &k, rvec, &k, &info)
            for i in range(n):
                resid[i] = chat[i]
            dgemv(b"N", &n_, &k, &MINUS, B, &n_, rvec, &one, &ONE,
                  resid, &one)
        else:
            for i in range(n):
                resid[i] = chat[i]
        resid2 = ddot(&n_, resid, &one, resid, &one)

        t1 = INFINITY
        j_drop = -1
        for idx in range(k):
            w = <int> W[idx]
            if w < m_in and rvec[idx] > R_EPS:
                cand = u[idx] / rvec[idx]
                if cand < t1 or (cand == t1 and (j_drop < 0 or w < W[j_drop])):
                    t1 = cand
                    j_drop = idx
        sv = _sviol_of(cid, G, g, F, phi, sigma, m_in, n, y)
        if resid2 > DEP_EPS * (1.0 + chat2):
            t2 = -sv / resid2  # c'z equals resid2 exactly by the LS optimality
        else:
            t2 = INFINITY
        if not isfinite(t1) and not isfinite(t2):
            return C_INFEASIBLE
        if t2 <= t1:
            for i in range(n):
                z[i] = resid[i]
            dtrtrs(b"L", b"T", b"N", &n_, &one, &L[0, 0], &n_, z, &n_, &info)
            daxpy(&n_, &t2, z, &one, &y[0], &one)
            for idx in range(k):
                u[idx] -= t2 * rvec[idx]
            W[k] = cid
            u[k] = u_plus + t2
            k_io[0] = k + 1
            return C_OK
        # blocking constraint: take the dual step, drop it, retry same cid
        if isfinite(t2):
            for i in range(n):
                z[i] = resid[i]
            dtrtrs(b"L", b"T", b"N", &n_, &one, &L[0, 0], &n_, z, &n_, &info)
            daxpy(&n_, &t1, z, &one, &y[0], &one)
        for idx in range(k):
            u[idx] -= t1 * rvec[idx]
        u_plus += t1
        for t in range(j_drop, k - 1):
            W[t] = W[t + 1]
            u[t] = u[t + 1]
        k_io[0] = k - 1


cdef int _goldfarb_idnani(double[:, ::1] Q, double[::1, :] L, double[::1] q,
                          double[:, ::1] G, double[::1] g, double[:, ::1] F,
                          double[::1] phi, double tol, int max_iter,
                          double[::1] y, long* W_out, int* k_out,
                          int* iters_out):
    """Cold dual active-set loop; fills W_out with the sorted ineq working set."""
    cdef int n = q.shape[0]
    cdef int m_in = g.shape[0]
    cdef int m_eq = phi.shape[0]
    cdef int n_ = n, one = 1, info = 0
    cdef int i, j, t, k, cid, st, nkeep
    cdef double s
    cdef int cap = n + m_eq + 2
    W_arr = np.empty(cap, dtype=np.int64)
    u_arr = np.empty(cap, dtype=np.float64)
    sg_arr = np.ones(max(m_eq, 1), dtype=np.float64)
    sv_arr = np.empty(max(m_in, 1), dtype=np.float64)
    scr_arr = np.empty(6 * n + 2 * n * cap + cap * cap + cap,
                       dtype=np.float64)
    cdef long[::1] W = W_arr
    cdef double[::1] u = u_arr
    cdef double[::1] sigma = sg_arr
    cdef double[::1] svec = sv_arr
    cdef double[::1] scr = scr_arr
    cdef double* nrm = &scr[0]
    cdef double* chat = nrm + n
    cdef double* resid = chat + n
    cdef double* z = resid + n
    cdef double* A = z + n
    cdef double* B = A + n * cap
    cdef double* BtB = B + n * cap
    cdef double* rvec = BtB + cap * cap

    for i in range(n):
        y[i] = -q[i]
    dpotrs(b"L", &n_, &one, &L[0, 0], &n_, &y[0], &n_, &info)
    k = 0
    iters_out[0] = 0

    # equalities are mandatory: pin them in index order before any inequality
    for j in range(m_eq):
        s = ddot(&n_, &F[j, 0], &one, &y[0], &one) - phi[j]
        sigma[j] = 1.0 if s >= 0.0 else -1.0
        st = _episode(m_in + j, G, g, F, phi, &sigma[0], L, y, &W[0], &u[0],
                      &k, tol, max_iter, iters_out, nrm, chat, A, B, BtB,
                      rvec, resid, z)
        if st != C_OK:
            return st

    while True:
        cid = -1
        if m_in:
            dgemv(b"T", &n_, &m_in, &MINUS, &G[0, 0], &n_, &y[0], &one,
                  &ZERO, &svec[0], &one)
            for i in range(m_in):
                svec[i] += g[i]
            for t in range(k):
                if W[t] < m_in:
                    svec[W[t]] = INFINITY
            cid = 0
            for i in range(1, m_in):
                if svec[i] < svec[cid]:
                    cid = i
        if cid < 0 or svec[cid] >= -tol * (1.0 + fabs(g[cid])):
            break
        st = _episode(cid, G, g, F, phi, &sigma[0], L, y, &W[0], &u[0], &k,
                      tol, max_iter, iters_out, nrm, chat, A, B, BtB, rvec,
                      resid, z)
        if st != C_OK:
            return st

    nkeep = 0
    for t in range(k):
        if W[t] < m_in:
            W_out[nkeep] = W[t]
            nkeep += 1
    # insertion sort; the set is small and nearly in order already
    for i in range(1, nkeep):
        j = i
        while j > 0 and W_out[j - 1] > W_out[j]:
            W_out[j - 1], W_out[j] = W_out[j], W_out[j - 1]
            j -= 1
    k_out[0] = nkeep
    return C_OK


def solve_dense(Q, q, G, g, F, phi, double tol, int max_iter, warm=None):
    """Full solve; returns (y, lam, mu, iterations, status)."""
    Q_arr = np.ascontiguousarray(Q, dtype=np.float64)
    q_arr = np.ascontiguousarray(q, dtype=np.float64)
    G_arr = np.ascontiguousarray(G, dtype=np.float64)
    g_arr = np.ascontiguousarray(g, dtype=np.float64)
    F_arr = np.ascontiguousarray(F, dtype=np.float64)
    phi_arr = np.ascontiguousarray(phi, dtype=np.float64)
    cdef double[:, ::1] Qv = Q_arr
    cdef double[::1] qv = q_arr
    cdef double[:, ::1] Gv = G_arr
    cdef double[::1] gv = g_arr
    cdef double[:, ::1] Fv = F_arr
    cdef double[::1] phiv = phi_arr
    cdef int n = qv.shape[0]
    cdef int m_in = gv.shape[0]
    cdef int m_eq = phiv.shape[0]
    cdef int info = 0, n_ = n
    cdef int k = 0, rounds = 0, iters = 0, t

    y_arr = np.zeros(n, dtype=np.float64)
    lam_arr = np.zeros(m_in, dtype=np.float64)
    mu_arr = np.zeros(m_eq, dtype=np.float64)
    cdef double[::1] y = y_arr
    cdef double[::1] lam = lam_arr
    cdef double[::1] mu = mu_arr

    L_arr = np.asfortranarray(Q_arr.copy())
    cdef double[::1, :] L = L_arr
    if n:
        dpotrf(b"L", &n_, &L[0, 0], &n_, &info)
    if info != 0:
        return y_arr, lam_arr, mu_arr, 0, NOTSPD

    cdef long[::1] wv
    if warm is not None:
        w_arr = np.asarray(warm, dtype=np.int64).ravel()
        w_arr = np.unique(w_arr[(w_arr >= 0) & (w_arr < m_in)])
        wv = w_arr
        if _warm_cascade(Qv, qv, Gv, gv, Fv, phiv, wv, tol, y, lam, mu,
                         &rounds):
            return y_arr, lam_arr, mu_arr, rounds, OK
        y_arr[:] = 0.0
        lam_arr[:] = 0.0
        mu_arr[:] = 0.0

    W_arr = np.empty(n + m_eq + 2, dtype=np.int64)
    lamW_arr = np.empty(n + m_eq + 2, dtype=np.float64)
    cdef long[::1] W = W_arr
    cdef double[::1] lamW = lamW_arr
    cdef int status = _goldfarb_idnani(Qv, L, qv, Gv, gv, Fv, phiv, tol,
                                       max_iter, y, &W[0], &k, &iters)
    if status != C_OK:
        y_arr[:] = 0.0
        return y_arr, lam_arr, mu_arr, iters, status

    # one clean KKT solve on the final working set gives the returned numbers
    if _kkt_solve(Qv, qv, Gv, gv, Fv, phiv, &W[0], k, y, &lamW[0], mu) != 0:
        y_arr[:] = 0.0
        mu_arr[:] = 0.0
        return y_arr, lam_arr, mu_arr, iters, INFEASIBLE
    for t in range(k):
        lam[W[t]] = lamW[t] if lamW[t] > 0.0 else 0.0
    return y_arr, lam_arr, mu_arr, iters, OK
