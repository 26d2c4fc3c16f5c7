"""Dense active-set QP kernel, numpy reference implementation.

Solves   min_y  0.5 y'Q y + q'y   s.t.  G y <= g,  F y = phi
for strongly convex Q. Cold starts run a dual active-set method
(Goldfarb-Idnani style) from the unconstrained optimum: equality rows are
pinned first, then violated inequalities are added one at a time with full or
partial dual steps, so every iterate stays dual feasible and termination is
finite. Warm calls first try a KKT add/drop cascade seeded with the caller's
active-set guess and fall back to the cold path on any snag.

The final working set is always re-solved through one full KKT system, so both
paths (and the compiled twin of this module) agree on the returned primal and
multipliers to solver precision. All tie-breaking is by lowest constraint
index; the kernel is deterministic bit-for-bit for identical inputs.

Status codes: 0 ok, 1 infeasible, 2 iteration cap, 3 Cholesky failed.
"""

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

OK = 0
INFEASIBLE = 1
MAXITER = 2
NOTSPD = 3

_WARM_ROUNDS = 12      # KKT cascade budget before giving up and going cold
_DEP_EPS = 1e-14       # relative residual^2 below which a normal counts as dependent
_R_EPS = 1e-12         # dual direction entries below this never block


def _kkt_solve(Q, q, G, g, F, phi, W):
    """Solve the equality KKT system for working set W (sorted ineq indices)."""
    n = q.shape[0]
    k = len(W)
    m_eq = phi.shape[0]
    dim = n + k + m_eq
    K = np.zeros((dim, dim))
    K[:n, :n] = Q
    if k:
        GW = G[W]
        K[:n, n:n + k] = GW.T
        K[n:n + k, :n] = GW
    if m_eq:
        K[:n, n + k:] = F.T
        K[n + k:, :n] = F
    rhs = np.concatenate([-q, g[W] if k else np.zeros(0), phi])
    sol = np.linalg.solve(K, rhs)
    return sol[:n], sol[n:n + k], sol[n + k:]


def _warm_cascade(Q, q, G, g, F, phi, warm, tol):
    """Add/drop cascade from a warm active-set guess; None means fall back cold."""
    n = q.shape[0]
    m_in = g.shape[0]
    m_eq = phi.shape[0]
    W = sorted({int(i) for i in warm if 0 <= int(i) < m_in})
    if len(W) + m_eq > n:
        return None
    for rounds in range(1, _WARM_ROUNDS + 1):
        try:
            y, lamW, mu = _kkt_solve(Q, q, G, g, F, phi, W)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(y)):
            return None
        if W:
            # drop the most negative multiplier first; argmin lands on the
            # lowest constraint index because W is kept sorted
            j = int(np.argmin(lamW))
            if lamW[j] < -tol * (1.0 + float(np.max(np.abs(lamW)))):
                del W[j]
                continue
        if m_in:
            viol = G @ y - g
            if W:
                viol[W] = -np.inf
            i = int(np.argmax(viol))
            if viol[i] > tol * (1.0 + abs(float(g[i]))):
                if len(W) + m_eq + 1 > n:
                    return None
                W.append(i)
                W.sort()
                continue
        lam = np.zeros(m_in)
        if W:
            lam[W] = np.maximum(lamW, 0.0)
        return y, lam, mu, rounds
    return None


def _goldfarb_idnani(Q, L, q, G, g, F, phi, tol, max_iter):
    """Cold dual active-set loop. Returns (W sorted ineq working set, status, iters)."""
    n = q.shape[0]
    m_in = g.shape[0]
    m_eq = phi.shape[0]
    y = -cho_solve((L, True), q, check_finite=False)
    W = []            # constraint ids: 0..m_in-1 inequalities, m_in+j equality j
    u = []            # multipliers aligned with W
    sigma = np.ones(m_eq)
    iters = 0

    def normal_of(cid):
        if cid < m_in:
            return -G[cid]
        return -sigma[cid - m_in] * F[cid - m_in]

    def sviol_of(cid):
        # c'y - b in the >= convention; <= 0 while the constraint is violated
        if cid < m_in:
            return float(g[cid] - G[cid] @ y)
        j = cid - m_in
        return -sigma[j] * float(F[j] @ y - phi[j])

    def run_episode(cid):
        nonlocal y, iters
        u_plus = 0.0
        chat = solve_triangular(L, normal_of(cid), lower=True, check_finite=False)
        chat2 = float(chat @ chat)
        while True:
            iters += 1
            if iters > max_iter:
                return MAXITER
            k = len(W)
            if k:
                A = np.stack([normal_of(w) for w in W], axis=1)
                B = solve_triangular(L, A, lower=True, check_finite=False)
                BtB = B.T @ B
                try:
                    cf = np.linalg.cholesky(BtB)
                except np.linalg.LinAlgError:
                    return INFEASIBLE  # working set degenerated; should not happen
                r = cho_solve((cf, True), B.T @ chat, check_finite=False)
                resid = chat - B @ r
            else:
                r = np.zeros(0)
                resid = chat
            resid2 = float(resid @ resid)

            t1 = np.inf
            j_drop = -1
            for idx in range(k):
                w = W[idx]
                if w < m_in and r[idx] > _R_EPS:
                    cand = u[idx] / r[idx]
                    if cand < t1 or (cand == t1 and (j_drop < 0 or w < W[j_drop])):
                        t1 = cand
                        j_drop = idx
            sv = sviol_of(cid)
            if resid2 > _DEP_EPS * (1.0 + chat2):
                t2 = -sv / resid2  # c'z equals resid2 exactly by the LS optimality
            else:
                t2 = np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                return INFEASIBLE
            if t2 <= t1:
                z = solve_triangular(L, resid, lower=True, trans='T', check_finite=False)
                y = y + t2 * z
                for idx in range(k):
                    u[idx] -= t2 * r[idx]
                W.append(cid)
                u.append(u_plus + t2)
                return OK
            # blocking constraint: take the dual step, drop it, retry same cid
            if np.isfinite(t2):
                z = solve_triangular(L, resid, lower=True, trans='T', check_finite=False)
                y = y + t1 * z
            for idx in range(k):
                u[idx] -= t1 * r[idx]
            u_plus += t1
            del W[j_drop]
            del u[j_drop]

    # equalities are mandatory: pin them in index order before any inequality
    for j in range(m_eq):
        s = float(F[j] @ y - phi[j])
        sigma[j] = 1.0 if s >= 0.0 else -1.0
        st = run_episode(m_in + j)
        if st != OK:
            return None, st, iters

    while True:
        s = g - G @ y if m_in else np.zeros(0)
        if W:
            mask = [w for w in W if w < m_in]
            if mask:
                s[mask] = np.inf
        cid = int(np.argmin(s)) if m_in else -1
        if cid < 0 or s[cid] >= -tol * (1.0 + abs(float(g[cid]))):
            break
        st = run_episode(cid)
        if st != OK:
            return None, st, iters
    return sorted(w for w in W if w < m_in), OK, iters


def solve_dense(Q, q, G, g, F, phi, tol, max_iter, warm=None):
    """Full solve; returns (y, lam, mu, iterations, status)."""
    n = q.shape[0]
    m_in = g.shape[0]
    m_eq = phi.shape[0]
    zero = (np.zeros(n), np.zeros(m_in), np.zeros(m_eq))
    try:
        L = np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        return (*zero, 0, NOTSPD)

    if warm is not None:
        out = _warm_cascade(Q, q, G, g, F, phi, warm, tol)
        if out is not None:
            y, lam, mu, rounds = out
            return y, lam, mu, rounds, OK

    W, status, iters = _goldfarb_idnani(Q, L, q, G, g, F, phi, tol, max_iter)
    if status != OK:
        return (*zero, iters, status)

    # one clean KKT solve on the final working set gives the returned numbers
    try:
        y, lamW, mu = _kkt_solve(Q, q, G, g, F, phi, W)
    except np.linalg.LinAlgError:
        return (*zero, iters, INFEASIBLE)
    lam = np.zeros(m_in)
    if W:
        lam[W] = np.maximum(lamW, 0.0)
    return y, lam, mu, iters, OK
