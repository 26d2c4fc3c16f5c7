"""Shared oracles and generators.

The oracles here are deliberately independent of the package internals:
brute-force KKT enumeration for QPs, plain central differences for
sensitivities. Tests compare library output against these, never the library
against itself.
"""

import itertools

import numpy as np
import pytest


def brute_force_qp(Q, q, G, g, F=None, phi=None, feas_tol=1e-9):
    """Enumerate candidate active sets and return the KKT point, or None.

    For strongly convex QPs any primal-feasible, dual-feasible KKT point is
    the optimum, so the first subset that checks out decides. Subsets are
    visited by size then lexicographically, which makes the outcome
    deterministic.
    """
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float).ravel()
    n = q.shape[0]
    G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, dtype=float))
    g = np.zeros(0) if g is None else np.asarray(g, dtype=float).ravel()
    F = np.zeros((0, n)) if F is None else np.atleast_2d(np.asarray(F, dtype=float))
    phi = np.zeros(0) if phi is None else np.asarray(phi, dtype=float).ravel()
    m_in, m_eq = G.shape[0], F.shape[0]

    for size in range(0, min(m_in, max(n - m_eq, 0)) + 1):
        for S in itertools.combinations(range(m_in), size):
            S = list(S)
            A = np.vstack([G[S], F])
            k = A.shape[0]
            K = np.zeros((n + k, n + k))
            K[:n, :n] = Q
            K[:n, n:] = A.T
            K[n:, :n] = A
            rhs = np.concatenate([-q, g[S], phi])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            if not np.all(np.isfinite(sol)):
                continue
            y = sol[:n]
            lam_S = sol[n:n + size]
            mu = sol[n + size:]
            if size and np.min(lam_S) < -feas_tol:
                continue
            if m_in:
                viol = G @ y - g
                viol[S] = 0.0
                if np.max(viol) > feas_tol * (1.0 + np.max(np.abs(g))):
                    continue
            lam = np.zeros(m_in)
            lam[S] = np.maximum(lam_S, 0.0)
            return y, lam, mu
    return None


def random_feasible_qp(rng, n=None, m_in=None, m_eq=None):
    """Random strongly convex QP guaranteed feasible via an anchor point."""
    if n is None:
        n = int(rng.integers(1, 11))
    if m_in is None:
        m_in = int(rng.integers(0, 9))
    if m_eq is None:
        m_eq = int(rng.integers(0, min(3, n)))
    A = rng.standard_normal((n, n))
    Q = A.T @ A + (0.2 + rng.uniform()) * np.eye(n)
    q = 2.0 * rng.standard_normal(n)
    anchor = 0.5 * rng.standard_normal(n)
    G = rng.standard_normal((m_in, n))
    g = G @ anchor + rng.uniform(0.05, 1.5, size=m_in)
    F = rng.standard_normal((m_eq, n))
    phi = F @ anchor
    return Q, q, G, g, F, phi


def central_diff(fn, x, h=1e-6):
    """Central finite differences of a vector-valued fn at x, column per coord."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.zeros(f0.shape + (x.size,))
    for i in range(x.size):
        step = h * (1.0 + abs(x.flat[i]))
        xp = x.copy()
        xp.flat[i] += step
        xm = x.copy()
        xm.flat[i] -= step
        J[..., i] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * step)
    return J


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
