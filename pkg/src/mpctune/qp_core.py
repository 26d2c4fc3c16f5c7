"""Strongly convex dense QP solver with exact active sets.

Problems are given in the standard form

    min_y  0.5 y'Q y + q'y    s.t.  G y <= g,  F y = phi

with Q symmetric positive definite. The solver returns the primal optimum
together with exact multipliers and the active set, which downstream
sensitivity code differentiates through; accuracy of the multipliers matters
more here than raw speed, hence an active-set method rather than a first-order
or interior-point one.

Two interchangeable kernels implement the same algorithm: a compiled extension
(built at install time) and a numpy fallback. Selection happens at import;
set MPCTUNE_PURE_PYTHON=1 to force the fallback.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _qp_kernel_py
from .errors import (
    DimensionMismatch,
    Infeasible,
    MaxIterationsExceeded,
    NotStronglyConvex,
)

_FORCE_PY = os.environ.get("MPCTUNE_PURE_PYTHON", "").strip() not in ("", "0")
try:
    if _FORCE_PY:
        raise ImportError("pure-python kernel forced via MPCTUNE_PURE_PYTHON")
    from . import _qpkernel as _compiled_kernel
except ImportError:
    _compiled_kernel = None

DEFAULT_TOL = 1e-9
# minimum-eigenvalue threshold for "strongly convex", relative to the cost
# scale; loose on purpose, it must flag (near-)singular problems while letting
# badly scaled but factorizable ones through (tuning can push weight ratios
# past 1e9 and those solves are still fine)
CONVEXITY_RTOL = 1e-12
# multiplier entries above this (relative to the largest one) count as active
ACTIVE_RTOL = 1e-7


def qp_backend():
    """Name of the kernel answering solve_qp calls: 'compiled' or 'python'."""
    return "compiled" if _compiled_kernel is not None else "python"


def _as_matrix(M, n, name):
    if M is None:
        return np.zeros((0, n))
    M = np.ascontiguousarray(np.atleast_2d(np.asarray(M, dtype=np.float64)))
    if M.size and M.shape[1] != n:
        raise DimensionMismatch(f"{name} has {M.shape[1]} columns, expected {n}")
    if not M.size:
        M = M.reshape(0, n)
    return M


def _as_vector(v, m, name):
    if v is None:
        return np.zeros(0)
    v = np.ascontiguousarray(np.asarray(v, dtype=np.float64).ravel())
    if v.shape[0] != m:
        raise DimensionMismatch(f"{name} has length {v.shape[0]}, expected {m}")
    return v


@dataclass(frozen=True)
class StandardQP:
    """Problem data for min 0.5 y'Qy + q'y s.t. Gy <= g, Fy = phi.

    Q is symmetrized defensively on input. Exactly duplicated inequality rows
    (same G row and same bound) are rejected at construction: they make the
    multipliers non-unique and break the active-set sensitivity downstream.
    """

    Q: np.ndarray
    q: np.ndarray
    G: np.ndarray = None
    g: np.ndarray = None
    F: np.ndarray = None
    phi: np.ndarray = None

    def __post_init__(self):
        Q = np.ascontiguousarray(np.atleast_2d(np.asarray(self.Q, dtype=np.float64)))
        if Q.shape[0] != Q.shape[1]:
            raise DimensionMismatch(f"Q must be square, got {Q.shape}")
        n = Q.shape[0]
        asym = float(np.max(np.abs(Q - Q.T))) if n else 0.0
        if asym > 1e-6 * (1.0 + float(np.max(np.abs(Q))) if Q.size else 1.0):
            raise DimensionMismatch("Q is not symmetric")
        Q = np.ascontiguousarray((Q + Q.T) / 2.0)
        q = _as_vector(self.q, n, "q")
        G = _as_matrix(self.G, n, "G")
        g = _as_vector(self.g, G.shape[0], "g")
        F = _as_matrix(self.F, n, "F")
        phi = _as_vector(self.phi, F.shape[0], "phi")
        if F.shape[0] > n:
            raise DimensionMismatch(f"{F.shape[0]} equality rows exceed {n} variables")
        seen = set()
        for i in range(G.shape[0]):
            key = (G[i].tobytes(), g[i].tobytes())
            if key in seen:
                raise DimensionMismatch(f"duplicated inequality row {i}")
            seen.add(key)
        for name, val in (("Q", Q), ("q", q), ("G", G), ("g", g), ("F", F), ("phi", phi)):
            if val.size and not np.all(np.isfinite(val)):
                raise DimensionMismatch(f"{name} contains non-finite entries")
            object.__setattr__(self, name, val)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m_in(self):
        return self.G.shape[0]

    @property
    def m_eq(self):
        return self.F.shape[0]


@dataclass(frozen=True)
class KKTResiduals:
    """Max-norm KKT residual components of a candidate primal-dual pair."""

    stationarity: float
    primal_ineq: float
    primal_eq: float
    dual: float
    complementarity: float

    @property
    def max_violation(self):
        return max(self.stationarity, self.primal_ineq, self.primal_eq,
                   self.dual, self.complementarity)


@dataclass(frozen=True)
class PrimalDualSolution:
    y: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    active_set: np.ndarray
    kkt: KKTResiduals
    iterations: int
    backend: str = field(default="python", compare=False)


def kkt_residuals(qp, y, lam, mu):
    """Max-norm KKT residuals of (y, lam, mu) for qp."""
    y = np.asarray(y, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    stat = qp.Q @ y + qp.q
    if qp.m_in:
        stat = stat + qp.G.T @ lam
        slack = qp.G @ y - qp.g
        primal_in = max(0.0, float(np.max(slack)))
        dual = max(0.0, float(np.max(-lam)))
        comp = float(np.max(np.abs(lam * slack)))
    else:
        primal_in = dual = comp = 0.0
    if qp.m_eq:
        stat = stat + qp.F.T @ mu
        primal_eq = float(np.max(np.abs(qp.F @ y - qp.phi)))
    else:
        primal_eq = 0.0
    return KKTResiduals(
        stationarity=float(np.max(np.abs(stat))) if stat.size else 0.0,
        primal_ineq=primal_in,
        primal_eq=primal_eq,
        dual=dual,
        complementarity=comp,
    )


def validate(qp, tol=DEFAULT_TOL):
    """Expensive well-posedness checks: strong convexity and equality rank."""
    eigs = np.linalg.eigvalsh(qp.Q)
    min_eig = float(eigs[0])
    norm_q = float(np.max(np.abs(eigs))) if eigs.size else 0.0
    if min_eig < CONVEXITY_RTOL * (1.0 + norm_q):
        raise NotStronglyConvex(
            f"min eigenvalue {min_eig:.3e} below threshold "
            f"{CONVEXITY_RTOL * (1.0 + norm_q):.3e}")
    if qp.m_eq:
        rank = np.linalg.matrix_rank(qp.F)
        if rank < qp.m_eq:
            raise DimensionMismatch(
                f"equality rows are linearly dependent (rank {rank} < {qp.m_eq})")


def solve_qp(qp, tol=DEFAULT_TOL, warm_start=None, max_iter=None,
             check=True, backend=None):
    """Solve qp to an exact active set.

    Parameters
    ----------
    qp : StandardQP
    tol : feasibility/optimality tolerance (also the KKT residual target).
    warm_start : optional iterable of inequality indices guessed active;
        warm solves must agree with cold ones to solver tolerance.
    max_iter : active-set iteration cap; default scales with problem size.
    check : run the strong-convexity / equality-rank validation. Callers
        looping over a cached problem may disable it after the first solve.
    backend : force 'python' or 'compiled' (testing and benchmarks only).

    Returns PrimalDualSolution; deterministic bit-for-bit in all inputs.
    """
    if check:
        validate(qp, tol)
    if max_iter is None:
        max_iter = 100 + 20 * (qp.m_in + qp.m_eq)
    if backend is None:
        kernel = _compiled_kernel if _compiled_kernel is not None else _qp_kernel_py
        backend_name = qp_backend()
    elif backend == "python":
        kernel, backend_name = _qp_kernel_py, "python"
    elif backend == "compiled":
        if _compiled_kernel is None:
            raise RuntimeError("compiled kernel is not available")
        kernel, backend_name = _compiled_kernel, "compiled"
    else:
        raise ValueError(f"unknown backend {backend!r}")

    warm = None
    if warm_start is not None:
        warm = np.asarray(
            sorted({int(i) for i in np.asarray(warm_start).ravel()
                    if 0 <= int(i) < qp.m_in}), dtype=np.int64)

    y, lam, mu, iterations, status = kernel.solve_dense(
        qp.Q, qp.q, qp.G, qp.g, qp.F, qp.phi, float(tol), int(max_iter), warm)
    if status == _qp_kernel_py.NOTSPD:
        raise NotStronglyConvex("Cholesky factorization of Q failed")
    if status == _qp_kernel_py.INFEASIBLE:
        raise Infeasible("constraint set is empty (or numerically degenerate)")
    if status == _qp_kernel_py.MAXITER:
        raise MaxIterationsExceeded(f"no optimum within {max_iter} active-set steps")

    lam_scale = float(np.max(lam)) if lam.size else 0.0
    active = np.flatnonzero(lam > ACTIVE_RTOL * (1.0 + lam_scale)).astype(np.int64)
    res = kkt_residuals(qp, y, lam, mu)
    return PrimalDualSolution(y=y, lam=lam, mu=mu, active_set=active,
                              kkt=res, iterations=int(iterations),
                              backend=backend_name)
