"""Sensitivities of QP primal-dual solutions to problem parameters.

The dual of the standard-form QP is a projected fixed point

    z = P_C(z - gamma (H z + h)),   H = [G; F] Q^{-1} [G; F]',  z = (lam, mu),

with P_C clamping the inequality multipliers at zero. Differentiating that
fixed point with a sign selector T (1 on active inequality rows and on all
equality rows, 0 elsewhere; the subgradient at lam_i = 0 is selected as 0)
gives the linear system

    U J_z = -V,   U = T(I - gamma H) - I,   V = -gamma T (A z + B),

where the stacks A and B hold the derivatives of H and h in each parameter
direction. The primal map y = -Q^{-1}([G' F'] z + q) then yields

    J_y = W - Q^{-1} [G' F'] J_z

with W the parameter derivative of the recovery map at fixed z. J_z rows on
inactive constraints are exactly zero, and the result is independent of gamma
whenever U is invertible; both properties are exercised by the tests.

At points that are not strictly complementary the selection above is one
element of the conservative Jacobian, not a classical derivative; U turning
numerically singular raises SingularSensitivity.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, get_lapack_funcs, lu_factor, lu_solve

from .errors import DimensionMismatch, SingularSensitivity

# reciprocal condition estimate below which U counts as singular
RCOND_FLOOR = 1e-12


@dataclass(frozen=True)
class ParamJacobians:
    """Derivative stacks of the QP data in each parameter direction.

    A : (n_dir, n_z, n_z) derivative of the dual Hessian H, or None when the
        cost matrix does not depend on the parameters.
    B : (n_z, n_dir) derivative of the dual linear term h = (g, phi) + CQ^{-1}q.
    W : (n_y, n_dir) derivative of the primal recovery map at fixed dual z.
    """

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray


@dataclass(frozen=True)
class SensitivityOps:
    """Cached factorizations shared by repeated sensitivity calls on one QP."""

    cho_L: np.ndarray   # lower Cholesky factor of Q
    CT: np.ndarray      # [G' F'], n_y x n_z
    H: np.ndarray       # dual Hessian C Q^{-1} C'
    gamma: float


def build_ops(qp, gamma=None):
    C = np.vstack([qp.G, qp.F])
    L = np.linalg.cholesky(qp.Q)
    M = cho_solve((L, True), C.T, check_finite=False)   # Q^{-1} C', n_y x n_z
    H = C @ M
    if gamma is None:
        norm_h = float(np.linalg.eigvalsh(H)[-1]) if H.size else 0.0
        gamma = 1.0 / (norm_h + 1.0)
    return SensitivityOps(cho_L=L, CT=C.T, H=H, gamma=float(gamma))


def sign_selector(qp, sol):
    """Diagonal of T: sign(lam_i) with sign(0) = 0 on inequality rows, 1 on
    equality rows. Activity is decided by the solver's active set."""
    t = np.zeros(qp.m_in + qp.m_eq)
    t[sol.active_set] = 1.0
    t[qp.m_in:] = 1.0
    return t


def dual_jacobian(qp, sol, pj, ops=None, lenient=False):
    """J_z: sensitivity of the dual solution z = (lam, mu), one column per
    parameter direction. Rows of inactive inequalities are exactly zero.

    With ``lenient=True`` a degenerate active set does not raise; the
    least-squares solution of the fixed-point system is returned instead.
    Any selection is admissible at such points, and closed-loop tuning has
    to step across them rather than stop.
    """
    if ops is None:
        ops = build_ops(qp)
    n_z = qp.m_in + qp.m_eq
    n_dir = pj.B.shape[1]
    if pj.B.shape[0] != n_z:
        raise DimensionMismatch(f"B stack has {pj.B.shape[0]} rows, expected {n_z}")
    t = sign_selector(qp, sol)
    U = t[:, None] * (np.eye(n_z) - ops.gamma * ops.H)
    U[np.diag_indices_from(U)] -= 1.0
    z = np.concatenate([sol.lam, sol.mu])
    Az = np.einsum("dij,j->id", pj.A, z) if pj.A is not None else 0.0
    V = -ops.gamma * t[:, None] * (Az + pj.B)

    anorm = np.linalg.norm(U, 1)
    lu, piv = lu_factor(U, check_finite=False)
    gecon = get_lapack_funcs(("gecon",), (U,))[0]
    rcond, info = gecon(lu, anorm, norm="1")
    if info != 0 or not np.isfinite(rcond) or rcond < RCOND_FLOOR:
        if not lenient:
            raise SingularSensitivity(
                f"fixed-point matrix is numerically singular (rcond {rcond:.3e}); "
                "the active set is degenerate at this solution")
        return -np.linalg.lstsq(U, V, rcond=None)[0]
    return -lu_solve((lu, piv), V, check_finite=False)


def primal_jacobian(qp, sol, pj, J_z=None, ops=None):
    """J_y = W - Q^{-1}[G' F'] J_z, one column per parameter direction."""
    if ops is None:
        ops = build_ops(qp)
    if J_z is None:
        J_z = dual_jacobian(qp, sol, pj, ops=ops)
    correction = cho_solve((ops.cho_L, True), ops.CT @ J_z, check_finite=False)
    return pj.W - correction


def complementarity_margin(qp, sol):
    """min_i max(lam_i, slack_i) over inequality rows; large means strictly
    complementary, near zero means a weakly active row."""
    if qp.m_in == 0:
        return np.inf
    slack = qp.g - qp.G @ sol.y
    return float(np.min(np.maximum(sol.lam, slack)))
