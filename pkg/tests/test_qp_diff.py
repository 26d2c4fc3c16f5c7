import numpy as np
import pytest

from mpctune import SingularSensitivity, StandardQP, solve_qp
from mpctune.qp_diff import (
    ParamJacobians,
    build_ops,
    complementarity_margin,
    dual_jacobian,
    primal_jacobian,
    sign_selector,
)
from conftest import central_diff, random_feasible_qp


def affine_family(Q, q0, Jq, G, g0, Jg, F, phi0, Jphi):
    """QP family with affine data maps; returns (solve_at, stacks_at)."""

    def solve_at(p):
        qp = StandardQP(Q=Q, q=q0 + Jq @ p, G=G, g=g0 + Jg @ p,
                        F=F, phi=phi0 + Jphi @ p)
        return qp, solve_qp(qp)

    def stacks_at(qp):
        ops = build_ops(qp)
        n_z = qp.m_in + qp.m_eq
        n_dir = Jq.shape[1]
        M = np.linalg.solve(qp.Q, np.vstack([qp.G, qp.F]).T).T  # C Q^{-1}
        B = np.vstack([Jg, Jphi]) + M @ Jq
        W = -np.linalg.solve(qp.Q, Jq)
        A = np.zeros((n_dir, n_z, n_z))
        return ParamJacobians(A=A, B=B, W=W), ops

    return solve_at, stacks_at


def test_active_scalar_bound_sensitivity():
    # min 0.5 y^2 s.t. y <= g at g = -1: dy/dg = 1. dlam/dg = -1
    qp = StandardQP(Q=[[1.0]], q=[0.0], G=[[1.0]], g=[-1.0])
    sol = solve_qp(qp)
    pj = ParamJacobians(A=np.zeros((1, 1, 1)), B=np.array([[1.0]]),
                        W=np.zeros((1, 1)))
    J_z = dual_jacobian(qp, sol, pj)
    np.testing.assert_allclose(J_z, [[-1.0]], atol=1e-12)
    J_y = primal_jacobian(qp, sol, pj, J_z=J_z)
    np.testing.assert_allclose(J_y, [[1.0]], atol=1e-12)


def test_cost_scale_discriminator():
    # with Q = 2 the same bound parameter gives dlam/dg = -2 but still dy/dg = 1;
    # only the Q^{-1} recovery correction produces that pair
    qp = StandardQP(Q=[[2.0]], q=[0.0], G=[[1.0]], g=[-1.0])
    sol = solve_qp(qp)
    pj = ParamJacobians(A=np.zeros((1, 1, 1)), B=np.array([[1.0]]),
                        W=np.zeros((1, 1)))
    J_z = dual_jacobian(qp, sol, pj)
    np.testing.assert_allclose(J_z, [[-2.0]], atol=1e-12)
    J_y = primal_jacobian(qp, sol, pj, J_z=J_z)
    np.testing.assert_allclose(J_y, [[1.0]], atol=1e-12)


def test_inactive_constraint_zero_sensitivity():
    qp = StandardQP(Q=[[1.0]], q=[-1.0], G=[[1.0]], g=[5.0])
    sol = solve_qp(qp)
    pj = ParamJacobians(A=np.zeros((1, 1, 1)), B=np.array([[1.0]]),
                        W=np.zeros((1, 1)))
    J_z = dual_jacobian(qp, sol, pj)
    np.testing.assert_allclose(J_z, [[0.0]], atol=1e-15)
    J_y = primal_jacobian(qp, sol, pj, J_z=J_z)
    np.testing.assert_allclose(J_y, [[0.0]], atol=1e-15)


def test_affine_family_matches_finite_differences(rng):
    checked = 0
    attempts = 0
    while checked < 25 and attempts < 200:
        attempts += 1
        n, m_in, m_eq, n_dir = 5, 6, 1, 3
        Q, q0, G, g0, F, phi0 = random_feasible_qp(rng, n=n, m_in=m_in, m_eq=m_eq)
        Jq = rng.standard_normal((n, n_dir))
        Jg = rng.standard_normal((m_in, n_dir))
        Jphi = rng.standard_normal((m_eq, n_dir))
        solve_at, stacks_at = affine_family(Q, q0, Jq, G, g0, Jg, F, phi0, Jphi)
        p0 = np.zeros(n_dir)
        qp, sol = solve_at(p0)
        if complementarity_margin(qp, sol) < 1e-3:
            continue
        checked += 1
        pj, ops = stacks_at(qp)
        J_z = dual_jacobian(qp, sol, pj, ops=ops)
        J_y = primal_jacobian(qp, sol, pj, J_z=J_z, ops=ops)

        J_y_fd = central_diff(lambda p: solve_at(p)[1].y, p0)
        J_z_fd = central_diff(
            lambda p: np.concatenate([solve_at(p)[1].lam, solve_at(p)[1].mu]), p0)
        np.testing.assert_allclose(J_y, J_y_fd, atol=1e-5, rtol=1e-5)
        np.testing.assert_allclose(J_z, J_z_fd, atol=1e-5, rtol=1e-5)
    assert checked == 25


def test_cost_matrix_direction_matches_finite_differences(rng):
    # Q(p) = Q0 + p * D exercises the A and W stacks together
    checked = 0
    while checked < 10:
        n, m_in = 4, 5
        Q0, q, G, g, F, phi = random_feasible_qp(rng, n=n, m_in=m_in, m_eq=1)
        Dhalf = rng.standard_normal((n, n))
        D = Dhalf + Dhalf.T

        def solve_at(p):
            qp = StandardQP(Q=Q0 + p[0] * D, q=q, G=G, g=g, F=F, phi=phi)
            return qp, solve_qp(qp)

        qp, sol = solve_at(np.zeros(1))
        if complementarity_margin(qp, sol) < 1e-3:
            continue
        checked += 1
        C = np.vstack([G, F])
        M = np.linalg.solve(qp.Q, C.T).T
        A = (-M @ D @ M.T)[None, :, :]
        B = (-M @ D @ np.linalg.solve(qp.Q, q))[:, None]
        W = (-np.linalg.solve(qp.Q, D @ sol.y))[:, None]
        pj = ParamJacobians(A=A, B=B, W=W)
        J_y = primal_jacobian(qp, sol, pj)
        J_y_fd = central_diff(lambda p: solve_at(p)[1].y, np.zeros(1), h=1e-6)
        np.testing.assert_allclose(J_y, J_y_fd, atol=1e-5, rtol=1e-5)


def test_gamma_invariance(rng):
    Q, q, G, g, F, phi = random_feasible_qp(rng, n=5, m_in=6, m_eq=1)
    qp = StandardQP(Q=Q, q=q, G=G, g=g, F=F, phi=phi)
    sol = solve_qp(qp)
    n_z = qp.m_in + qp.m_eq
    n_dir = 2
    B = np.arange(n_z * n_dir, dtype=float).reshape(n_z, n_dir) / n_z
    pj = ParamJacobians(A=np.zeros((n_dir, n_z, n_z)), B=B, W=np.zeros((qp.n, n_dir)))
    ref = dual_jacobian(qp, sol, pj, ops=build_ops(qp, gamma=1e-3))
    scale = np.max(np.abs(ref)) + 1.0
    for gamma in (3e-3, 0.03, 0.3, 1.0):
        J = dual_jacobian(qp, sol, pj, ops=build_ops(qp, gamma=gamma))
        assert np.max(np.abs(J - ref)) / scale <= 1e-8


def test_fixed_point_residual(rng):
    for _ in range(10):
        Q, q, G, g, F, phi = random_feasible_qp(rng, n=5, m_in=5, m_eq=1)
        qp = StandardQP(Q=Q, q=q, G=G, g=g, F=F, phi=phi)
        sol = solve_qp(qp)
        ops = build_ops(qp)
        n_z = qp.m_in + qp.m_eq
        n_dir = 3
        B = np.sin(np.arange(n_z * n_dir, dtype=float)).reshape(n_z, n_dir)
        pj = ParamJacobians(A=np.zeros((n_dir, n_z, n_z)), B=B,
                            W=np.zeros((qp.n, n_dir)))
        J_z = dual_jacobian(qp, sol, pj, ops=ops)
        t = sign_selector(qp, sol)
        U = t[:, None] * (np.eye(n_z) - ops.gamma * ops.H)
        U[np.diag_indices_from(U)] -= 1.0
        z = np.concatenate([sol.lam, sol.mu])
        V = -ops.gamma * t[:, None] * pj.B
        assert np.max(np.abs(U @ J_z + V)) <= 1e-8 * (1.0 + np.max(np.abs(V)))
        # inactive inequality rows are identically zero
        inactive = np.setdiff1d(np.arange(qp.m_in), sol.active_set)
        assert np.max(np.abs(J_z[inactive])) == 0.0


def test_near_duplicate_active_rows_raise():
    # two almost-identical bounds both active make the fixed-point matrix
    # numerically singular
    qp = StandardQP(Q=[[1.0]], q=[0.0],
                    G=[[1.0], [1.0 + 1e-14]], g=[-1.0, -1.0])
    sol = solve_qp(qp)
    if sol.active_set.size < 2:
        object.__setattr__(sol, "active_set", np.array([0, 1]))
    pj = ParamJacobians(A=np.zeros((1, 2, 2)), B=np.ones((2, 1)),
                        W=np.zeros((1, 1)))
    with pytest.raises(SingularSensitivity):
        dual_jacobian(qp, sol, pj)


def test_equality_parameter_sensitivity():
    # min 0.5||y||^2 s.t. y0 + y1 = phi: y = phi/2 * [1, 1]
    Q = np.eye(2)

    def solve_at(p):
        qp = StandardQP(Q=Q, q=np.zeros(2), F=[[1.0, 1.0]], phi=[p[0]])
        return qp, solve_qp(qp)

    qp, sol = solve_at(np.array([1.0]))
    pj = ParamJacobians(A=np.zeros((1, 1, 1)), B=np.array([[1.0]]),
                        W=np.zeros((2, 1)))
    J_y = primal_jacobian(qp, sol, pj)
    np.testing.assert_allclose(J_y, [[0.5], [0.5]], atol=1e-12)
