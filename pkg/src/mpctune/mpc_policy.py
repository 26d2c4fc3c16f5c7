"""Condensed formulation of a tunable linear MPC policy.

Evaluating the policy means solving one strictly convex QP per state.  The
decision vector stacks predicted states, inputs and slack variables,

    y = [z_1 .. z_N, v_0 .. v_{N-1}, s_1 .. s_N],

with the measured state eliminated into the equality right-hand side.  Cost
matrices enter through lower-triangular factors (P = L_P L_P' + ridge, same
for R), so every parameter value yields a well-posed problem, and constraint
tightenings enter squared, which keeps margins from flipping sign without an
extra projection.  That structure makes the condensed data split cleanly:

    Q depends on (L_P, L_R)     g depends on (eta_x, eta_u)
    phi depends on the state    G, F, q are fixed

and the split is what keeps the parameter sensitivity stacks cheap to
assemble.  State constraints are softened with slacks (L1 plus a small L2
term), input constraints stay hard, so the QP is feasible for every state as
long as the tightened input set is nonempty.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag, cho_solve

from .errors import DimensionMismatch
from .qp_core import PrimalDualSolution, StandardQP, solve_qp, validate
from .qp_diff import ParamJacobians, build_ops, dual_jacobian, primal_jacobian

RIDGE = 1e-6


def _matrix(name, value, rows=None, cols=None):
    out = np.ascontiguousarray(np.asarray(value, dtype=float))
    if out.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {out.shape}")
    if rows is not None and out.shape[0] != rows:
        raise DimensionMismatch(f"{name} must have {rows} rows, got {out.shape[0]}")
    if cols is not None and out.shape[1] != cols:
        raise DimensionMismatch(f"{name} must have {cols} columns, got {out.shape[1]}")
    if not np.all(np.isfinite(out)):
        raise DimensionMismatch(f"{name} contains non-finite entries")
    return out


def _vector(name, value, size=None):
    out = np.ascontiguousarray(np.asarray(value, dtype=float)).ravel()
    if size is not None and out.size != size:
        raise DimensionMismatch(f"{name} must have {size} entries, got {out.size}")
    if not np.all(np.isfinite(out)):
        raise DimensionMismatch(f"{name} contains non-finite entries")
    return out


@dataclass(frozen=True)
class MPCModel:
    """Prediction model and constraint data shared by every policy instance.

    The polytopes {x : H_x x <= h_x} and {u : H_u u <= h_u} must contain the
    origin (h >= 0); tightenings shrink them toward it.  ``tighten_terminal``
    controls whether the margin for the last predicted state is applied or
    frozen at zero.
    """

    A: np.ndarray
    B: np.ndarray
    H_x: np.ndarray
    h_x: np.ndarray
    H_u: np.ndarray
    h_u: np.ndarray
    Q_x: np.ndarray
    N: int
    soft_l1: float = 1e3
    soft_l2: float = 1e-2
    tighten_terminal: bool = True

    def __post_init__(self):
        A = _matrix("A", self.A)
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got shape {A.shape}")
        n_x = A.shape[0]
        B = _matrix("B", self.B, rows=n_x)
        H_x = _matrix("H_x", self.H_x, cols=n_x)
        h_x = _vector("h_x", self.h_x, size=H_x.shape[0])
        H_u = _matrix("H_u", self.H_u, cols=B.shape[1])
        h_u = _vector("h_u", self.h_u, size=H_u.shape[0])
        Q_x = _matrix("Q_x", self.Q_x, rows=n_x, cols=n_x)
        if np.max(np.abs(Q_x - Q_x.T), initial=0.0) > 1e-8 * (1.0 + np.max(np.abs(Q_x))):
            raise DimensionMismatch("Q_x must be symmetric")
        Q_x = 0.5 * (Q_x + Q_x.T)
        if not isinstance(self.N, (int, np.integer)) or self.N < 1:
            raise DimensionMismatch(f"N must be a positive integer, got {self.N!r}")
        if np.any(h_x < 0) or np.any(h_u < 0):
            raise ValueError("constraint bounds must be nonnegative (origin feasible)")
        if self.soft_l1 <= 0 or self.soft_l2 <= 0:
            raise ValueError("slack penalty weights must be positive")
        for k, v in (("A", A), ("B", B), ("H_x", H_x), ("h_x", h_x),
                     ("H_u", H_u), ("h_u", h_u), ("Q_x", Q_x)):
            object.__setattr__(self, k, v)
        object.__setattr__(self, "N", int(self.N))

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_cx(self):
        return self.H_x.shape[0]

    @property
    def n_cu(self):
        return self.H_u.shape[0]


def theta_dim(model):
    """Length of the packed parameter vector for ``model``."""
    n_x, n_u = model.n_x, model.n_u
    return (n_x * (n_x + 1)) // 2 + (n_u * (n_u + 1)) // 2 \
        + model.N * (model.n_cx + model.n_cu)


@dataclass(frozen=True)
class ThetaParams:
    """Tunable policy parameters.

    ``L_P`` and ``L_R`` are lower-triangular cost factors (upper parts are
    discarded), ``eta_x``/``eta_u`` hold one tightening margin per horizon
    stage and constraint row.  The packed layout is the row-major lower
    triangle of L_P, then L_R, then eta_x and eta_u flattened row-major.
    """

    L_P: np.ndarray
    L_R: np.ndarray
    eta_x: np.ndarray
    eta_u: np.ndarray

    def __post_init__(self):
        L_P = _matrix("L_P", self.L_P)
        L_R = _matrix("L_R", self.L_R)
        if L_P.shape[0] != L_P.shape[1] or L_R.shape[0] != L_R.shape[1]:
            raise DimensionMismatch("cost factors must be square")
        eta_x = _matrix("eta_x", self.eta_x)
        eta_u = _matrix("eta_u", self.eta_u)
        if eta_x.shape[0] != eta_u.shape[0]:
            raise DimensionMismatch(
                f"eta_x and eta_u must agree on the horizon length, "
                f"got {eta_x.shape[0]} and {eta_u.shape[0]}")
        object.__setattr__(self, "L_P", np.tril(L_P))
        object.__setattr__(self, "L_R", np.tril(L_R))
        object.__setattr__(self, "eta_x", eta_x)
        object.__setattr__(self, "eta_u", eta_u)

    def P(self):
        return self.L_P @ self.L_P.T + RIDGE * np.eye(self.L_P.shape[0])

    def R(self):
        return self.L_R @ self.L_R.T + RIDGE * np.eye(self.L_R.shape[0])

    def pack(self):
        ip, jp = np.tril_indices(self.L_P.shape[0])
        ir, jr = np.tril_indices(self.L_R.shape[0])
        return np.concatenate([self.L_P[ip, jp], self.L_R[ir, jr],
                               self.eta_x.ravel(), self.eta_u.ravel()])

    @classmethod
    def unpack(cls, model, vec):
        vec = _vector("theta", vec, size=theta_dim(model))
        n_x, n_u, N = model.n_x, model.n_u, model.N
        n_lp = (n_x * (n_x + 1)) // 2
        n_lr = (n_u * (n_u + 1)) // 2
        L_P = np.zeros((n_x, n_x))
        L_P[np.tril_indices(n_x)] = vec[:n_lp]
        L_R = np.zeros((n_u, n_u))
        L_R[np.tril_indices(n_u)] = vec[n_lp:n_lp + n_lr]
        off = n_lp + n_lr
        eta_x = vec[off:off + N * model.n_cx].reshape(N, model.n_cx)
        off += N * model.n_cx
        eta_u = vec[off:].reshape(N, model.n_cu)
        return cls(L_P=L_P, L_R=L_R, eta_x=eta_x, eta_u=eta_u)

    @classmethod
    def initial(cls, model):
        """Terminal cost from the stage cost, modest input weight, no margins."""
        try:
            L_P = np.linalg.cholesky(model.Q_x)
        except np.linalg.LinAlgError:
            jitter = 1e-9 * (1.0 + np.max(np.abs(model.Q_x)))
            L_P = np.linalg.cholesky(model.Q_x + jitter * np.eye(model.n_x))
        return cls(L_P=L_P,
                   L_R=0.1 * np.eye(model.n_u),
                   eta_x=np.zeros((model.N, model.n_cx)),
                   eta_u=np.zeros((model.N, model.n_cu)))

    def to_dict(self):
        return {"L_P": self.L_P.tolist(), "L_R": self.L_R.tolist(),
                "eta_x": self.eta_x.tolist(), "eta_u": self.eta_u.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(L_P=data["L_P"], L_R=data["L_R"],
                   eta_x=data["eta_x"], eta_u=data["eta_u"])


@dataclass(frozen=True)
class PolicyStep:
    """One policy evaluation: applied input plus the QP it came from."""

    u: np.ndarray
    qp: StandardQP
    sol: PrimalDualSolution


class CondensedMPC:
    """Condensed QP data and sensitivity stacks for a fixed (model, theta).

    Building an instance precomputes everything that does not depend on the
    measured state: the QP matrices, their factorization, and the parameter
    derivative stacks.  Per-step work is then one equality right-hand side
    update, one warm-startable solve, and (optionally) two triangular-solve
    sweeps for the Jacobians.
    """

    def __init__(self, model, theta, gamma=None):
        if not isinstance(model, MPCModel):
            raise DimensionMismatch("model must be an MPCModel")
        if not isinstance(theta, ThetaParams):
            raise DimensionMismatch("theta must be a ThetaParams")
        n_x, n_u, n_cx, n_cu, N = model.n_x, model.n_u, model.n_cx, model.n_cu, model.N
        if theta.L_P.shape[0] != n_x or theta.L_R.shape[0] != n_u:
            raise DimensionMismatch("cost factor sizes do not match the model")
        if theta.eta_x.shape != (N, n_cx) or theta.eta_u.shape != (N, n_cu):
            raise DimensionMismatch("tightening shapes do not match the model")
        self.model = model
        self.theta = theta

        self.n_y = N * (n_x + n_u + n_cx)
        self._zoff = 0
        self._voff = N * n_x
        self._soff = N * (n_x + n_u)
        self.n_eq = N * n_x
        self.m_in = N * (2 * n_cx + n_cu)
        self.n_dir = n_x + theta_dim(model)

        Q, q = self._build_cost()
        G, g = self._build_inequalities()
        F = self._build_equalities()
        self.qp0 = StandardQP(Q=Q, q=q, G=G, g=g, F=F, phi=np.zeros(self.n_eq))
        validate(self.qp0)
        self.ops = build_ops(self.qp0, gamma=gamma)
        self._assemble_stacks(q)

    # ---- index helpers ----------------------------------------------------

    def z_slice(self, k):
        """Predicted state z_k, k = 1..N."""
        n_x = self.model.n_x
        return slice(self._zoff + (k - 1) * n_x, self._zoff + k * n_x)

    def v_slice(self, k):
        """Input v_k, k = 0..N-1."""
        n_u = self.model.n_u
        return slice(self._voff + k * n_u, self._voff + (k + 1) * n_u)

    def s_slice(self, k):
        """Slack s_k, k = 1..N."""
        n_cx = self.model.n_cx
        return slice(self._soff + (k - 1) * n_cx, self._soff + k * n_cx)

    def _state_rows(self, k):
        n_cx = self.model.n_cx
        return slice((k - 1) * n_cx, k * n_cx)

    def _input_rows(self, k):
        m = self.model
        base = m.N * m.n_cx
        return slice(base + k * m.n_cu, base + (k + 1) * m.n_cu)

    def _slack_rows(self, k):
        m = self.model
        base = m.N * (m.n_cx + m.n_cu)
        return slice(base + (k - 1) * m.n_cx, base + k * m.n_cx)

    def _eta_x_eff(self):
        # terminal margin may be frozen at zero
        eta = self.theta.eta_x.copy()
        if not self.model.tighten_terminal:
            eta[-1, :] = 0.0
        return eta

    # ---- assembly ---------------------------------------------------------

    def _build_cost(self):
        m, th = self.model, self.theta
        blocks = [m.Q_x + RIDGE * np.eye(m.n_x)] * (m.N - 1) + [th.P()]
        blocks += [th.R()] * m.N
        blocks += [m.soft_l2 * np.eye(m.n_cx)] * m.N
        Q = 2.0 * block_diag(*blocks)
        q = np.zeros(self.n_y)
        q[self._soff:] = m.soft_l1
        return Q, q

    def _build_inequalities(self):
        m = self.model
        G = np.zeros((self.m_in, self.n_y))
        g = np.zeros(self.m_in)
        eta_x = self._eta_x_eff()
        for k in range(1, m.N + 1):
            rows = self._state_rows(k)
            G[rows, self.z_slice(k)] = m.H_x
            G[rows, self.s_slice(k)] = -np.eye(m.n_cx)
            g[rows] = m.h_x - eta_x[k - 1] ** 2
        for k in range(m.N):
            rows = self._input_rows(k)
            G[rows, self.v_slice(k)] = m.H_u
            g[rows] = m.h_u - self.theta.eta_u[k] ** 2
        for k in range(1, m.N + 1):
            G[self._slack_rows(k), self.s_slice(k)] = -np.eye(m.n_cx)
        return G, g

    def _build_equalities(self):
        m = self.model
        F = np.zeros((self.n_eq, self.n_y))
        eye = np.eye(m.n_x)
        for k in range(1, m.N + 1):
            rows = slice((k - 1) * m.n_x, k * m.n_x)
            F[rows, self.z_slice(k)] = eye
            F[rows, self.v_slice(k - 1)] = -m.B
            if k >= 2:
                F[rows, self.z_slice(k - 1)] = -m.A
        return F

    def _assemble_stacks(self, q):
        m, th = self.model, self.theta
        n_x, n_u, n_cx, n_cu, N = m.n_x, m.n_u, m.n_cx, m.n_cu, m.N
        n_z = self.m_in + self.n_eq
        Qinv_q = cho_solve((self.ops.cho_L, True), q)
        M = cho_solve((self.ops.cho_L, True), self.ops.CT).T  # C Q^{-1}

        lp_pairs = list(zip(*np.tril_indices(n_x)))
        lr_pairs = list(zip(*np.tril_indices(n_u)))
        d0 = n_x  # directions 0..n_x-1 are the measured state

        # dQ/dtheta for the cost-factor directions; everything else leaves Q alone
        D = np.zeros((len(lp_pairs) + len(lr_pairs), self.n_y, self.n_y))
        for t, (i, j) in enumerate(lp_pairs):
            col = 2.0 * th.L_P[:, j]
            blk = self.z_slice(N).start
            D[t, blk + i, blk:blk + n_x] += col
            D[t, blk:blk + n_x, blk + i] += col
        for t, (i, j) in enumerate(lr_pairs):
            col = 2.0 * th.L_R[:, j]
            for k in range(N):
                blk = self.v_slice(k).start
                D[len(lp_pairs) + t, blk + i, blk:blk + n_u] += col
                D[len(lp_pairs) + t, blk:blk + n_u, blk + i] += col
        self._D_stack = D
        self._qdir_idx = np.arange(d0, d0 + D.shape[0])

        A_stack = np.zeros((self.n_dir, n_z, n_z))
        B_stack = np.zeros((n_z, self.n_dir))
        B_stack[self.m_in:self.m_in + n_x, :n_x] = m.A
        for t, gd in enumerate(self._qdir_idx):
            MD = M @ D[t]
            A_stack[gd] = -MD @ M.T
            B_stack[:, gd] = -MD @ Qinv_q

        off = d0 + D.shape[0]
        eta_x = self._eta_x_eff()
        for k in range(N):
            for r in range(n_cx):
                B_stack[k * n_cx + r, off + k * n_cx + r] = -2.0 * eta_x[k, r]
        off += N * n_cx
        base = N * n_cx
        for k in range(N):
            for r in range(n_cu):
                B_stack[base + k * n_cu + r, off + k * n_cu + r] = \
                    -2.0 * th.eta_u[k, r]
        self._A_stack = A_stack
        self._B_stack = B_stack

    # ---- per-step interface -----------------------------------------------

    def qp_at(self, x_t):
        """Condensed QP for the measured state ``x_t``."""
        x = _vector("x_t", x_t, size=self.model.n_x)
        phi = np.zeros(self.n_eq)
        phi[:self.model.n_x] = self.model.A @ x
        return replace(self.qp0, phi=phi)

    def step(self, x_t, warm_start=None):
        qp = self.qp_at(x_t)
        sol = solve_qp(qp, warm_start=warm_start, check=False)
        u = sol.y[self.v_slice(0)].copy()
        return PolicyStep(u=u, qp=qp, sol=sol)

    def param_jacobians(self, sol):
        W = np.zeros((self.n_y, self.n_dir))
        if self._qdir_idx.size:
            Dy = np.einsum("dij,j->di", self._D_stack, sol.y)
            W[:, self._qdir_idx] = -cho_solve((self.ops.cho_L, True), Dy.T)
        return ParamJacobians(A=self._A_stack, B=self._B_stack, W=W)

    def jacobians(self, step):
        """Sensitivity of the applied input.

        Returns ``(J_x, J_theta)`` with shapes (n_u, n_x) and
        (n_u, theta_dim); columns follow the packed parameter layout.
        """
        pj = self.param_jacobians(step.sol)
        # closed-loop use: pick the least-squares element at degenerate
        # active sets instead of failing the whole rollout
        J_z = dual_jacobian(step.qp, step.sol, pj, ops=self.ops, lenient=True)
        J_y = primal_jacobian(step.qp, step.sol, pj, J_z=J_z, ops=self.ops)
        J_u = J_y[self.v_slice(0)]
        n_x = self.model.n_x
        return J_u[:, :n_x].copy(), J_u[:, n_x:].copy()


def condense(model, theta, x_t, gamma=None):
    """One-shot condensed QP; build a CondensedMPC for repeated solves."""
    return CondensedMPC(model, theta, gamma=gamma).qp_at(x_t)


def mpc_solve(model, theta, x_t, warm_start=None):
    st = CondensedMPC(model, theta).step(x_t, warm_start=warm_start)
    return st.u, st.sol


def mpc_jacobians(model, theta, x_t):
    policy = CondensedMPC(model, theta)
    st = policy.step(x_t)
    J_x, J_th = policy.jacobians(st)
    return st.u, J_x, J_th
