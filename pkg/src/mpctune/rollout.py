"""Closed-loop rollouts and differentiable loss evaluation.

Per-step policy Jacobians chain through the plant dynamics: with
J_t = dx_t/dtheta,

    J_{t+1} = df/dx J_t + df/du (du/dx J_t + du/dtheta),    J_0 = 0,

since the disturbance realization is held fixed while theta varies.  Losses
return their exact value together with a gradient assembled from the same
recursion.  Constraint violations are scored by an exact L1 penalty; its
subgradient at a boundary point is taken as zero, which keeps gradients of
feasible trajectories clean.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .mpc_policy import CondensedMPC, theta_dim


def penalty_gamma(H, h, x):
    """Total constraint violation of one state, sum of positive margins."""
    viol = H @ np.asarray(x, dtype=float) - h
    return float(np.sum(viol[viol > 0]))


def penalty_subgradient(H, h, x):
    viol = H @ np.asarray(x, dtype=float) - h
    mask = viol > 0
    if not np.any(mask):
        return np.zeros(H.shape[1])
    return H[mask].sum(axis=0)


@dataclass(frozen=True)
class TrajectoryBundle:
    """One closed-loop episode with everything losses need.

    ``jac_states`` is (T+1, n_x, theta_dim) or None when the rollout was run
    without sensitivities.  ``gammas`` and ``stage_costs`` cover all T+1
    states; the initial state never depends on theta, so its entries simply
    contribute zero gradient.
    """

    model: object
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    gammas: np.ndarray
    jac_states: np.ndarray
    diagnostics: dict


def simulate(model, theta, plant, scenario, with_jacobians=False, policy=None):
    """Roll the policy out against ``plant`` under one scenario."""
    if policy is None:
        policy = CondensedMPC(model, theta)
    if scenario.x0.size != model.n_x:
        raise DimensionMismatch(
            f"scenario x0 has {scenario.x0.size} entries, model expects {model.n_x}")
    if scenario.w.shape[1] != model.n_x:
        raise DimensionMismatch("scenario noise width does not match the state")
    T = scenario.w.shape[0]
    n_th = theta_dim(model)

    states = np.zeros((T + 1, model.n_x))
    states[0] = scenario.x0
    inputs = np.zeros((T, model.n_u))
    jac = np.zeros((T + 1, model.n_x, n_th)) if with_jacobians else None

    warm = None
    qp_iters = 0
    max_kkt = 0.0
    for t in range(T):
        st = policy.step(states[t], warm_start=warm)
        warm = st.sol.active_set
        inputs[t] = st.u
        if with_jacobians:
            J_ux, J_uth = policy.jacobians(st)
            J_u = J_ux @ jac[t] + J_uth
            dfdx, dfdu = plant.jacobians(states[t], st.u)
            jac[t + 1] = dfdx @ jac[t] + dfdu @ J_u
        states[t + 1] = plant.step(states[t], st.u) + scenario.w[t]
        qp_iters += st.sol.iterations
        max_kkt = max(max_kkt, st.sol.kkt.max_violation)

    gammas = np.array([penalty_gamma(model.H_x, model.h_x, x) for x in states])
    stage_costs = np.einsum("ti,ij,tj->t", states, model.Q_x, states)
    diagnostics = {"qp_iterations": int(qp_iters),
                   "max_kkt_violation": float(max_kkt),
                   "backend": st.sol.backend}
    return TrajectoryBundle(model=model, states=states, inputs=inputs,
                            stage_costs=stage_costs, gammas=gammas,
                            jac_states=jac, diagnostics=diagnostics)


def rollout_with_jacobian(model, theta, plant, scenario, policy=None):
    return simulate(model, theta, plant, scenario, with_jacobians=True,
                    policy=policy)


def _chain(bundle, state_grads):
    """Sum state-space gradients through the stored sensitivities."""
    grad = np.zeros(bundle.jac_states.shape[2])
    for g_t, J_t in zip(state_grads, bundle.jac_states):
        grad += g_t @ J_t
    return grad


def nominal_loss(model, bundle, c1=40.0):
    """Quadratic tracking cost plus exact penalty on constraint violations.

    Returns ``(value, grad)``; ``grad`` is None for bundles rolled out
    without sensitivities.
    """
    value = float(bundle.stage_costs.sum() + c1 * bundle.gammas.sum())
    if bundle.jac_states is None:
        return value, None
    grads = [2.0 * model.Q_x @ x + c1 * penalty_subgradient(model.H_x, model.h_x, x)
             for x in bundle.states]
    return value, _chain(bundle, grads)


def robust_loss(model, bundle, theta, theta_ref, c1=40.0, c2=40.0):
    """Stay near a reference parameter while pushing violations to zero.

    The L1 term gives the penalty exactness, the squared term adds curvature
    so the updates do not chatter once violations get small.
    """
    diff = theta.pack() - theta_ref.pack()
    viol = bundle.states @ model.H_x.T - model.h_x
    pos = np.maximum(viol, 0.0)
    value = float(diff @ diff + c1 * bundle.gammas.sum() + c2 * np.sum(pos ** 2))
    if bundle.jac_states is None:
        return value, None
    grads = [c1 * penalty_subgradient(model.H_x, model.h_x, x)
             + 2.0 * c2 * (model.H_x.T @ p)
             for x, p in zip(bundle.states, pos)]
    return value, 2.0 * diff + _chain(bundle, grads)


def violation_metrics(model, bundle):
    """Per-trajectory summary used for tables and certificates."""
    gam = bundle.gammas
    viol = bundle.states @ model.H_x.T - model.h_x
    scale = np.where(np.abs(model.h_x) > 1e-12, np.abs(model.h_x), 1.0)
    rel = viol / scale
    return {
        "violated": bool(np.any(gam > 0.0)),
        "violated_steps": int(np.count_nonzero(gam > 0.0)),
        "total_gamma": float(gam.sum()),
        "max_gamma": float(gam.max()),
        "max_relative": float(rel.max()),
    }


def trajectory_to_csv(path, bundle, preamble=None):
    n_x = bundle.states.shape[1]
    n_u = bundle.inputs.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble or ():
            fh.write(line.rstrip("\n") + "\n")
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(n_x)]
                        + [f"u{j}" for j in range(n_u)] + ["gamma"])
        for t, x in enumerate(bundle.states):
            u = [repr(float(v)) for v in bundle.inputs[t]] \
                if t < len(bundle.inputs) else [""] * n_u
            writer.writerow([t] + [repr(float(v)) for v in x] + u
                            + [repr(float(bundle.gammas[t]))])
