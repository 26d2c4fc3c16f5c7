import csv

import numpy as np
import pytest

from mpctune import CondensedMPC, MPCModel, ThetaParams, mpc_solve
from mpctune.plants import LinearPlant, Scenario, cartpole_default, make_plant
from mpctune.rollout import (
    nominal_loss,
    penalty_gamma,
    penalty_subgradient,
    robust_loss,
    rollout_with_jacobian,
    simulate,
    trajectory_to_csv,
    violation_metrics,
)
from conftest import central_diff


def tight_integrator(N=3):
    dt = 0.1
    return MPCModel(
        A=[[1.0, dt], [0.0, 1.0]],
        B=[[0.0], [dt]],
        H_x=[[1.0, 0.0], [-1.0, 0.0]],
        h_x=[0.5, 0.5],
        H_u=[[1.0], [-1.0]],
        h_u=[0.6, 0.6],
        Q_x=[[1.0, 0.0], [0.0, 0.1]],
        N=N,
    )


def integrator_plant(model):
    return LinearPlant(model.A, model.B)


def demo_theta(model, rng):
    base = ThetaParams.initial(model)
    return ThetaParams(
        L_P=base.L_P + 0.2 * rng.standard_normal((2, 2)),
        L_R=base.L_R + 0.1 * rng.standard_normal((1, 1)),
        eta_x=rng.uniform(0.05, 0.2, (model.N, 2)),
        eta_u=rng.uniform(0.05, 0.2, (model.N, 2)),
    )


def demo_scenario(rng, T=4, x0=(0.9, 0.0)):
    w = rng.uniform([-0.01, -0.02], [0.01, 0.02], size=(T, 2))
    return Scenario(id=0, d=[], x0=np.array(x0), w=w)


def test_penalty_values_and_subgradient():
    H = np.array([[1.0, 0.0], [-1.0, 0.0]])
    h = np.array([0.5, 0.5])
    assert penalty_gamma(H, h, [0.7, 3.0]) == pytest.approx(0.2)
    np.testing.assert_allclose(penalty_subgradient(H, h, [0.7, 3.0]), [1.0, 0.0])
    assert penalty_gamma(H, h, [-0.8, 0.0]) == pytest.approx(0.3)
    np.testing.assert_allclose(penalty_subgradient(H, h, [-0.8, 0.0]), [-1.0, 0.0])
    # boundary point: zero is a valid subgradient and the one we pick
    assert penalty_gamma(H, h, [0.5, 0.0]) == 0.0
    np.testing.assert_allclose(penalty_subgradient(H, h, [0.5, 0.0]), [0.0, 0.0])


def test_rollout_matches_manual_loop(rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    plant = integrator_plant(model)
    sc = demo_scenario(rng)
    bundle = simulate(model, theta, plant, sc)

    x = sc.x0.copy()
    for t in range(4):
        u, _ = mpc_solve(model, theta, x)
        np.testing.assert_allclose(bundle.inputs[t], u, atol=1e-9)
        x = plant.step(x, u) + sc.w[t]
        np.testing.assert_allclose(bundle.states[t + 1], x, atol=1e-12)
    np.testing.assert_allclose(
        bundle.stage_costs,
        [s @ model.Q_x @ s for s in bundle.states], atol=1e-12)
    np.testing.assert_allclose(
        bundle.gammas,
        [penalty_gamma(model.H_x, model.h_x, s) for s in bundle.states],
        atol=1e-15)


def test_state_jacobians_match_finite_differences(rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    plant = integrator_plant(model)
    sc = demo_scenario(rng)
    bundle = rollout_with_jacobian(model, theta, plant, sc)
    vec0 = theta.pack()

    def states_of(vec):
        th = ThetaParams.unpack(model, vec)
        return simulate(model, th, plant, sc).states.ravel()

    fd = central_diff(states_of, vec0)
    np.testing.assert_allclose(bundle.jac_states.reshape(fd.shape), fd,
                               atol=2e-5, rtol=1e-4)
    assert np.all(bundle.jac_states[0] == 0.0)


def test_loss_gradients_match_finite_differences(rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    theta_ref = ThetaParams.initial(model)
    plant = integrator_plant(model)
    sc = demo_scenario(rng)
    bundle = rollout_with_jacobian(model, theta, plant, sc)
    vec0 = theta.pack()

    value, grad = nominal_loss(model, bundle)
    assert value > 0

    def nominal_of(vec):
        th = ThetaParams.unpack(model, vec)
        b = simulate(model, th, plant, sc)
        return np.array([nominal_loss(model, b)[0]])

    fd = central_diff(nominal_of, vec0).ravel()
    np.testing.assert_allclose(grad, fd, atol=1e-4, rtol=5e-4)

    value_r, grad_r = robust_loss(model, bundle, theta, theta_ref)
    assert value_r > 0

    def robust_of(vec):
        th = ThetaParams.unpack(model, vec)
        b = simulate(model, th, plant, sc)
        return np.array([robust_loss(model, b, th, theta_ref)[0]])

    fd_r = central_diff(robust_of, vec0).ravel()
    np.testing.assert_allclose(grad_r, fd_r, atol=1e-4, rtol=5e-4)


def test_gradients_absent_without_sensitivities(rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    bundle = simulate(model, theta, integrator_plant(model), demo_scenario(rng))
    assert bundle.jac_states is None
    _, grad = nominal_loss(model, bundle)
    assert grad is None
    _, grad_r = robust_loss(model, bundle, theta, theta)
    assert grad_r is None


def test_rollout_is_deterministic(rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    plant = integrator_plant(model)
    sc = demo_scenario(rng)
    a = simulate(model, theta, plant, sc)
    b = simulate(model, theta, plant, sc)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.inputs.tobytes() == b.inputs.tobytes()
    # computing sensitivities must not perturb the trajectory
    c = rollout_with_jacobian(model, theta, plant, sc)
    assert c.states.tobytes() == a.states.tobytes()


def test_violation_metrics(rng):
    model = tight_integrator()
    theta = ThetaParams.initial(model)
    plant = integrator_plant(model)
    quiet = Scenario(id=0, d=[], x0=[0.1, 0.0], w=np.zeros((3, 2)))
    m_quiet = violation_metrics(model, simulate(model, theta, plant, quiet))
    assert not m_quiet["violated"]
    assert m_quiet["total_gamma"] == 0.0
    assert m_quiet["max_relative"] <= 0.0

    loud = Scenario(id=1, d=[], x0=[0.9, 0.0], w=np.zeros((3, 2)))
    m_loud = violation_metrics(model, simulate(model, theta, plant, loud))
    assert m_loud["violated"]
    assert m_loud["violated_steps"] >= 1
    assert m_loud["max_gamma"] >= 0.4 - 1e-9
    assert m_loud["max_relative"] == pytest.approx(0.4 / 0.5, rel=1e-6)


def test_trajectory_csv(tmp_path, rng):
    model = tight_integrator()
    theta = demo_theta(model, rng)
    bundle = simulate(model, theta, integrator_plant(model), demo_scenario(rng))
    path = tmp_path / "traj.csv"
    trajectory_to_csv(path, bundle)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x0", "x1", "u0", "gamma"]
    assert len(rows) == 1 + bundle.states.shape[0]
    assert float(rows[1][1]) == bundle.states[0, 0]
    assert rows[-1][3] == ""  # no input at the final state
    assert float(rows[2][3]) == bundle.inputs[1, 0]


def test_cartpole_closed_loop_smoke(rng):
    plant = make_plant(cartpole_default(), d=[0.02, -0.03, 0.04])
    A_d, B_d = plant.jacobians(np.zeros(4), 0.0)
    model = MPCModel(
        A=A_d, B=B_d,
        H_x=[[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, -1.0, 0.0],
             [0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]],
        h_x=[0.2, 0.2, 0.8, 0.8],
        H_u=[[1.0], [-1.0]], h_u=[0.75, 0.75],
        Q_x=np.diag([1.0, 0.001, 1.0, 0.001]),
        N=5,
    )
    theta = ThetaParams.initial(model)
    T = 25
    w = rng.uniform([0.0, -0.01, 0.0, -0.1], [0.0, 0.01, 0.0, 0.1], size=(T, 4))
    sc = Scenario(id=0, d=[], x0=[-3.0, 0.1, 0.0, -0.1], w=w)
    bundle = simulate(model, theta, plant, sc, policy=CondensedMPC(model, theta))
    assert np.all(np.isfinite(bundle.states))
    assert np.max(np.abs(bundle.states[:, 2])) < np.pi / 2
    assert bundle.states[-1, 0] > bundle.states[0, 0]  # cart makes progress
    assert np.all(np.abs(bundle.inputs) <= 0.75 + 1e-9)
    assert bundle.diagnostics["qp_iterations"] > 0
