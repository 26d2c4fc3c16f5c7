from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from mpctune import DimensionMismatch, MPCModel, ThetaParams
from mpctune.plants import PlantDef, Scenario
from mpctune.tuning import (
    P2LResult,
    pick2learn,
    project_theta,
    scan_violations,
    seed_margins,
    solve_penalized,
    step_size,
    tune_nominal,
    verify_on_training,
)


@pytest.fixture(scope="module")
def instance():
    """Double integrator with a velocity bound the nominal policy rides."""
    dt = 0.1
    model = MPCModel(A=[[1.0, dt], [0.0, 1.0]], B=[[0.0], [dt]],
                     H_x=[[1, 0], [-1, 0], [0, 1], [0, -1]],
                     h_x=[2.0, 2.0, 0.4, 0.4],
                     H_u=[[1], [-1]], h_u=[0.6, 0.6],
                     Q_x=[[1, 0], [0, 0.1]], N=3)
    pd = PlantDef(kind="linear", params={"A": model.A.tolist(),
                                         "B": model.B.tolist()})
    nominal = [Scenario(id=-1, d=[], x0=[-1.5, 0.0], w=np.zeros((12, 2)))]
    theta_star = tune_nominal(model, pd, nominal, max_it=80).theta
    rng = np.random.default_rng(5)
    scenarios = []
    for i in range(6):
        x0 = np.array([rng.uniform(-1.6, -1.3), rng.uniform(-0.1, 0.1)])
        w = rng.uniform([-0.01, -0.13], [0.01, 0.13], size=(12, 2))
        scenarios.append(Scenario(id=i, d=[], x0=x0, w=w))
    return model, pd, nominal, theta_star, scenarios


def test_step_size_schedule():
    assert step_size(1) == pytest.approx(0.1)
    assert step_size(4) == pytest.approx(0.1 / 4 ** 0.6)
    steps = [step_size(k) for k in range(1, 50)]
    assert all(b < a for a, b in zip(steps, steps[1:]))
    assert step_size(2, c=1.5, zeta=0.5) == pytest.approx(1.5 / np.sqrt(2))
    with pytest.raises(DimensionMismatch):
        step_size(0)


def test_projection(instance):
    model = instance[0]
    huge = ThetaParams(L_P=2e3 * np.eye(2), L_R=[[-5e3]],
                       eta_x=3.0 * np.ones((3, 4)), eta_u=-9.0 * np.ones((3, 2)))
    proj = project_theta(model, huge)
    assert np.max(np.abs(proj.pack())) <= 1e3
    np.testing.assert_allclose(proj.L_P[0, 0], 1e3)
    np.testing.assert_allclose(proj.L_R[0, 0], -1e3)
    # margins stay inside [-sqrt(h), sqrt(h)] so tightened sets are nonempty
    np.testing.assert_allclose(proj.eta_x[0], np.sqrt(model.h_x))
    np.testing.assert_allclose(proj.eta_u[0], -np.sqrt(model.h_u))
    again = project_theta(model, proj)
    assert again.pack().tobytes() == proj.pack().tobytes()


def test_seed_margins(instance):
    model = instance[0]
    theta = ThetaParams(L_P=np.eye(2), L_R=[[0.1]],
                        eta_x=np.array([[0.0, 0.2, 0.0, -0.1]] * 3),
                        eta_u=np.zeros((3, 2)))
    seeded = seed_margins(theta, 0.05)
    np.testing.assert_allclose(seeded.eta_x[0], [0.05, 0.2, 0.05, -0.1])
    # input margins never get seeded, tightening them cannot fix state violations
    assert np.all(seeded.eta_u == 0.0)
    assert seeded.L_P.tobytes() == theta.L_P.tobytes()
    verbatim = seed_margins(theta, 0.0)
    assert verbatim.pack().tobytes() == theta.pack().tobytes()


def test_nominal_tuning_descends_and_keeps_margins_at_zero():
    dt = 0.1
    model = MPCModel(A=[[1.0, dt], [0.0, 1.0]], B=[[0.0], [dt]],
                     H_x=[[1, 0], [-1, 0]], h_x=[0.5, 0.5],
                     H_u=[[1], [-1]], h_u=[0.6, 0.6],
                     Q_x=[[1, 0], [0, 0.1]], N=3)
    pd = PlantDef(kind="linear", params={"A": model.A.tolist(),
                                         "B": model.B.tolist()})
    nominal = [Scenario(id=-1, d=[], x0=[0.4, 0.0], w=np.zeros((10, 2)))]
    result = tune_nominal(model, pd, nominal, max_it=80)
    assert result.losses[-1] < result.losses[0]
    assert result.iterations == 80 or result.converged
    # squared margins have exactly zero gradient at zero, so they never move
    assert np.all(result.theta.eta_x == 0.0)
    assert np.all(result.theta.eta_u == 0.0)


def test_nominal_tuning_is_deterministic(instance):
    model, pd, nominal, theta_star, _ = instance
    result = tune_nominal(model, pd, nominal, max_it=80)
    assert theta_star.pack().tobytes() == result.theta.pack().tobytes()


def test_penalized_descent_runs_fixed_iterations(instance):
    model, pd, _, theta_star, scenarios = instance
    theta_a, losses_a = solve_penalized(model, pd, scenarios[:2],
                                        seed_margins(theta_star, 0.05),
                                        theta_star, max_it=7)
    assert len(losses_a) == 7
    theta_b, losses_b = solve_penalized(model, pd, scenarios[:2],
                                        seed_margins(theta_star, 0.05),
                                        theta_star, max_it=7)
    assert theta_a.pack().tobytes() == theta_b.pack().tobytes()
    assert losses_a == losses_b
    assert losses_a[-1] < losses_a[0]


def test_scan_reports_expected_violators(instance):
    model, pd, _, theta_star, scenarios = instance
    rows = scan_violations(model, theta_star, pd, scenarios)
    assert [r["id"] for r in rows] == [0, 1, 2, 3, 4, 5]
    assert all(r["violated"] for r in rows)
    worst = max(rows, key=lambda r: r["total_gamma"])
    assert worst["id"] == 2


def test_parallel_scan_matches_serial(instance):
    model, pd, _, theta_star, scenarios = instance
    serial = scan_violations(model, theta_star, pd, scenarios)
    with ProcessPoolExecutor(max_workers=2) as pool:
        parallel = scan_violations(model, theta_star, pd, scenarios,
                                   executor=pool)
    assert serial == parallel


def test_selection_loop_reaches_feasibility(instance):
    model, pd, _, theta_star, scenarios = instance
    result = pick2learn(model, pd, scenarios, theta_star, max_it=60)
    assert result.converged
    assert result.selected_ids == (2,)
    assert result.k_star == 1
    ok, n_bad = verify_on_training(model, result.theta, pd, scenarios)
    assert ok and n_bad == 0
    # the velocity margins did the work
    assert np.max(result.theta.eta_x[:, 2:]) > 0.2
    assert result.history[0]["violations"] == 6
    assert result.history[-1]["violations"] == 0


def test_selection_can_repeat_a_stubborn_scenario(instance):
    model, pd, _, theta_star, scenarios = instance
    result = pick2learn(model, pd, scenarios, theta_star, max_it=8)
    assert result.converged
    assert result.selected_ids == (2, 5)  # id 5 needed two retraining rounds
    assert len(result.history) - 1 == 3
    assert result.k_star == 2


def test_replay_on_support_is_bitwise_identical(instance):
    model, pd, _, theta_star, scenarios = instance
    for max_it in (8, 60):
        full = pick2learn(model, pd, scenarios, theta_star, max_it=max_it)
        support = [sc for sc in scenarios if sc.id in full.selected_ids]
        replay = pick2learn(model, pd, support, theta_star, max_it=max_it)
        assert replay.selected_ids == full.selected_ids
        assert replay.theta.pack().tobytes() == full.theta.pack().tobytes()
        assert replay.converged


def test_checkpoint_resume_matches_uninterrupted_run(instance, tmp_path):
    model, pd, _, theta_star, scenarios = instance
    full = pick2learn(model, pd, scenarios, theta_star, max_it=8)
    ckpt = tmp_path / "selection.json"
    partial = pick2learn(model, pd, scenarios, theta_star, max_it=8,
                         max_rounds=1, checkpoint_path=str(ckpt))
    assert not partial.converged
    assert ckpt.exists()
    resumed = pick2learn(model, pd, scenarios, theta_star, max_it=8,
                         checkpoint_path=str(ckpt), resume=True)
    assert resumed.converged
    assert resumed.selected_ids == full.selected_ids
    assert resumed.theta.pack().tobytes() == full.theta.pack().tobytes()


def test_duplicate_scenario_ids_rejected(instance):
    model, pd, _, theta_star, scenarios = instance
    twice = [scenarios[0], scenarios[0]]
    with pytest.raises(DimensionMismatch):
        pick2learn(model, pd, twice, theta_star, max_it=2)
