"""Closed-loop tuning: nominal descent, penalized retraining, selection loop.

All three tuners are projected subgradient methods over the packed parameter
vector with the diminishing step c / k^zeta.  The projection keeps every
entry inside a large box and every tightening inside [-sqrt(h), sqrt(h)];
since margins enter the QP squared, that last clip is exactly what keeps the
tightened constraint sets nonempty.

The selection loop (``pick2learn``) trains on the smallest prefix of
scenarios it can get away with: scan all scenarios, add the worst violator
to the training set, retrain, repeat until nothing violates.  The number of
selected scenarios is what the scenario certificate consumes.  Squared
margins have zero gradient exactly at zero, so the loop nudges untouched
state margins to a small positive seed before the first retraining;
otherwise the tightenings could never move off the nominal value.  Input
margins are deliberately not seeded and therefore stay at zero.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .mpc_policy import CondensedMPC, ThetaParams
from .plants import make_plant
from .rollout import (
    nominal_loss,
    robust_loss,
    rollout_with_jacobian,
    simulate,
    violation_metrics,
)

PARAM_BOX = 1e3


def step_size(k, c=0.1, zeta=0.6):
    """Diminishing step for iteration k = 1, 2, ..."""
    if k < 1:
        raise DimensionMismatch("iteration count starts at 1")
    return c / k ** zeta


def project_theta(model, theta, box=PARAM_BOX):
    vec = np.clip(theta.pack(), -box, box)
    th = ThetaParams.unpack(model, vec)
    eta_x = np.clip(th.eta_x, -np.sqrt(model.h_x), np.sqrt(model.h_x))
    eta_u = np.clip(th.eta_u, -np.sqrt(model.h_u), np.sqrt(model.h_u))
    return ThetaParams(L_P=th.L_P, L_R=th.L_R, eta_x=eta_x, eta_u=eta_u)


def seed_margins(theta, eta_seed):
    """Replace state margins that are exactly zero with a positive seed.

    Input margins are left alone: shrinking actuator bounds never relieves a
    state-constraint violation, and seeding them just hands the optimizer a
    lever it can only misuse.
    """
    if eta_seed == 0.0:
        return theta
    return ThetaParams(
        L_P=theta.L_P, L_R=theta.L_R,
        eta_x=np.where(theta.eta_x == 0.0, eta_seed, theta.eta_x),
        eta_u=theta.eta_u,
    )


@dataclass(frozen=True)
class TuneResult:
    theta: ThetaParams
    losses: tuple
    iterations: int
    converged: bool


def tune_nominal(model, plant_def, scenarios, theta0=None, *, c1=40.0,
                 step_c=0.1, step_zeta=0.6, max_it=300, tol=1e-7,
                 box=PARAM_BOX, log=None):
    """Minimize tracking cost plus exact violation penalty on given scenarios."""
    theta = theta0 if theta0 is not None else ThetaParams.initial(model)
    theta = project_theta(model, theta, box)
    losses = []
    converged = False
    it = 0
    for it in range(1, max_it + 1):
        policy = CondensedMPC(model, theta)
        loss = 0.0
        grad = np.zeros(theta.pack().size)
        for sc in scenarios:
            plant = make_plant(plant_def, sc.d)
            bundle = rollout_with_jacobian(model, theta, plant, sc, policy=policy)
            value, g = nominal_loss(model, bundle, c1=c1)
            loss += value
            grad += g
        loss /= len(scenarios)
        grad /= len(scenarios)
        losses.append(loss)
        if log is not None and it % 25 == 1:
            log(f"nominal tuning  it {it:4d}  loss {loss:.6f}")
        vec = theta.pack()
        alpha = step_size(it, step_c, step_zeta)
        new_theta = project_theta(model, ThetaParams.unpack(model, vec - alpha * grad),
                                  box)
        delta = float(np.linalg.norm(new_theta.pack() - vec))
        theta = new_theta
        if delta < tol:
            converged = True
            break
    return TuneResult(theta=theta, losses=tuple(losses), iterations=it,
                      converged=converged)


def solve_penalized(model, plant_def, scenarios, theta_init, theta_ref, *,
                    c1=40.0, c2=40.0, max_it=200, step_c=0.1, step_zeta=0.6,
                    box=PARAM_BOX):
    """Run exactly ``max_it`` penalized descent steps on the given scenarios.

    A fixed iteration count (instead of a tolerance) keeps retraining runs
    reproducible: the result is a pure function of the starting point and
    the scenario list, which the support-subsample check relies on.
    """
    theta = project_theta(model, theta_init, box)
    losses = []
    for it in range(1, max_it + 1):
        policy = CondensedMPC(model, theta)
        loss = 0.0
        grad = np.zeros(theta.pack().size)
        for sc in scenarios:
            plant = make_plant(plant_def, sc.d)
            bundle = rollout_with_jacobian(model, theta, plant, sc, policy=policy)
            value, g = robust_loss(model, bundle, theta, theta_ref, c1=c1, c2=c2)
            loss += value
            grad += g
        loss /= len(scenarios)
        grad /= len(scenarios)
        losses.append(loss)
        alpha = step_size(it, step_c, step_zeta)
        theta = project_theta(
            model, ThetaParams.unpack(model, theta.pack() - alpha * grad), box)
    return theta, tuple(losses)


# ---- violation scans (serial or process pool) -------------------------------


def _scan_chunk(payload):
    model, theta, plant_def, chunk = payload
    policy = CondensedMPC(model, theta)
    rows = []
    for sc in chunk:
        plant = make_plant(plant_def, sc.d)
        bundle = simulate(model, theta, plant, sc, policy=policy)
        m = violation_metrics(model, bundle)
        m["id"] = sc.id
        rows.append(m)
    return rows


def scan_violations(model, theta, plant_def, scenarios, executor=None):
    """Violation metrics for every scenario, in input order.

    With an executor the scenarios are scanned in parallel chunks; results
    are collected in submission order, so the outcome is byte-identical to
    the serial scan regardless of worker count.
    """
    if executor is None:
        return _scan_chunk((model, theta, plant_def, list(scenarios)))
    workers = getattr(executor, "_max_workers", 4)
    n_chunks = min(len(scenarios), max(1, workers * 4))
    chunks = [list(scenarios[i::n_chunks]) for i in range(n_chunks)]
    by_id = {}
    payloads = [(model, theta, plant_def, ch) for ch in chunks if ch]
    for rows in executor.map(_scan_chunk, payloads):
        for row in rows:
            by_id[row["id"]] = row
    return [by_id[sc.id] for sc in scenarios]


def verify_on_training(model, theta, plant_def, scenarios, executor=None):
    """Independent feasibility pass over the full scenario set."""
    rows = scan_violations(model, theta, plant_def, scenarios, executor=executor)
    n_bad = sum(1 for r in rows if r["violated"])
    return n_bad == 0, n_bad


# ---- sample selection loop ---------------------------------------------------


@dataclass(frozen=True)
class P2LResult:
    theta: ThetaParams
    selected_ids: tuple
    converged: bool
    history: tuple

    @property
    def k_star(self):
        return len(self.selected_ids)


def _pick_worst(rows):
    # largest total violation wins; exact ties go to the lowest scenario id
    best = None
    for row in rows:
        if not row["violated"]:
            continue
        if best is None or row["total_gamma"] > best["total_gamma"] \
                or (row["total_gamma"] == best["total_gamma"]
                    and row["id"] < best["id"]):
            best = row
    return best


def _write_checkpoint(path, selected, theta, rounds):
    state = {"format": "mpctune-p2l-checkpoint", "version": 1,
             "rounds": rounds, "selected": list(selected),
             "theta": theta.to_dict()}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(state, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _read_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        state = json.load(fh)
    if state.get("format") != "mpctune-p2l-checkpoint":
        raise ConfigError(f"{path} is not a selection checkpoint")
    return state


def pick2learn(model, plant_def, scenarios, theta_ref, *, c1=40.0, c2=40.0,
               max_it=200, step_c=0.1, step_zeta=0.6, eta_seed=0.05,
               box=PARAM_BOX, max_rounds=None, checkpoint_path=None,
               resume=False, executor=None, log=None):
    """Iteratively select violating scenarios and retrain on them.

    Returns a :class:`P2LResult`; ``converged`` means the final parameter
    violates none of the given scenarios, which is exactly the premise the
    scenario certificate needs.  The retrained parameter is a deterministic
    function of the scenario list, so re-running on the selected subset
    alone reproduces the same parameter, selection order included.
    """
    if max_rounds is None:
        max_rounds = 4 * len(scenarios)  # safety valve, not a tuning knob
    by_id = {sc.id: sc for sc in scenarios}
    if len(by_id) != len(scenarios):
        raise DimensionMismatch("scenario ids must be unique")

    selected = []
    rounds = 0
    theta = seed_margins(project_theta(model, theta_ref, box), eta_seed)
    if resume and checkpoint_path is not None and os.path.exists(checkpoint_path):
        state = _read_checkpoint(checkpoint_path)
        missing = [i for i in state["selected"] if i not in by_id]
        if missing:
            raise ConfigError(
                f"checkpoint selects scenarios {missing} not present in the dataset")
        selected = list(state["selected"])
        rounds = int(state["rounds"])
        theta = ThetaParams.from_dict(state["theta"])
        if log is not None:
            log(f"resuming selection after {rounds} rounds, "
                f"{len(selected)} scenarios selected")

    history = []
    converged = False
    while True:
        rows = scan_violations(model, theta, plant_def, scenarios,
                               executor=executor)
        worst = _pick_worst(rows)
        n_bad = sum(1 for r in rows if r["violated"])
        history.append({"round": rounds, "violations": n_bad,
                        "picked": None if worst is None else worst["id"],
                        "worst_gamma": 0.0 if worst is None
                        else worst["total_gamma"]})
        if log is not None:
            log(f"selection round {rounds}: {n_bad} violating scenarios"
                + ("" if worst is None else
                   f", worst id {worst['id']} (gamma {worst['total_gamma']:.4f})"))
        if worst is None:
            converged = True
            break
        if rounds >= max_rounds:
            break
        # a scenario can stay violating after its own retraining round; the
        # training set is a set, so retrain on it again with a fresh step
        # schedule instead of double-counting it
        if worst["id"] not in selected:
            selected.append(worst["id"])
        subset = [by_id[i] for i in selected]
        theta, _ = solve_penalized(model, plant_def, subset, theta, theta_ref,
                                   c1=c1, c2=c2, max_it=max_it, step_c=step_c,
                                   step_zeta=step_zeta, box=box)
        rounds += 1
        if checkpoint_path is not None:
            _write_checkpoint(checkpoint_path, selected, theta, rounds)

    return P2LResult(theta=theta, selected_ids=tuple(selected),
                     converged=converged, history=tuple(history))
