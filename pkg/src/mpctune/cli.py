"""Experiment front end: one config file in, datasets and tables out.

Every artifact a run produces lands in the output directory and embeds the
sha256 of the config file plus the seed, so a result can always be traced
back to its exact inputs.  For a fixed config and seed the numeric
artifacts are byte-identical no matter how many worker processes are used;
the certificate carries the only timestamp.
"""

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from types import SimpleNamespace

import numpy as np
import yaml

from .errors import (ConfigError, DimensionMismatch, Infeasible,
                     MaxIterationsExceeded, NotStronglyConvex, SingularMass,
                     SingularSensitivity, TrainingSetViolation)
from .mpc_policy import CondensedMPC, MPCModel, ThetaParams
from .plants import (PlantDef, Scenario, ScenarioSpec, dataset_digest,
                     load_dataset, make_plant, sample_dataset, save_dataset)
from .rollout import simulate, trajectory_to_csv, violation_metrics
from .scenario_cert import (Certificate, certify, epsilon_of_k,
                            validate_empirical)
from .tuning import pick2learn, tune_nominal, verify_on_training

_MISSING = object()


# ---- config access -----------------------------------------------------------


def load_config(path):
    """Parse a config file and return it together with its sha256."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        cfg = yaml.safe_load(raw.decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a key-value tree")
    return cfg, hashlib.sha256(raw).hexdigest()


def _walk(cfg, path):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return _MISSING
        node = node[part]
    return node


def _fetch(cfg, path, default):
    # explicit null counts as absent when the key is optional
    value = _walk(cfg, path)
    if value is _MISSING:
        if default is _MISSING:
            raise ConfigError(f"missing required config key '{path}'")
        return _MISSING
    if value is None and default is not _MISSING:
        return _MISSING
    return value


def cfg_int(cfg, path, default=_MISSING, minimum=None):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"config key '{path}' must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"config key '{path}' must be >= {minimum}, got {value}")
    return int(value)


def cfg_float(cfg, path, default=_MISSING, positive=False, nonnegative=False):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    if isinstance(value, str):
        # YAML reads unquoted 1e-6 as a string; accept it as a number anyway
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"config key '{path}' must be a number, got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"config key '{path}' must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ConfigError(f"config key '{path}' must be finite")
    if positive and value <= 0:
        raise ConfigError(f"config key '{path}' must be positive, got {value}")
    if nonnegative and value < 0:
        raise ConfigError(f"config key '{path}' must not be negative, got {value}")
    return value


def cfg_bool(cfg, path, default=_MISSING):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    if not isinstance(value, bool):
        raise ConfigError(f"config key '{path}' must be true or false, got {value!r}")
    return value


def cfg_str(cfg, path, default=_MISSING, choices=None):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    if not isinstance(value, str):
        raise ConfigError(f"config key '{path}' must be a string, got {value!r}")
    if choices is not None and value not in choices:
        raise ConfigError(
            f"config key '{path}' must be one of {sorted(choices)}, got {value!r}")
    return value


def cfg_vector(cfg, path, default=_MISSING, size=None):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    try:
        vec = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{path}' must be a list of numbers")
    if vec.ndim != 1:
        raise ConfigError(f"config key '{path}' must be a flat list of numbers")
    if size is not None and vec.size != size:
        raise ConfigError(
            f"config key '{path}' must have {size} entries, got {vec.size}")
    return vec


def cfg_matrix(cfg, path, default=_MISSING):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    try:
        mat = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{path}' must be a list of equal-length rows")
    if mat.ndim != 2:
        raise ConfigError(f"config key '{path}' must be a list of equal-length rows")
    return mat


def cfg_int_list(cfg, path, default=_MISSING):
    value = _fetch(cfg, path, default)
    if value is _MISSING:
        return default
    if not isinstance(value, list) \
            or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise ConfigError(f"config key '{path}' must be a list of integers")
    return list(value)


# ---- experiment construction --------------------------------------------------


def build_plant_def(cfg):
    kind = cfg_str(cfg, "plant.kind", choices=("cartpole", "linear"))
    if kind == "cartpole":
        params = {"m": cfg_float(cfg, "plant.cart_mass_kg", positive=True),
                  "J": cfg_float(cfg, "plant.pole_inertia_kg_m2", positive=True),
                  "mu": cfg_float(cfg, "plant.coupling_kg_m", positive=True),
                  "g": cfg_float(cfg, "plant.gravity_m_per_s2", 9.81, positive=True),
                  "dt": cfg_float(cfg, "plant.dt_seconds", positive=True)}
        return PlantDef(kind="cartpole", params=params)
    A = cfg_matrix(cfg, "plant.a_matrix")
    B = cfg_matrix(cfg, "plant.b_matrix")
    if A.shape[0] != A.shape[1]:
        raise ConfigError("config key 'plant.a_matrix' must be square")
    if B.shape[0] != A.shape[0]:
        raise ConfigError("config key 'plant.b_matrix' must have as many rows "
                          "as 'plant.a_matrix'")
    return PlantDef(kind="linear", params={"A": A.tolist(), "B": B.tolist()})


def state_names(plant_def, n_x):
    if plant_def.kind == "cartpole":
        return ["position_m", "speed_m_per_s", "angle_rad",
                "angular_rate_rad_per_s"]
    return [f"x{i}" for i in range(n_x)]


def build_model(cfg, plant_def):
    """Assemble the prediction model: plant linearized at the origin."""
    N = cfg_int(cfg, "mpc.horizon_steps", minimum=1)
    plant = make_plant(plant_def)
    A, B = plant.jacobians(np.zeros(plant.n_x), np.zeros(plant.n_u))
    n_x, n_u = plant.n_x, plant.n_u

    weights = cfg_vector(cfg, "mpc.state_weights", default=None, size=n_x)
    weight_matrix = cfg_matrix(cfg, "mpc.state_weight_matrix", default=None)
    if (weights is None) == (weight_matrix is None):
        raise ConfigError("give exactly one of 'mpc.state_weights' and "
                          "'mpc.state_weight_matrix'")
    Q_x = np.diag(weights) if weights is not None else weight_matrix

    if plant_def.kind == "cartpole":
        ang = cfg_float(cfg, "mpc.angle_limit_rad", positive=True)
        spd = cfg_float(cfg, "mpc.cart_speed_limit_m_per_s", positive=True)
        lim = cfg_float(cfg, "mpc.input_limit_newton", positive=True)
        H_x = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, -1.0, 0.0],
                        [0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]])
        h_x = np.array([ang, ang, spd, spd])
        H_u = np.array([[1.0], [-1.0]])
        h_u = np.array([lim, lim])
    else:
        H_x = cfg_matrix(cfg, "mpc.state_constraint_matrix")
        h_x = cfg_vector(cfg, "mpc.state_constraint_limits", size=H_x.shape[0])
        H_u = cfg_matrix(cfg, "mpc.input_constraint_matrix")
        h_u = cfg_vector(cfg, "mpc.input_constraint_limits", size=H_u.shape[0])
        if H_x.shape[1] != n_x:
            raise ConfigError("config key 'mpc.state_constraint_matrix' must "
                              f"have {n_x} columns, got {H_x.shape[1]}")
        if H_u.shape[1] != n_u:
            raise ConfigError("config key 'mpc.input_constraint_matrix' must "
                              f"have {n_u} columns, got {H_u.shape[1]}")

    try:
        return MPCModel(A=A, B=B, H_x=H_x, h_x=h_x, H_u=H_u, h_u=h_u, Q_x=Q_x,
                        N=N,
                        soft_l1=cfg_float(cfg, "mpc.slack_weight_l1", 1e3,
                                          positive=True),
                        soft_l2=cfg_float(cfg, "mpc.slack_weight_l2", 1e-2,
                                          positive=True),
                        tighten_terminal=cfg_bool(cfg, "mpc.tighten_terminal",
                                                  True))
    except (DimensionMismatch, NotStronglyConvex, ValueError) as exc:
        raise ConfigError(f"invalid 'mpc' section: {exc}")


def build_spec(cfg, plant_def):
    T = cfg_int(cfg, "scenarios.horizon_steps", minimum=1)
    if plant_def.kind == "cartpole":
        spread = cfg_float(cfg, "scenarios.parameter_spread_frac", nonnegative=True)
        pos = cfg_float(cfg, "scenarios.start_position_m")
        sv = cfg_float(cfg, "scenarios.start_speed_spread_m_per_s",
                       nonnegative=True)
        sw = cfg_float(cfg, "scenarios.start_angular_rate_spread_rad_per_s",
                       nonnegative=True)
        wv = cfg_float(cfg, "scenarios.speed_noise_m_per_s", nonnegative=True)
        ww = cfg_float(cfg, "scenarios.angular_rate_noise_rad_per_s",
                       nonnegative=True)
        if spread >= 1.0:
            raise ConfigError("config key 'scenarios.parameter_spread_frac' "
                              "must stay below 1 to keep masses positive")
        return ScenarioSpec(T=T,
                            d_low=[-spread] * 3, d_high=[spread] * 3,
                            x0_low=[pos, -sv, 0.0, -sw],
                            x0_high=[pos, sv, 0.0, sw],
                            w_low=[0.0, -wv, 0.0, -ww],
                            w_high=[0.0, wv, 0.0, ww])
    n_x = len(plant_def.params["A"])
    return ScenarioSpec(T=T, d_low=[], d_high=[],
                        x0_low=cfg_vector(cfg, "scenarios.start_low", size=n_x),
                        x0_high=cfg_vector(cfg, "scenarios.start_high", size=n_x),
                        w_low=cfg_vector(cfg, "scenarios.noise_low", size=n_x),
                        w_high=cfg_vector(cfg, "scenarios.noise_high", size=n_x))


def nominal_scenario(cfg, spec, plant_def):
    """Disturbance-free scenario used for nominal tuning; id -1 by convention."""
    x0 = cfg_vector(cfg, "nominal.start_state", default=None, size=spec.n_x)
    if x0 is None:
        x0 = 0.5 * (spec.x0_low + spec.x0_high)
    return Scenario(id=-1, d=np.zeros(plant_def.d_dim()), x0=x0,
                    w=np.zeros((spec.T, spec.n_x)))


# ---- artifacts ----------------------------------------------------------------


def _paths(outdir):
    return SimpleNamespace(
        out=outdir,
        dataset=os.path.join(outdir, "scenarios.jsonl"),
        theta_nominal=os.path.join(outdir, "theta_nominal.json"),
        theta_robust=os.path.join(outdir, "theta_robust.json"),
        checkpoint=os.path.join(outdir, "selection_checkpoint.json"),
        certificate=os.path.join(outdir, "certificate.txt"),
        table=os.path.join(outdir, "table_violation.csv"),
        quantiles=os.path.join(outdir, "trajectory_quantiles.csv"),
        validation=os.path.join(outdir, "validation.json"),
        trajectory_nominal=os.path.join(outdir, "trajectory_nominal.csv"),
        trajectory=os.path.join(outdir, "trajectory.csv"))


def _stamp_line(sha, seed):
    return f"# mpctune config_sha256={sha} seed={seed}"


def _write_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def _read_json(path, expected_format):
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact {path}; run the earlier stages first")
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if data.get("format") != expected_format:
        raise ConfigError(f"{path} is not a {expected_format} file")
    return data


def _load_theta(path, kind=None):
    data = _read_json(path, "mpctune-theta")
    if kind is not None and data.get("kind") != kind:
        raise ConfigError(f"{path} holds a {data.get('kind')!r} parameter, "
                          f"expected {kind!r}")
    return ThetaParams.from_dict(data["theta"]), data


def write_violation_table(path, rows, sha, seed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_stamp_line(sha, seed) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["policy", "avg_cost", "ratio", "total", "relative"])
        for name, summary in rows:
            writer.writerow([name] + [repr(summary[k]) for k in
                                      ("avg_cost", "ratio", "total", "relative")])


def write_trajectory_quantiles(path, entries, sha, seed):
    # entries: (policy, coordinate name, (n_scenarios, T+1) value array)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_stamp_line(sha, seed) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["t", "coord", "mean", "lo", "hi"])
        for policy, name, arr in entries:
            mean, lo, hi = arr.mean(axis=0), arr.min(axis=0), arr.max(axis=0)
            for t in range(arr.shape[1]):
                writer.writerow([t, f"{policy}:{name}", repr(float(mean[t])),
                                 repr(float(lo[t])), repr(float(hi[t]))])


# ---- scenario evaluation -------------------------------------------------------


def _eval_chunk(payload):
    model, theta, plant_def, chunk = payload
    policy = CondensedMPC(model, theta)
    rows = []
    for sc in chunk:
        plant = make_plant(plant_def, sc.d)
        bundle = simulate(model, theta, plant, sc, policy=policy)
        met = violation_metrics(model, bundle)
        met["id"] = sc.id
        rows.append((sc.id, met, bundle.states, float(np.sum(bundle.stage_costs))))
    return rows


def evaluate_policy(model, theta, plant_def, scenarios, executor=None):
    """Closed-loop metrics, state trajectories, and costs in input order."""
    scenarios = list(scenarios)
    if executor is None:
        rows = _eval_chunk((model, theta, plant_def, scenarios))
    else:
        workers = getattr(executor, "_max_workers", 4)
        n_chunks = min(len(scenarios), max(1, workers * 4))
        chunks = [scenarios[i::n_chunks] for i in range(n_chunks)]
        collected = {}
        payloads = [(model, theta, plant_def, ch) for ch in chunks if ch]
        for part in executor.map(_eval_chunk, payloads):
            for item in part:
                collected[item[0]] = item
        rows = [collected[sc.id] for sc in scenarios]
    metrics = [r[1] for r in rows]
    states = np.stack([r[2] for r in rows])
    costs = np.array([r[3] for r in rows])
    return metrics, states, costs


def _policy_summary(metrics, costs):
    flags = [m["violated"] for m in metrics]
    n = len(metrics)
    # max_relative is a signed margin ratio; only the excess counts here
    return {"count": n,
            "violations": int(sum(flags)),
            "ratio": float(sum(flags)) / n,
            "avg_cost": float(np.mean(costs)),
            "total": float(np.mean([m["total_gamma"] for m in metrics])),
            "relative": float(np.mean([max(0.0, m["max_relative"])
                                       for m in metrics]))}


@contextmanager
def _maybe_pool(threads):
    if threads and threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            yield ex
    else:
        yield None


# ---- subcommands ---------------------------------------------------------------


def _setup(args):
    if args.config is None:
        raise ConfigError("--config is required for this command")
    cfg, sha = load_config(args.config)
    seed = args.seed if args.seed is not None \
        else cfg_int(cfg, "experiment.seed", minimum=0)
    os.makedirs(args.out, exist_ok=True)
    return cfg, sha, int(seed), _paths(args.out)


def ensure_dataset(cfg, sha, seed, paths, spec):
    """Load the training dataset, sampling and persisting it first if absent."""
    count = cfg_int(cfg, "scenarios.count", minimum=1)
    if os.path.exists(paths.dataset):
        scenarios, file_spec, file_seed = load_dataset(paths.dataset)
        if file_seed != seed or len(scenarios) != count:
            raise ConfigError(
                f"dataset {paths.dataset} holds {len(scenarios)} scenarios for "
                f"seed {file_seed}, but the config asks for {count} with seed "
                f"{seed}; rerun sample-data")
        if file_spec.to_dict() != spec.to_dict():
            raise ConfigError(f"dataset {paths.dataset} does not match the "
                              "scenario boxes in the config; rerun sample-data")
        return scenarios
    scenarios = sample_dataset(spec, count, seed)
    save_dataset(paths.dataset, scenarios, spec, seed,
                 extra={"config_sha256": sha})
    return scenarios


def cmd_sample(args):
    cfg, sha, seed, paths = _setup(args)
    plant_def = build_plant_def(cfg)
    spec = build_spec(cfg, plant_def)
    count = cfg_int(cfg, "scenarios.count", minimum=1)
    scenarios = sample_dataset(spec, count, seed)
    save_dataset(paths.dataset, scenarios, spec, seed,
                 extra={"config_sha256": sha})
    print(f"wrote {paths.dataset}: {count} scenarios, "
          f"digest {dataset_digest(scenarios)[:16]}...")
    return 0


def _run_nominal(cfg, sha, seed, paths):
    plant_def = build_plant_def(cfg)
    model = build_model(cfg, plant_def)
    spec = build_spec(cfg, plant_def)
    sc0 = nominal_scenario(cfg, spec, plant_def)
    res = tune_nominal(
        model, plant_def, [sc0],
        c1=cfg_float(cfg, "nominal.penalty_weight", 40.0, positive=True),
        step_c=cfg_float(cfg, "nominal.step_scale", 0.1, positive=True),
        step_zeta=cfg_float(cfg, "nominal.step_decay", 0.6, positive=True),
        max_it=cfg_int(cfg, "nominal.max_iterations", 300, minimum=1),
        tol=cfg_float(cfg, "nominal.tolerance", 1e-7, positive=True),
        log=print)
    _write_json(paths.theta_nominal,
                {"format": "mpctune-theta", "version": 1, "kind": "nominal",
                 "config_sha256": sha, "seed": seed,
                 "theta": res.theta.to_dict(),
                 "iterations": res.iterations, "converged": res.converged,
                 "loss_first": res.losses[0], "loss_last": res.losses[-1]})
    plant = make_plant(plant_def, sc0.d)
    bundle = simulate(model, res.theta, plant, sc0)
    trajectory_to_csv(paths.trajectory_nominal, bundle,
                      preamble=[_stamp_line(sha, seed)])
    return model, plant_def, spec, res


def cmd_tune_nominal(args):
    cfg, sha, seed, paths = _setup(args)
    _, _, _, res = _run_nominal(cfg, sha, seed, paths)
    tail = "converged" if res.converged else f"stopped at {res.iterations} iterations"
    print(f"nominal loss {res.losses[0]:.6f} -> {res.losses[-1]:.6f} ({tail})")
    print(f"wrote {paths.theta_nominal} and {paths.trajectory_nominal}")
    return 0


def cmd_tune_robust(args):
    cfg, sha, seed, paths = _setup(args)
    plant_def = build_plant_def(cfg)
    model = build_model(cfg, plant_def)
    spec = build_spec(cfg, plant_def)
    scenarios = ensure_dataset(cfg, sha, seed, paths, spec)
    if os.path.exists(paths.theta_nominal):
        theta_star, _ = _load_theta(paths.theta_nominal, kind="nominal")
    else:
        print("no nominal parameter on disk, tuning it first")
        _, _, _, res = _run_nominal(cfg, sha, seed, paths)
        theta_star = res.theta
    max_rounds = cfg_int(cfg, "robust.max_rounds", default=None, minimum=1)
    with _maybe_pool(args.threads) as ex:
        res = pick2learn(
            model, plant_def, scenarios, theta_star,
            c1=cfg_float(cfg, "robust.penalty_weight", 40.0, positive=True),
            c2=cfg_float(cfg, "robust.quadratic_weight", 40.0, nonnegative=True),
            max_it=cfg_int(cfg, "robust.max_iterations", 200, minimum=1),
            step_c=cfg_float(cfg, "robust.step_scale", 0.1, positive=True),
            step_zeta=cfg_float(cfg, "robust.step_decay", 0.6, positive=True),
            eta_seed=cfg_float(cfg, "robust.margin_seed", 0.05, nonnegative=True),
            max_rounds=max_rounds, checkpoint_path=paths.checkpoint,
            resume=args.resume, executor=ex, log=print)
    _write_json(paths.theta_robust,
                {"format": "mpctune-theta", "version": 1, "kind": "robust",
                 "config_sha256": sha, "seed": seed,
                 "theta": res.theta.to_dict(),
                 "selected_ids": list(res.selected_ids),
                 "k_star": res.k_star, "converged": res.converged,
                 "rounds": len(res.history), "history": list(res.history),
                 "dataset_sha256": dataset_digest(scenarios)})
    print(f"selected {res.k_star} of {len(scenarios)} scenarios: "
          f"{list(res.selected_ids)}")
    if not res.converged:
        print("warning: selection stopped at the round limit with violations "
              "remaining; certify will refuse this parameter", file=sys.stderr)
    print(f"wrote {paths.theta_robust}")
    return 0


def cmd_certify(args):
    if args.k is not None or args.m is not None:
        # calculator mode: no config, just evaluate the bound
        if args.k is None or args.m is None:
            raise ConfigError("--k and --m must be given together")
        beta = 1e-6 if args.beta is None else args.beta
        eps = epsilon_of_k(args.k, args.m, beta)
        print(f"epsilon_of_k(k={args.k}, M={args.m}, beta={beta!r}) "
              f"= {eps:.6g}  (exact {eps!r})")
        return 0
    cfg, sha, seed, paths = _setup(args)
    plant_def = build_plant_def(cfg)
    model = build_model(cfg, plant_def)
    spec = build_spec(cfg, plant_def)
    scenarios = ensure_dataset(cfg, sha, seed, paths, spec)
    theta, meta = _load_theta(paths.theta_robust, kind="robust")
    digest = dataset_digest(scenarios)
    if meta.get("dataset_sha256") and meta["dataset_sha256"] != digest:
        raise ConfigError("training dataset changed since tune-robust; "
                          "rerun tune-robust")
    with _maybe_pool(args.threads) as ex:
        ok, n_bad = verify_on_training(model, theta, plant_def, scenarios,
                                       executor=ex)
    if not ok:
        print(f"{n_bad} of {len(scenarios)} training scenarios still violated",
              file=sys.stderr)
    beta = cfg_float(cfg, "experiment.beta", positive=True)
    cert = certify(meta["k_star"], len(scenarios), beta, ok,
                   dataset_digest=digest)
    with open(paths.certificate, "w", encoding="utf-8") as fh:
        fh.write(cert.to_text())
        fh.write(f"config sha256: {sha}\nseed: {seed}\n")
    print(f"certificate: k*={cert.k_star}, M={cert.M}, beta={cert.beta!r}, "
          f"epsilon={cert.epsilon:.6g}")
    print(f"wrote {paths.certificate}")
    return 0


def cmd_validate(args):
    cfg, sha, seed, paths = _setup(args)
    plant_def = build_plant_def(cfg)
    model = build_model(cfg, plant_def)
    spec = build_spec(cfg, plant_def)
    theta_nom, _ = _load_theta(paths.theta_nominal, kind="nominal")
    theta_rob, meta_rob = _load_theta(paths.theta_robust, kind="robust")

    if args.on_training:
        scenarios, _, _ = load_dataset(paths.dataset)
        dataset_label, fresh_seed = "training", None
    else:
        count = cfg_int(cfg, "validation.count", 200, minimum=1)
        offset = cfg_int(cfg, "validation.seed_offset", 1, minimum=1)
        fresh_seed = seed + offset
        scenarios = sample_dataset(spec, count, fresh_seed)
        dataset_label = "fresh"

    with _maybe_pool(args.threads) as ex:
        met_rob, states_rob, costs_rob = evaluate_policy(
            model, theta_rob, plant_def, scenarios, executor=ex)
        met_nom, states_nom, costs_nom = evaluate_policy(
            model, theta_nom, plant_def, scenarios, executor=ex)

    summaries = [("robust", _policy_summary(met_rob, costs_rob)),
                 ("nominal", _policy_summary(met_nom, costs_nom))]
    write_violation_table(paths.table, summaries, sha, seed)

    names = state_names(plant_def, spec.n_x)
    coords = cfg_int_list(cfg, "validation.track_coords",
                          default=list(range(spec.n_x)))
    bad = [c for c in coords if not 0 <= c < spec.n_x]
    if bad:
        raise ConfigError(f"config key 'validation.track_coords' has "
                          f"out-of-range entries {bad}")
    entries = []
    for policy, states in (("robust", states_rob), ("nominal", states_nom)):
        for c in coords:
            entries.append((policy, names[c], states[:, :, c]))
    write_trajectory_quantiles(paths.quantiles, entries, sha, seed)

    flags = [m["violated"] for m in met_rob]
    if os.path.exists(paths.certificate):
        with open(paths.certificate, "r", encoding="utf-8") as fh:
            cert = Certificate.from_text(fh.read())
        eps_source = "certificate"
    else:
        beta = cfg_float(cfg, "experiment.beta", positive=True)
        M = cfg_int(cfg, "scenarios.count", minimum=1)
        cert = Certificate(M=M, k_star=meta_rob["k_star"], beta=beta,
                           epsilon=epsilon_of_k(meta_rob["k_star"], M, beta),
                           dataset_digest="", generated="")
        eps_source = "computed"
    empirical = validate_empirical(cert, flags)

    _write_json(paths.validation,
                {"format": "mpctune-validation", "version": 1,
                 "config_sha256": sha, "seed": seed,
                 "dataset": dataset_label, "fresh_seed": fresh_seed,
                 "count": len(scenarios), "k_star": cert.k_star,
                 "epsilon": cert.epsilon, "epsilon_source": eps_source,
                 "empirical": empirical,
                 "policies": {name: summary for name, summary in summaries}})
    for name, summary in summaries:
        print(f"{name:8s} avg cost {summary['avg_cost']:.3f}  violation ratio "
              f"{summary['ratio']:.3f}  total {summary['total']:.4f}  "
              f"relative {summary['relative']:.4f}")
    verdict = "within" if empirical["within_bound"] else "ABOVE"
    print(f"robust violation rate {empirical['violation_rate']:.4f} on "
          f"{dataset_label} data is {verdict} the certified bound "
          f"{cert.epsilon:.6g}")
    print(f"wrote {paths.table}, {paths.quantiles}, {paths.validation}")
    return 0


def cmd_simulate(args):
    cfg, sha, seed, paths = _setup(args)
    plant_def = build_plant_def(cfg)
    model = build_model(cfg, plant_def)
    spec = build_spec(cfg, plant_def)
    if args.theta is not None:
        theta, _ = _load_theta(args.theta)
        source = args.theta
    elif os.path.exists(paths.theta_robust):
        theta, _ = _load_theta(paths.theta_robust)
        source = paths.theta_robust
    elif os.path.exists(paths.theta_nominal):
        theta, _ = _load_theta(paths.theta_nominal)
        source = paths.theta_nominal
    else:
        theta, source = ThetaParams.initial(model), "untuned initialization"
    print(f"simulating with parameter from {source}")

    if args.scenario_id:
        dataset, _, _ = load_dataset(paths.dataset)
        by_id = {sc.id: sc for sc in dataset}
        missing = [i for i in args.scenario_id if i not in by_id]
        if missing:
            raise ConfigError(f"scenario ids {missing} not in {paths.dataset}")
        runs = [(by_id[i],
                 os.path.join(paths.out, f"trajectory_scenario_{i}.csv"))
                for i in args.scenario_id]
    else:
        runs = [(nominal_scenario(cfg, spec, plant_def), paths.trajectory)]

    for sc, out_path in runs:
        plant = make_plant(plant_def, sc.d)
        bundle = simulate(model, theta, plant, sc)
        trajectory_to_csv(out_path, bundle, preamble=[_stamp_line(sha, seed)])
        met = violation_metrics(model, bundle)
        cost = float(np.sum(bundle.stage_costs))
        print(f"scenario {sc.id}: cost {cost:.3f}, "
              f"{met['violated_steps']} violating steps "
              f"(total {met['total_gamma']:.4f}) -> {out_path}")
    return 0


def cmd_pipeline(args):
    stages = [("sample-data", cmd_sample), ("tune-nominal", cmd_tune_nominal),
              ("tune-robust", cmd_tune_robust), ("certify", cmd_certify),
              ("validate", cmd_validate)]
    for name, fn in stages:
        print(f"--- {name} ---")
        try:
            code = fn(args)
        except Exception as exc:
            print(f"pipeline halted at stage '{name}': {exc}", file=sys.stderr)
            raise
        if code:
            print(f"pipeline halted at stage '{name}'", file=sys.stderr)
            return code
    return 0


# ---- entry point ---------------------------------------------------------------


_OUTPUT_HELP = """\
output files (every file embeds the config sha256 and the seed):
  scenarios.jsonl            one JSON header line, then one scenario per line
  theta_nominal.json         nominally tuned parameter and loss trace summary
  theta_robust.json          robust parameter, selected scenario ids, rounds
  selection_checkpoint.json  resumable selection state (tune-robust --resume)
  certificate.txt            k*, M, beta, epsilon, dataset digest, timestamp
  table_violation.csv        policy,avg_cost,ratio,total,relative
                               avg_cost  mean closed-loop tracking cost
                               ratio     fraction of scenarios with a violation
                               total     mean summed violation magnitude
                               relative  mean worst violation relative to bound
  trajectory_quantiles.csv   t,coord,mean,lo,hi; coord is "<policy>:<state>",
                             lo/hi are min/max over scenarios at each step
  trajectory*.csv            t,x*,u*,gamma for one closed-loop run
  validation.json            empirical violation rate vs the certified bound
"""


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (YAML tree)")
    common.add_argument("--seed", type=int, default=None,
                        help="override experiment.seed from the config")
    common.add_argument("--out", default="mpctune_out",
                        help="output directory (default: %(default)s)")
    common.add_argument("--threads", type=int,
                        default=int(os.environ.get("MPCTUNE_THREADS", "1")),
                        help="worker processes for scenario evaluation "
                             "(default: %(default)s; env MPCTUNE_THREADS)")

    parser = argparse.ArgumentParser(
        prog="mpctune",
        description="Tune soft-constrained MPC parameters on sampled "
                    "scenarios and certify the closed-loop violation "
                    "probability.",
        epilog=_OUTPUT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    def add(name, fn, help_text, epilog=None):
        sp = sub.add_parser(name, parents=[common], help=help_text,
                            description=help_text, epilog=epilog,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=fn)
        return sp

    add("sample-data", cmd_sample,
        "draw the training scenarios and write scenarios.jsonl")
    add("tune-nominal", cmd_tune_nominal,
        "minimize the nominal tracking loss; writes theta_nominal.json and "
        "the noise-free closed-loop trajectory")
    sp = add("tune-robust", cmd_tune_robust,
             "select violating scenarios and retrain until the training set "
             "is satisfied; writes theta_robust.json")
    sp.add_argument("--resume", action="store_true",
                    help="continue from selection_checkpoint.json")
    sp = add("certify", cmd_certify,
             "verify training feasibility and write certificate.txt; with "
             "--k/--m it just prints the bound for those numbers")
    sp.add_argument("--k", type=int, help="support subsample size")
    sp.add_argument("--m", type=int, help="training scenario count")
    sp.add_argument("--beta", type=float,
                    help="confidence parameter (default 1e-6)")
    sp = add("validate", cmd_validate,
             "evaluate both tuned parameters on fresh scenarios and write "
             "table_violation.csv and trajectory_quantiles.csv",
             epilog=_OUTPUT_HELP)
    sp.add_argument("--on-training", dest="on_training", action="store_true",
                    help="evaluate on the training dataset instead of fresh "
                         "draws")
    sp = add("simulate", cmd_simulate,
             "roll out one closed loop and write a trajectory CSV")
    sp.add_argument("--theta", help="parameter artifact to simulate with "
                                    "(default: robust, then nominal, then "
                                    "untuned)")
    sp.add_argument("--scenario-id", dest="scenario_id", type=int, nargs="*",
                    help="dataset scenario ids to run (default: the "
                         "disturbance-free nominal scenario)")
    sp = add("pipeline", cmd_pipeline,
             "sample-data, tune-nominal, tune-robust, certify, and validate "
             "in one go", epilog=_OUTPUT_HELP)
    sp.add_argument("--resume", action="store_true",
                    help="let tune-robust continue from its checkpoint")
    sp.set_defaults(k=None, m=None, beta=None, on_training=False)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingSetViolation as exc:
        print(f"certification refused: {exc}", file=sys.stderr)
        return 4
    except (DimensionMismatch, NotStronglyConvex, Infeasible,
            MaxIterationsExceeded, SingularSensitivity, SingularMass) as exc:
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
