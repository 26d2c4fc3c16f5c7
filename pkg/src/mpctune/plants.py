"""Simulation plants and scenario datasets.

The plants here are what the tuned policy is evaluated against, as opposed to
the linear prediction model inside the controller.  A plant owns its true
parameters (possibly perturbed per scenario) and exposes a deterministic
one-step map plus its Jacobians; additive process noise is applied by the
rollout, not here, so the Jacobians stay exact.

Scenario sampling is counter-based: scenario ``i`` of a dataset drawn with
``seed`` always sees the same random stream regardless of how many scenarios
are drawn in total.  Certificates computed from a dataset stay meaningful
only if the dataset is reproducible, so datasets serialize losslessly
(JSON keeps the shortest round-trip decimal representation of each float).
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, SingularMass

_MIN_DEN = 1e-12


def cartpole_rhs(x, u, m, J, mu, g):
    """Continuous-time dynamics of a cart with an inverted pendulum.

    State is (position, velocity, angle, angular velocity); ``u`` is the
    force on the cart.  The trigonometric terms are windowed to zero once
    the pole passes the horizontal, which keeps the model defined globally
    without affecting behavior in the operating range.
    """
    x = np.asarray(x, dtype=float)
    phi, dphi = x[2], x[3]
    if abs(phi) <= np.pi / 2:
        s, c = np.sin(phi), np.cos(phi)
    else:
        s, c = 0.0, 0.0
    den = m * J - mu ** 2 * c ** 2
    if den <= _MIN_DEN:
        raise SingularMass(f"mass matrix is singular (denominator {den:.3e})")
    thrust = u + mu * dphi ** 2 * s
    ddx = (J * thrust - mu ** 2 * g * s * c) / den
    ddphi = (m * mu * g * s - mu * c * thrust) / den
    return np.array([x[1], ddx, dphi, ddphi])


def cartpole_rhs_jacobians(x, u, m, J, mu, g):
    """Jacobians of :func:`cartpole_rhs` with respect to state and input.

    Inside the trig window ds = cos, dc = -sin; outside, the windowed sine
    and cosine are constant zero, so their derivatives vanish too.
    """
    x = np.asarray(x, dtype=float)
    phi, dphi = x[2], x[3]
    if abs(phi) <= np.pi / 2:
        s, c = np.sin(phi), np.cos(phi)
        ds, dc = c, -s
    else:
        s, c, ds, dc = 0.0, 0.0, 0.0, 0.0
    den = m * J - mu ** 2 * c ** 2
    if den <= _MIN_DEN:
        raise SingularMass(f"mass matrix is singular (denominator {den:.3e})")
    dden = -2.0 * mu ** 2 * c * dc

    thrust = u + mu * dphi ** 2 * s
    num_a = J * thrust - mu ** 2 * g * s * c
    dnum_a_phi = J * mu * dphi ** 2 * ds - mu ** 2 * g * (ds * c + s * dc)
    dnum_a_dphi = 2.0 * J * mu * dphi * s

    num_p = m * mu * g * s - mu * c * thrust
    dnum_p_phi = m * mu * g * ds - mu * dc * thrust - mu * c * (mu * dphi ** 2 * ds)
    dnum_p_dphi = -2.0 * mu ** 2 * dphi * s * c

    ddx_phi = (dnum_a_phi * den - num_a * dden) / den ** 2
    ddx_dphi = dnum_a_dphi / den
    ddphi_phi = (dnum_p_phi * den - num_p * dden) / den ** 2
    ddphi_dphi = dnum_p_dphi / den

    A = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, ddx_phi, ddx_dphi],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, ddphi_phi, ddphi_dphi],
    ])
    B = np.array([[0.0], [J / den], [0.0], [-mu * c / den]])
    return A, B


def rk4_step(f, x, u, dt):
    """Classic fourth-order Runge-Kutta step of ``xdot = f(x, u)``."""
    x = np.asarray(x, dtype=float)
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_jacobians(f, fjac, x, u, dt):
    """Exact Jacobians of :func:`rk4_step` by differentiating each stage."""
    x = np.asarray(x, dtype=float)
    n = x.size
    eye = np.eye(n)

    k1 = f(x, u)
    A1, B1 = fjac(x, u)
    x2 = x + 0.5 * dt * k1
    k2 = f(x2, u)
    A2, B2 = fjac(x2, u)
    x3 = x + 0.5 * dt * k2
    k3 = f(x3, u)
    A3, B3 = fjac(x3, u)
    x4 = x + dt * k3
    A4, B4 = fjac(x4, u)

    dk1x, dk1u = A1, B1
    dk2x = A2 @ (eye + 0.5 * dt * dk1x)
    dk2u = A2 @ (0.5 * dt * dk1u) + B2
    dk3x = A3 @ (eye + 0.5 * dt * dk2x)
    dk3u = A3 @ (0.5 * dt * dk2u) + B3
    dk4x = A4 @ (eye + dt * dk3x)
    dk4u = A4 @ (dt * dk3u) + B4

    dfdx = eye + (dt / 6.0) * (dk1x + 2.0 * dk2x + 2.0 * dk3x + dk4x)
    dfdu = (dt / 6.0) * (dk1u + 2.0 * dk2u + 2.0 * dk3u + dk4u)
    return dfdx, dfdu


class CartPolePlant:
    """Cart-pendulum integrated with RK4 at a fixed step."""

    def __init__(self, m, J, mu, g=9.81, dt=0.05):
        if min(m, J, mu) <= 0:
            raise SingularMass("physical parameters must be positive")
        self.m, self.J, self.mu, self.g, self.dt = float(m), float(J), float(mu), \
            float(g), float(dt)
        self.n_x, self.n_u = 4, 1

    def _rhs(self, x, u):
        return cartpole_rhs(x, u, self.m, self.J, self.mu, self.g)

    def _rhs_jac(self, x, u):
        return cartpole_rhs_jacobians(x, u, self.m, self.J, self.mu, self.g)

    def step(self, x, u):
        return rk4_step(self._rhs, x, float(np.asarray(u).ravel()[0]), self.dt)

    def jacobians(self, x, u):
        return rk4_jacobians(self._rhs, self._rhs_jac, x,
                             float(np.asarray(u).ravel()[0]), self.dt)


class LinearPlant:
    """Discrete-time linear plant; Jacobians are the system matrices."""

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise DimensionMismatch("A must be square")
        if self.B.ndim != 2 or self.B.shape[0] != self.A.shape[0]:
            raise DimensionMismatch("B rows must match A")
        self.n_x, self.n_u = self.A.shape[0], self.B.shape[1]

    def step(self, x, u):
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float).ravel()

    def jacobians(self, x, u):
        return self.A.copy(), self.B.copy()


@dataclass(frozen=True)
class PlantDef:
    """Serializable plant description.

    ``kind`` is "cartpole" (params m, J, mu, g, dt; the parametric
    disturbance d scales m, J, mu multiplicatively as 1 + d_i) or "linear"
    (params A, B; no parametric disturbance).  Keeping this a plain
    (kind, params) pair instead of a closure means scenario workers can
    receive it across process boundaries.
    """

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in ("cartpole", "linear"):
            raise DimensionMismatch(f"unknown plant kind {self.kind!r}")

    def d_dim(self):
        return 3 if self.kind == "cartpole" else 0

    def to_dict(self):
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, data):
        return cls(kind=data["kind"], params=data["params"])


def cartpole_default(m=0.3, J=1.0, mu=0.4, g=9.81, dt=0.05):
    return PlantDef(kind="cartpole",
                    params={"m": m, "J": J, "mu": mu, "g": g, "dt": dt})


def make_plant(plant_def, d=None):
    """Instantiate a plant, applying the parametric disturbance ``d``."""
    d = np.zeros(plant_def.d_dim()) if d is None else np.asarray(d, dtype=float).ravel()
    if d.size != plant_def.d_dim():
        raise DimensionMismatch(
            f"plant kind {plant_def.kind!r} expects {plant_def.d_dim()} "
            f"disturbance entries, got {d.size}")
    p = plant_def.params
    if plant_def.kind == "cartpole":
        return CartPolePlant(m=p["m"] * (1.0 + d[0]), J=p["J"] * (1.0 + d[1]),
                             mu=p["mu"] * (1.0 + d[2]), g=p.get("g", 9.81),
                             dt=p.get("dt", 0.05))
    return LinearPlant(A=p["A"], B=p["B"])


# ---- scenario datasets ------------------------------------------------------


def _box(name, low, high, size=None):
    lo = np.asarray(low, dtype=float).ravel()
    hi = np.asarray(high, dtype=float).ravel()
    if lo.shape != hi.shape:
        raise DimensionMismatch(f"{name} bounds must have equal shapes")
    if size is not None and lo.size != size:
        raise DimensionMismatch(f"{name} bounds must have {size} entries, got {lo.size}")
    if np.any(lo > hi):
        raise DimensionMismatch(f"{name} has lower bound above upper bound")
    return lo, hi


@dataclass(frozen=True)
class ScenarioSpec:
    """Uniform-box description of one uncertainty draw.

    A scenario consists of a parametric disturbance ``d`` held constant over
    the episode, an initial state, and a process-noise sequence of length
    ``T``.  All three are drawn uniformly from the given boxes.
    """

    T: int
    d_low: np.ndarray
    d_high: np.ndarray
    x0_low: np.ndarray
    x0_high: np.ndarray
    w_low: np.ndarray
    w_high: np.ndarray

    def __post_init__(self):
        if int(self.T) < 1:
            raise DimensionMismatch("T must be a positive integer")
        object.__setattr__(self, "T", int(self.T))
        d_lo, d_hi = _box("d", self.d_low, self.d_high)
        x_lo, x_hi = _box("x0", self.x0_low, self.x0_high)
        w_lo, w_hi = _box("w", self.w_low, self.w_high, size=x_lo.size)
        for k, v in (("d_low", d_lo), ("d_high", d_hi), ("x0_low", x_lo),
                     ("x0_high", x_hi), ("w_low", w_lo), ("w_high", w_hi)):
            object.__setattr__(self, k, v)

    @property
    def n_x(self):
        return self.x0_low.size

    def to_dict(self):
        return {"T": self.T,
                "d_low": self.d_low.tolist(), "d_high": self.d_high.tolist(),
                "x0_low": self.x0_low.tolist(), "x0_high": self.x0_high.tolist(),
                "w_low": self.w_low.tolist(), "w_high": self.w_high.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(T=data["T"], d_low=data["d_low"], d_high=data["d_high"],
                   x0_low=data["x0_low"], x0_high=data["x0_high"],
                   w_low=data["w_low"], w_high=data["w_high"])


@dataclass(frozen=True)
class Scenario:
    """One drawn uncertainty realization."""

    id: int
    d: np.ndarray
    x0: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).ravel())
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).ravel())
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2:
            raise DimensionMismatch("w must be a (T, n_x) array")
        object.__setattr__(self, "w", w)


def scenario_rng(seed, scenario_id):
    """Independent stream for one scenario, keyed by (seed, id).

    Counter-based keying means scenario ``i`` is the same draw whether the
    dataset holds 10 scenarios or 10000, which keeps certificates comparable
    across dataset sizes and lets workers draw scenarios independently.
    """
    key = np.array([seed, scenario_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_scenario(spec, seed, scenario_id):
    rng = scenario_rng(seed, scenario_id)
    # draw order is part of the format: d, then x0, then the noise rows
    d = rng.uniform(spec.d_low, spec.d_high) if spec.d_low.size else np.zeros(0)
    x0 = rng.uniform(spec.x0_low, spec.x0_high)
    w = rng.uniform(spec.w_low, spec.w_high, size=(spec.T, spec.n_x))
    return Scenario(id=int(scenario_id), d=d, x0=x0, w=w)


def sample_dataset(spec, count, seed):
    if count < 1:
        raise DimensionMismatch("count must be positive")
    return [sample_scenario(spec, seed, i) for i in range(count)]


def save_dataset(path, scenarios, spec, seed, extra=None):
    """Write a dataset as JSON lines; floats round-trip exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"format": "mpctune-dataset", "version": 1,
                  "seed": int(seed), "count": len(scenarios),
                  "spec": spec.to_dict()}
        if extra:
            header.update(extra)
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sc in scenarios:
            row = {"id": sc.id, "d": sc.d.tolist(), "x0": sc.x0.tolist(),
                   "w": sc.w.tolist()}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "mpctune-dataset":
            raise DimensionMismatch(f"{path} is not a dataset file")
        spec = ScenarioSpec.from_dict(header["spec"])
        scenarios = []
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            scenarios.append(Scenario(id=row["id"], d=row["d"], x0=row["x0"],
                                      w=row["w"]))
    if len(scenarios) != header["count"]:
        raise DimensionMismatch(
            f"dataset {path} truncated: header says {header['count']} "
            f"scenarios, found {len(scenarios)}")
    return scenarios, spec, int(header["seed"])


def dataset_digest(scenarios):
    """Order-sensitive content hash, for stamping artifacts."""
    import hashlib

    h = hashlib.sha256()
    for sc in scenarios:
        h.update(str(sc.id).encode())
        for arr in (sc.d, sc.x0, sc.w):
            h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
