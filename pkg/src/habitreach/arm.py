"""Planar two-joint, six-muscle arm driven by neural excitation.

Joint angles follow the usual robotics convention: ``q1`` is the shoulder
angle measured from the +x axis of the shoulder frame, ``q2`` the elbow angle
relative to the upper arm.  Gravity, when nonzero, acts along -y.

Every state-space function works on arrays with an optional leading batch
axis, so many excitation profiles can be integrated in one pass.  The scalar
operations (``muscle_force``, ``dynamics_rhs``, ``step``, ...) are thin
wrappers around the same batched kernels.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DynamicsError, SchemaError

MUSCLE_NAMES = ("BIClong", "BICshort", "BRA", "TRIlat", "TRImed", "TRIlong")
N_MUSCLES = len(MUSCLE_NAMES)
N_JOINTS = 2

# velocity normalisation of the force-velocity curve (m/s)
V_SCALE = 2.5


# ---------------------------------------------------------------------------
# parameter types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MuscleParams:
    name: str
    F0: float
    l0: float
    tau_act: float
    tau_deact: float
    moment_arms: tuple[float, float]
    rest_length: float

    def __post_init__(self):
        object.__setattr__(self, "moment_arms", tuple(float(r) for r in self.moment_arms))
        if len(self.moment_arms) != N_JOINTS:
            raise ValueError(f"{self.name}: need {N_JOINTS} moment arms")
        if not (self.F0 > 0 and self.l0 > 0):
            raise ValueError(f"{self.name}: F0 and l0 must be positive")
        # the linear length map is only an extrapolation away from the working
        # range, so rest_length may be negative; lm <= 0 is caught at run time
        if not np.isfinite(self.rest_length):
            raise ValueError(f"{self.name}: rest_length must be finite")
        if not 0 < self.tau_act <= self.tau_deact:
            raise ValueError(f"{self.name}: need 0 < tau_act <= tau_deact")
        if all(r == 0.0 for r in self.moment_arms):
            raise ValueError(f"{self.name}: muscle spans no joint")


@dataclass(frozen=True)
class ArmModel:
    """Immutable physical description of the arm plus integrator settings."""

    link_lengths: tuple[float, float]
    link_masses: tuple[float, float]
    link_com_offsets: tuple[float, float]
    link_inertias: tuple[float, float]
    joint_damping: tuple[float, float]
    gravity: float
    muscles: tuple[MuscleParams, ...]
    integrator_dt: float
    movement_duration: float
    joint_limits: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        for name in ("link_lengths", "link_masses", "link_com_offsets",
                     "link_inertias", "joint_damping"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != N_JOINTS:
                raise ValueError(f"{name} needs {N_JOINTS} entries")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "muscles", tuple(self.muscles))
        object.__setattr__(
            self, "joint_limits",
            tuple((float(lo), float(hi)) for lo, hi in self.joint_limits))

        if min(self.link_lengths + self.link_masses + self.link_inertias) <= 0:
            raise ValueError("link lengths, masses and inertias must be positive")
        if min(self.link_com_offsets) <= 0:
            raise ValueError("link COM offsets must be positive")
        if min(self.joint_damping) < 0:
            raise ValueError("joint damping must be non-negative")
        if self.integrator_dt <= 0 or self.movement_duration <= 0:
            raise ValueError("dt and movement duration must be positive")
        if tuple(m.name for m in self.muscles) != MUSCLE_NAMES:
            raise ValueError(f"muscles must be ordered {MUSCLE_NAMES}")
        if len(self.joint_limits) != N_JOINTS or any(lo >= hi for lo, hi in self.joint_limits):
            raise ValueError("joint limits must be two increasing intervals")
        n = self.movement_duration / self.integrator_dt
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError("movement duration must be a whole number of steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.movement_duration / self.integrator_dt))

    # column vectors used by the batched kernels -------------------------
    @cached_property
    def F0(self) -> np.ndarray:
        return np.array([m.F0 for m in self.muscles])

    @cached_property
    def l0(self) -> np.ndarray:
        return np.array([m.l0 for m in self.muscles])

    @cached_property
    def tau_act(self) -> np.ndarray:
        return np.array([m.tau_act for m in self.muscles])

    @cached_property
    def tau_deact(self) -> np.ndarray:
        return np.array([m.tau_deact for m in self.muscles])

    @cached_property
    def rest_lengths(self) -> np.ndarray:
        return np.array([m.rest_length for m in self.muscles])

    @cached_property
    def moment_arm_matrix(self) -> np.ndarray:
        """R with shape (2, 6): joint torque = R @ muscle tensions."""
        return np.array([m.moment_arms for m in self.muscles]).T.copy()

    @cached_property
    def limits_array(self) -> np.ndarray:
        return np.array(self.joint_limits)

    def with_integrator(self, dt=None, duration=None) -> "ArmModel":
        from dataclasses import replace
        return replace(self,
                       integrator_dt=self.integrator_dt if dt is None else dt,
                       movement_duration=self.movement_duration if duration is None else duration)

    # serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "links": {
                "lengths": list(self.link_lengths),
                "masses": list(self.link_masses),
                "com_offsets": list(self.link_com_offsets),
                "inertias": list(self.link_inertias),
                "damping": list(self.joint_damping),
            },
            "gravity": self.gravity,
            "muscles": [
                {
                    "name": m.name,
                    "F0": m.F0,
                    "l0": m.l0,
                    "tau_act": m.tau_act,
                    "tau_deact": m.tau_deact,
                    "moment_arms": list(m.moment_arms),
                    "rest_length": m.rest_length,
                }
                for m in self.muscles
            ],
            "integrator": {"dt": self.integrator_dt, "duration": self.movement_duration},
            "joint_limits": [list(lim) for lim in self.joint_limits],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ArmModel":
        _check_keys(doc, {"links", "gravity", "muscles", "integrator", "joint_limits"}, "arm")
        links = doc["links"]
        _check_keys(links, {"lengths", "masses", "com_offsets", "inertias", "damping"}, "links")
        integ = doc["integrator"]
        _check_keys(integ, {"dt", "duration"}, "integrator")
        muscles = []
        for i, m in enumerate(doc["muscles"]):
            _check_keys(m, {"name", "F0", "l0", "tau_act", "tau_deact",
                            "moment_arms", "rest_length"}, f"muscles[{i}]")
            muscles.append(MuscleParams(
                name=m["name"], F0=float(m["F0"]), l0=float(m["l0"]),
                tau_act=float(m["tau_act"]), tau_deact=float(m["tau_deact"]),
                moment_arms=tuple(m["moment_arms"]), rest_length=float(m["rest_length"])))
        try:
            return cls(
                link_lengths=tuple(links["lengths"]),
                link_masses=tuple(links["masses"]),
                link_com_offsets=tuple(links["com_offsets"]),
                link_inertias=tuple(links["inertias"]),
                joint_damping=tuple(links["damping"]),
                gravity=float(doc["gravity"]),
                muscles=tuple(muscles),
                integrator_dt=float(integ["dt"]),
                movement_duration=float(integ["duration"]),
                joint_limits=tuple(tuple(lim) for lim in doc["joint_limits"]),
            )
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"invalid arm parameters: {exc}") from exc

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identifies the arm in template libraries."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _check_keys(doc, expected: set, where: str):
    if not isinstance(doc, dict):
        raise SchemaError(f"{where}: expected an object")
    unknown = set(doc) - expected
    missing = expected - set(doc)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")
    if missing:
        raise SchemaError(f"{where}: missing keys {sorted(missing)}")


def load_arm(path) -> ArmModel:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc.msg} at byte {exc.pos}", offset=exc.pos) from exc
    return ArmModel.from_dict(doc)


def save_arm(model: ArmModel, path):
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def default_arm() -> ArmModel:
    """The arm described by the bundled ``default_arm.json``."""
    text = resources.files("habitreach").joinpath("data/default_arm.json").read_text()
    return ArmModel.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# state types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ArmState:
    q: np.ndarray
    qdot: np.ndarray
    activations: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qdot", np.asarray(self.qdot, dtype=float))
        object.__setattr__(self, "activations", np.asarray(self.activations, dtype=float))

    @classmethod
    def at_rest(cls, q) -> "ArmState":
        return cls(np.asarray(q, dtype=float), np.zeros(N_JOINTS), np.zeros(N_MUSCLES), 0.0)


# start posture used for every template and every reach
STANDARD_POSTURE = (math.pi / 4, math.pi / 2)


def standard_initial_state() -> ArmState:
    return ArmState.at_rest(STANDARD_POSTURE)


@dataclass(frozen=True, eq=False)
class ExcitationProfile:
    """Zero-order-hold excitation: ``samples[k]`` drives integration step k."""

    dt: float
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != N_MUSCLES:
            raise ValueError(f"excitation samples must have shape (K, {N_MUSCLES})")
        if np.any(s < 0.0) or np.any(s > 1.0) or not np.all(np.isfinite(s)):
            raise ValueError("excitation samples must lie in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) * self.dt

    def __eq__(self, other):
        if not isinstance(other, ExcitationProfile):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.samples, other.samples)

    def to_dict(self) -> dict:
        return {"dt": self.dt, "samples": self.samples.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "ExcitationProfile":
        return cls(float(doc["dt"]), np.array(doc["samples"], dtype=float))


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    activations: np.ndarray
    hand_positions: np.ndarray

    @property
    def final_position(self) -> np.ndarray:
        return self.hand_positions[-1]

    @property
    def states(self) -> list[ArmState]:
        return [ArmState(self.q[k], self.qdot[k], self.activations[k], float(self.times[k]))
                for k in range(len(self.times))]


# ---------------------------------------------------------------------------
# muscle model
# ---------------------------------------------------------------------------


def activation_rate(u, a, tau_act, tau_deact):
    """Batched first-order activation dynamics with separate rise/decay constants."""
    rise = (u - a) * (u / tau_act + (1.0 - u) / tau_deact)
    decay = (u - a) / tau_deact
    return np.where(u >= a, rise, decay)


def activation_derivative(u: float, a: float, params: MuscleParams) -> float:
    assert 0.0 <= u <= 1.0 and 0.0 <= a <= 1.0, (u, a)
    return float(activation_rate(u, a, params.tau_act, params.tau_deact))


def force_length(l):
    """Active force-length factor of normalised fibre length ``l``."""
    x = l - 0.95
    x2 = x * x
    return np.exp(-40.0 * x2 * x2 + x2)


def force_velocity(v):
    """Force-velocity factor of normalised lengthening velocity ``v`` (< 1)."""
    s2 = (1.0 - v) ** 2
    return 1.6 - 1.6 * np.exp(-1.1 / (s2 * s2) + 0.1 / s2)


def passive_force(l):
    return 1.3 * np.arctan(0.1 * (l - 0.22) ** 10)


def muscle_force(a: float, fiber_length: float, fiber_velocity: float,
                 params: MuscleParams) -> float:
    if fiber_length <= 0:
        raise DynamicsError(f"{params.name}: non-positive fibre length {fiber_length}")
    l = fiber_length / params.l0
    v = fiber_velocity / V_SCALE
    if v >= 1.0:
        raise DynamicsError(f"{params.name}: lengthening speed {fiber_velocity} m/s out of range")
    return float(params.F0 * (force_length(l) * force_velocity(v) * a + passive_force(l)))


def muscle_geometry(q, qdot, params: MuscleParams) -> tuple[float, float]:
    r = np.asarray(params.moment_arms)
    lm = params.rest_length - float(r @ np.asarray(q, dtype=float))
    vm = -float(r @ np.asarray(qdot, dtype=float))
    if lm <= 0:
        raise DynamicsError(f"{params.name}: fibre length {lm} <= 0 at q={list(q)}")
    return lm, vm


# ---------------------------------------------------------------------------
# rigid-body terms
# ---------------------------------------------------------------------------


def mass_matrix_terms(q2, model: ArmModel):
    """Entries (A11, A12, A22) of the two-link mass matrix for elbow angle ``q2``."""
    l1, _ = model.link_lengths
    m1, m2 = model.link_masses
    c1, c2 = model.link_com_offsets
    i1, i2 = model.link_inertias
    cos2 = np.cos(q2)
    a22 = i2 + m2 * c2 * c2
    a12 = a22 + m2 * l1 * c2 * cos2
    a11 = i1 + m1 * c1 * c1 + a22 + m2 * (l1 * l1 + 2.0 * l1 * c2 * cos2)
    return a11, a12, a22


def mass_matrix(q, model: ArmModel) -> np.ndarray:
    a11, a12, a22 = np.broadcast_arrays(*mass_matrix_terms(np.asarray(q, dtype=float)[..., 1], model))
    return np.stack([np.stack([a11, a12], -1), np.stack([a12, a22], -1)], -2)


def bias_torques(q, qdot, model: ArmModel):
    """Gravity plus Coriolis/centrifugal torques, as a (..., 2) array on the right-hand side."""
    l1, _ = model.link_lengths
    m1, m2 = model.link_masses
    c1, c2 = model.link_com_offsets
    g = model.gravity
    q1, q2 = q[..., 0], q[..., 1]
    w1, w2 = qdot[..., 0], qdot[..., 1]
    h = m2 * l1 * c2 * np.sin(q2)
    t1 = h * (2.0 * w1 * w2 + w2 * w2)
    t2 = -h * w1 * w1
    if g:
        cos12 = np.cos(q1 + q2)
        t1 = t1 - g * ((m1 * c1 + m2 * l1) * np.cos(q1) + m2 * c2 * cos12)
        t2 = t2 - g * m2 * c2 * cos12
    return np.stack([t1, t2], -1)


def gravity_torques(q, model: ArmModel) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return bias_torques(q, np.zeros_like(q), model)


def forward_kinematics(q, model: ArmModel) -> np.ndarray:
    """Hand position with the shoulder at the origin; batched over leading axes."""
    q = np.asarray(q, dtype=float)
    l1, l2 = model.link_lengths
    q1 = q[..., 0]
    q12 = q1 + q[..., 1]
    return np.stack([l1 * np.cos(q1) + l2 * np.cos(q12),
                     l1 * np.sin(q1) + l2 * np.sin(q12)], -1)


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------


def _rhs(q, qd, a, u, model: ArmModel):
    """Batched right-hand side.

    Shapes: q, qd (B, 2); a, u (B, 6).  Returns (qdd, adot, bad) where ``bad``
    flags rows whose fibre length or lengthening speed left the model domain.
    """
    R = model.moment_arm_matrix
    lm = model.rest_lengths - q @ R
    vm = -(qd @ R)
    l = lm / model.l0
    v = vm / V_SCALE
    bad = np.any((lm <= 0.0) | (v >= 1.0), axis=-1)

    force = model.F0 * (force_length(l) * force_velocity(v) * a + passive_force(l))
    tau = force @ R.T + bias_torques(q, qd, model) - np.asarray(model.joint_damping) * qd

    a11, a12, a22 = mass_matrix_terms(q[:, 1], model)
    det = a11 * a22 - a12 * a12
    qdd = np.stack([(a22 * tau[:, 0] - a12 * tau[:, 1]) / det,
                    (a11 * tau[:, 1] - a12 * tau[:, 0]) / det], -1)
    adot = activation_rate(u, a, model.tau_act, model.tau_deact)
    return qdd, adot, bad


def _rk4(q, qd, a, u, dt, model: ArmModel):
    """One classical Runge-Kutta step of the joint (q, qdot, a) system."""
    k1v, k1a, bad1 = _rhs(q, qd, a, u, model)
    h = 0.5 * dt
    v2 = qd + h * k1v
    k2v, k2a, bad2 = _rhs(q + h * qd, v2, a + h * k1a, u, model)
    v3 = qd + h * k2v
    k3v, k3a, bad3 = _rhs(q + h * v2, v3, a + h * k2a, u, model)
    v4 = qd + dt * k3v
    k4v, k4a, bad4 = _rhs(q + dt * v3, v4, a + dt * k3a, u, model)

    s = dt / 6.0
    qn = q + s * (qd + 2.0 * v2 + 2.0 * v3 + v4)
    vn = qd + s * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    an = a + s * (k1a + 2.0 * k2a + 2.0 * k3a + k4a)
    return qn, vn, an, bad1 | bad2 | bad3 | bad4


def _project(q, qd, a, limits):
    """Clamp activations to [0, 1] and joints to their stops (velocity zeroed there)."""
    np.clip(a, 0.0, 1.0, out=a)
    lo, hi = limits[:, 0], limits[:, 1]
    out = (q < lo) | (q > hi)
    if out.any():
        np.clip(q, lo, hi, out=q)
        qd[out] = 0.0
    return q, qd, a


def _integrate(u, model: ArmModel, initial: ArmState, record: bool):
    """Integrate a (B, K, 6) batch of excitation samples from one initial state.

    Returns the final (q, qdot, a), per-row index of the first failed step
    (-1 if none) and, when ``record`` is set, the full (K+1)-long histories.
    Failed rows are frozen at NaN and keep going so the rest of the batch is
    unaffected.
    """
    B, K, _ = u.shape
    dt = model.integrator_dt
    limits = model.limits_array
    q = np.repeat(initial.q[None, :], B, axis=0)
    qd = np.repeat(initial.qdot[None, :], B, axis=0)
    a = np.repeat(initial.activations[None, :], B, axis=0)
    failed_at = np.full(B, -1)

    hist = None
    if record:
        hist = (np.empty((K + 1, B, 2)), np.empty((K + 1, B, 2)), np.empty((K + 1, B, 6)))
        hist[0][0], hist[1][0], hist[2][0] = q, qd, a

    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        for k in range(K):
            q, qd, a, bad = _rk4(q, qd, a, u[:, k, :], dt, model)
            q, qd, a = _project(q, qd, a, limits)
            if bad.any():
                fresh = bad & (failed_at < 0)
                failed_at[fresh] = k
                q[bad], qd[bad], a[bad] = np.nan, np.nan, np.nan
            if record:
                hist[0][k + 1], hist[1][k + 1], hist[2][k + 1] = q, qd, a
    return q, qd, a, failed_at, hist


def _as_row(x, n):
    return np.asarray(x, dtype=float).reshape(1, n)


# ---------------------------------------------------------------------------
# public dynamics API
# ---------------------------------------------------------------------------


def dynamics_rhs(state: ArmState, u, model: ArmModel) -> tuple[np.ndarray, np.ndarray]:
    """Joint accelerations and activation rates at ``state`` under excitation ``u``."""
    qdd, adot, bad = _rhs(_as_row(state.q, 2), _as_row(state.qdot, 2),
                          _as_row(state.activations, N_MUSCLES), _as_row(u, N_MUSCLES), model)
    if bad[0]:
        raise DynamicsError("fibre length or lengthening speed outside the muscle model domain")
    return qdd[0], adot[0]


def step(state: ArmState, u_sample, model: ArmModel) -> ArmState:
    u = _as_row(u_sample, N_MUSCLES)
    if np.any(u < 0.0) or np.any(u > 1.0):
        raise ValueError("excitation outside [0, 1]")
    q, qd, a, bad = _rk4(_as_row(state.q, 2), _as_row(state.qdot, 2),
                         _as_row(state.activations, N_MUSCLES), u, model.integrator_dt, model)
    if bad[0]:
        raise DynamicsError("fibre length or lengthening speed outside the muscle model domain")
    q, qd, a = _project(q, qd, a, model.limits_array)
    return ArmState(q[0], qd[0], a[0], state.time + model.integrator_dt)


def _check_grid(excitations: ExcitationProfile, model: ArmModel):
    if abs(excitations.dt - model.integrator_dt) > 1e-15 or len(excitations.samples) != model.n_steps:
        raise ValueError(
            f"excitation grid ({len(excitations.samples)} x {excitations.dt}) does not match "
            f"the arm integrator ({model.n_steps} x {model.integrator_dt})")


def simulate(excitations: ExcitationProfile, model: ArmModel,
             initial: ArmState | None = None) -> Trajectory:
    """Integrate the arm over the whole excitation profile."""
    _check_grid(excitations, model)
    initial = standard_initial_state() if initial is None else initial
    *_, failed_at, hist = _integrate(excitations.samples[None], model, initial, record=True)
    if failed_at[0] >= 0:
        raise DynamicsError("muscle model left its domain", time_index=int(failed_at[0]))
    q, qd, a = (h[:, 0, :] for h in hist)
    times = initial.time + model.integrator_dt * np.arange(len(q))
    return Trajectory(times, q, qd, a, forward_kinematics(q, model))


def simulate_final_positions(samples, model: ArmModel,
                             initial: ArmState | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Final hand positions for a (B, K, 6) batch of excitation samples.

    Returns ``(positions, failed_at)``; rows that left the muscle domain have
    NaN positions and a non-negative ``failed_at`` step index.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 3 or samples.shape[1:] != (model.n_steps, N_MUSCLES):
        raise ValueError(f"expected samples of shape (B, {model.n_steps}, {N_MUSCLES})")
    initial = standard_initial_state() if initial is None else initial
    q, *_, failed_at, _ = _integrate(samples, model, initial, record=False)
    return forward_kinematics(q, model), failed_at
