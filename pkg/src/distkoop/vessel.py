"""Ground-truth surface vessel, excitation trajectories and per-agent slicing.

State layout is ``x = [px, py, phi, vx, vy, dphi]``: world-frame pose then
body-frame velocities. Inputs are ``u = [u_left, u_right]`` in ``[-1, 1]``.

The velocity dynamics are a 3-DOF surge/sway/yaw model with diagonal rigid
body plus added mass, the matching Coriolis terms, linear and quadratic
damping, and two fixed thrusters offset laterally from the centreline::

    m11 dvx   = (ul + ur) T + m22 vy r            - dx1 vx - dx2 |vx| vx
    m22 dvy   =             - m11 vx r            - dy1 vy - dy2 |vy| vy
    m33 dr    = (ur - ul) T l + (m11 - m22) vx vy - dr1 r  - dr2 |r| r

Velocities take one RK4 step per sample period; the pose then moves by the
rotated *new* velocity times ``dt``, the same kinematic form used by the
MPC prediction model.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import IntervalOutOfRange, NonFiniteState

STATE_DIM = 6
INPUT_DIM = 2
VEL = slice(3, 6)
POSE = slice(0, 3)

CSV_HEADER = ["t", "px", "py", "phi", "vx", "vy", "dphi", "u_left", "u_right"]

DEFAULT_INTERVALS = ((0, 600), (600, 1600), (1600, 2800), (2800, 3600), (3600, 4000))


@dataclass(frozen=True)
class VesselParams:
    mass: float = 22.5
    yaw_inertia: float = 6.25
    added_mass: tuple = (2.5, 10.0, 1.25)
    linear_damping: tuple = (50.0, 12.5, 40.0)
    quadratic_damping: tuple = (25.0, 6.25, 20.0)
    thruster_offset: float = 1.0
    max_thrust: float = 500.0

    def __post_init__(self):
        for name in ("mass", "yaw_inertia", "thruster_offset", "max_thrust"):
            if not getattr(self, name) > 0:
                raise ValueError(f"vessel.{name} must be > 0")
        for name in ("added_mass", "linear_damping", "quadratic_damping"):
            vals = getattr(self, name)
            if len(vals) != 3:
                raise ValueError(f"vessel.{name} needs 3 entries")
            if name == "added_mass" and any(v <= 0 for v in vals):
                raise ValueError("vessel.added_mass entries must be > 0")
            if any(v < 0 for v in vals):
                raise ValueError(f"vessel.{name} entries must be >= 0")
        object.__setattr__(self, "added_mass", tuple(float(v) for v in self.added_mass))
        object.__setattr__(self, "linear_damping", tuple(float(v) for v in self.linear_damping))
        object.__setattr__(self, "quadratic_damping", tuple(float(v) for v in self.quadratic_damping))

    @property
    def inertia_diag(self) -> np.ndarray:
        return np.array([self.mass, self.mass, self.yaw_inertia]) + np.array(self.added_mass)


def rotation(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def velocity_derivative(v, u, params: VesselParams) -> np.ndarray:
    m11, m22, m33 = params.inertia_diag
    dl, dq = params.linear_damping, params.quadratic_damping
    vx, vy, r = v
    thrust = params.max_thrust
    surge = (u[0] + u[1]) * thrust
    yaw = (u[1] - u[0]) * thrust * params.thruster_offset
    return np.array([
        (surge + m22 * vy * r - dl[0] * vx - dq[0] * abs(vx) * vx) / m11,
        (-m11 * vx * r - dl[1] * vy - dq[1] * abs(vy) * vy) / m22,
        (yaw + (m11 - m22) * vx * vy - dl[2] * r - dq[2] * abs(r) * r) / m33,
    ])


def kinetic_energy(v, params: VesselParams) -> float:
    return 0.5 * float(np.dot(params.inertia_diag, np.asarray(v) ** 2))


def _check_input(u):
    u = np.asarray(u, dtype=float)
    if u.shape != (INPUT_DIM,):
        raise ValueError(f"input must have shape (2,), got {u.shape}")
    if np.any(np.abs(u) > 1.0) or not np.all(np.isfinite(u)):
        raise ValueError(f"input {u} outside the box [-1, 1]^2")
    return u


def step_truth(x, u, dt: float, params: VesselParams = VesselParams()) -> np.ndarray:
    """Advance the true vessel by one sample period ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = _check_input(u)
    x = np.asarray(x, dtype=float)
    v = x[VEL]
    k1 = velocity_derivative(v, u, params)
    k2 = velocity_derivative(v + 0.5 * dt * k1, u, params)
    k3 = velocity_derivative(v + 0.5 * dt * k2, u, params)
    k4 = velocity_derivative(v + dt * k3, u, params)
    v_next = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    p_next = x[POSE] + rotation(x[2]) @ v_next * dt
    out = np.concatenate([p_next, v_next])
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"ground-truth step produced {out}")
    return out


@dataclass
class Trajectory:
    """States ``(T+1, 6)`` and inputs ``(T, 2)`` sampled every ``dt`` seconds."""

    dt: float
    states: np.ndarray
    inputs: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, INPUT_DIM)
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("trajectory needs exactly one more state than inputs")

    @property
    def T(self) -> int:
        return len(self.inputs)


def generate_trajectory(
    params: VesselParams = VesselParams(),
    seed: int = 0,
    T: int = 5000,
    dt: float = 0.02,
    sigma: float = 0.5,
    hold: int = 10,
    x0=None,
) -> Trajectory:
    """Drive the vessel with clipped Gaussian thrust held for ``hold`` steps."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if hold < 1:
        raise ValueError("hold must be at least 1")
    rng = np.random.default_rng(seed)
    n_draws = -(-T // hold)
    draws = rng.normal(0.0, 1.0, size=(n_draws, INPUT_DIM)) * sigma
    inputs = np.clip(np.repeat(draws, hold, axis=0)[:T], -1.0, 1.0)
    states = np.empty((T + 1, STATE_DIM))
    states[0] = np.zeros(STATE_DIM) if x0 is None else np.asarray(x0, dtype=float)
    for t in range(T):
        states[t + 1] = step_truth(states[t], inputs[t], dt, params)
    return Trajectory(dt=dt, states=states, inputs=inputs, seed=seed)


@dataclass
class Segment:
    """Contiguous slice of a trajectory observed by one agent.

    ``states`` has ``T_i + 1`` rows starting at global index ``start`` and
    ``inputs`` the ``T_i`` inputs that drive them.
    """

    agent_id: int
    start: int
    states: np.ndarray
    inputs: np.ndarray

    @property
    def end(self) -> int:
        return self.start + len(self.inputs)

    @property
    def n_transitions(self) -> int:
        return len(self.inputs)

    @property
    def n_pairs(self) -> int:
        return len(self.states)


def partition_trajectory(traj: Trajectory, intervals) -> list:
    """Cut ``traj`` into one segment per ``(start, end)`` interval.

    Intervals may overlap. Agent ids are 1-based, following interval order.
    """
    segments = []
    for k, (start, end) in enumerate(intervals):
        start, end = int(start), int(end)
        if not 0 <= start < end <= traj.T:
            raise IntervalOutOfRange(
                f"interval {k + 1} = ({start}, {end}) must satisfy 0 <= start < end <= {traj.T}"
            )
        segments.append(Segment(
            agent_id=k + 1,
            start=start,
            states=traj.states[start:end + 1].copy(),
            inputs=traj.inputs[start:end].copy(),
        ))
    return segments


def write_trajectory_csv(path, traj: Trajectory, meta=None):
    """Write one row per time index; the last row has empty input fields."""
    meta = {**traj.meta, "seed": traj.seed, "dt": repr(traj.dt), **(meta or {})}
    with open(path, "w", newline="") as fh:
        for key in sorted(meta):
            fh.write(f"# {key}={meta[key]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, x in enumerate(traj.states):
            u = traj.inputs[t] if t < traj.T else (None, None)
            w.writerow([t] + [f"{v:.17g}" for v in x] + ["" if v is None else f"{v:.17g}" for v in u])


def read_trajectory_csv(path) -> Trajectory:
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    if header != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    for row in reader:
        rows.append(row)
    states = np.array([[float(v) for v in row[1:7]] for row in rows])
    inputs = np.array([[float(v) for v in row[7:9]] for row in rows[:-1]])
    dt = float(meta.pop("dt", "0.02"))
    seed = int(meta.pop("seed", "0"))
    return Trajectory(dt=dt, states=states, inputs=inputs, seed=seed, meta=meta)
