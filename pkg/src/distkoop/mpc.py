"""Learned-velocity plus kinematic prediction model and a cross-entropy MPC.

The prediction model advances the body velocity with the Koopman model and
then moves the pose by the rotated *predicted* velocity::

    v+ = C (A g(v) + B u)
    p+ = p + R(phi) v+ dt

Costs use the raw yaw difference unless ``wrap_yaw`` is set, since yaw is
integrated without wrapping.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteState, SolverDegenerate
from .koopman import KoopmanModel, predict_batch
from .vessel import VesselParams, step_truth

DEFAULT_X0 = (20.0, 10.0, np.pi / 3, 0.0, 0.0, 0.0)
DEFAULT_GOAL = (0.0, 0.0, np.pi / 2, 0.0, 0.0, 0.0)
DEFAULT_Q = (300.0, 300.0, 500.0, 10.0, 10.0, 10.0)
DEFAULT_R = (1e-3, 1e-3)


@dataclass
class MpcConfig:
    horizon: int = 30
    q: tuple = DEFAULT_Q
    qf: tuple = None
    r: tuple = DEFAULT_R
    dt: float = 0.02
    samples: int = 400
    elites: int = 40
    iterations: int = 6
    init_std: float = 0.4
    keep_elites: int = 10
    block: int = 1
    seed: int = 0
    wrap_yaw: bool = False

    def __post_init__(self):
        if self.qf is None:
            self.qf = tuple(2.0 * v for v in self.q)
        self.q, self.qf, self.r = (tuple(float(v) for v in w) for w in (self.q, self.qf, self.r))
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(self.q) != 6 or len(self.qf) != 6 or len(self.r) != 2:
            raise ValueError("q and qf need 6 diagonal entries, r needs 2")
        if min(self.q + self.qf + self.r) < 0:
            raise ValueError("cost weights must be nonnegative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 1 <= self.elites <= self.samples:
            raise ValueError("need 1 <= elites <= samples")
        if not 0 <= self.keep_elites <= self.elites or self.keep_elites >= self.samples:
            raise ValueError("need 0 <= keep_elites <= elites and keep_elites < samples")
        if self.block < 1:
            raise ValueError("block must be >= 1")
        if self.iterations < 1 or not self.init_std >= 0:
            raise ValueError("iterations must be >= 1 and init_std >= 0")


def _predict_velocity(model, V, U):
    # any object with predict_batch(V, U) can stand in for a Koopman model
    if isinstance(model, KoopmanModel):
        return predict_batch(model, V, U)
    return model.predict_batch(V, U)


def combined_step_batch(model, X, U, dt) -> np.ndarray:
    """Advance ``B`` full states ``X (B, 6)`` under inputs ``U (B, 2)``."""
    X = np.asarray(X, dtype=float)
    v_next = _predict_velocity(model, X[:, 3:].T, np.asarray(U, dtype=float).T).T
    c, s = np.cos(X[:, 2]), np.sin(X[:, 2])
    out = np.empty_like(X)
    out[:, 0] = X[:, 0] + (c * v_next[:, 0] - s * v_next[:, 1]) * dt
    out[:, 1] = X[:, 1] + (s * v_next[:, 0] + c * v_next[:, 1]) * dt
    out[:, 2] = X[:, 2] + v_next[:, 2] * dt
    out[:, 3:] = v_next
    return out


def combined_step(model, x, u, dt) -> np.ndarray:
    out = combined_step_batch(model, np.reshape(x, (1, 6)), np.reshape(u, (1, 2)), dt)[0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"combined model produced {out}")
    return out


def state_error(X, goal, wrap_yaw=False):
    err = np.asarray(X, dtype=float) - np.asarray(goal, dtype=float)
    if wrap_yaw:
        err[..., 2] = (err[..., 2] + np.pi) % (2 * np.pi) - np.pi
    return err


def _costs(model, x0, seqs, goal, cfg):
    """Cost of each input sequence in ``seqs (B, K, 2)`` from ``x0``."""
    B, K, _ = seqs.shape
    q, qf, r = np.array(cfg.q), np.array(cfg.qf), np.array(cfg.r)
    X = np.repeat(np.asarray(x0, dtype=float)[None, :], B, axis=0)
    total = np.zeros(B)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(K):
            err = state_error(X, goal, cfg.wrap_yaw)
            total += (err * err) @ q + (seqs[:, t] ** 2) @ r
            X = combined_step_batch(model, X, seqs[:, t], cfg.dt)
        err = state_error(X, goal, cfg.wrap_yaw)
        total += (err * err) @ qf
    total[~np.isfinite(total)] = np.inf
    return total


def trajectory_cost(model, x0, inputs, goal, cfg: MpcConfig) -> float:
    """Stage plus terminal cost of rolling ``inputs (K, 2)`` out from ``x0``."""
    inputs = np.asarray(inputs, dtype=float)
    cost = _costs(model, x0, inputs[None], goal, cfg)[0]
    if not np.isfinite(cost):
        raise NonFiniteState("rollout cost is not finite")
    return float(cost)


@dataclass
class CemResult:
    plan: np.ndarray
    cost: float
    elite_means: list


def cem_plan(model, x, goal, cfg: MpcConfig, init_mean=None, rng=None) -> CemResult:
    """Cross-entropy search over clipped input sequences.

    The current mean is always evaluated alongside the random samples.
    Candidates whose rollout is non-finite are dropped. The returned plan is
    the final mean or the best sequence seen, whichever costs less.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    K = cfg.horizon
    mean = np.zeros((K, 2)) if init_mean is None else np.clip(np.array(init_mean, dtype=float), -1, 1)
    std = np.full((K, 2), cfg.init_std)
    elite_means = []
    kept = np.empty((0, K, 2))
    kept_costs = np.empty(0)
    best, best_cost = None, np.inf
    for _ in range(cfg.iterations):
        n_new = cfg.samples - 1 - len(kept)
        knots = rng.standard_normal((n_new, -(-K // cfg.block), 2))
        noise = np.repeat(knots, cfg.block, axis=1)[:, :K]
        fresh = np.concatenate([mean[None], np.clip(mean + std * noise, -1.0, 1.0)])
        fresh_costs = _costs(model, x, fresh, goal, cfg)
        # elites of the previous iteration compete again without re-evaluation
        seqs = np.concatenate([kept, fresh])
        costs = np.concatenate([kept_costs, fresh_costs])
        finite = np.isfinite(costs)
        if not finite.any():
            raise SolverDegenerate("every sampled input sequence diverged")
        n_elite = min(cfg.elites, int(finite.sum()))
        idx = np.argsort(costs, kind="stable")[:n_elite]
        elite = seqs[idx]
        if costs[idx[0]] < best_cost:
            best, best_cost = elite[0].copy(), float(costs[idx[0]])
        elite_means.append(float(costs[idx].mean()))
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
        n_keep = min(cfg.keep_elites, n_elite)
        kept, kept_costs = elite[:n_keep], costs[idx[:n_keep]]
    mean = np.clip(mean, -1.0, 1.0)
    cost = _costs(model, x, mean[None], goal, cfg)[0]
    if not cost <= best_cost:
        return CemResult(best, best_cost, elite_means)
    return CemResult(mean, float(cost), elite_means)


def solve_mpc(model, x, goal, cfg: MpcConfig, init_mean=None, rng=None):
    """First input of the optimized sequence and that sequence's predicted cost."""
    res = cem_plan(model, x, goal, cfg, init_mean, rng)
    return res.plan[0].copy(), res.cost


@dataclass
class ClosedLoopTrace:
    states: np.ndarray
    inputs: np.ndarray
    err_pos: np.ndarray
    err_yaw: np.ndarray
    solve_ms: np.ndarray
    meta: dict = field(default_factory=dict)

    def first_arrival(self, pos_tol=0.5, yaw_tol=0.1):
        """First step index with both errors inside tolerance, or None."""
        ok = np.flatnonzero((self.err_pos < pos_tol) & (np.abs(self.err_yaw) < yaw_tol))
        return int(ok[0]) if len(ok) else None


def run_closed_loop(truth: VesselParams, model, x0, goal, cfg: MpcConfig, max_steps: int) -> ClosedLoopTrace:
    """Receding-horizon control of the true vessel with the learned model.

    Each step re-solves from the measured state, warm-started from the
    previous plan shifted by one step.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    goal = np.asarray(goal, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    states, inputs, solve_ms = [x.copy()], [], []
    warm = None
    for _ in range(max_steps):
        t0 = time.perf_counter()
        try:
            res = cem_plan(model, x, goal, cfg, warm, rng)
            plan = res.plan
        except SolverDegenerate:
            res = cem_plan(model, x, goal, cfg, None, rng)
            plan = res.plan
        solve_ms.append(1e3 * (time.perf_counter() - t0))
        u = np.clip(plan[0], -1.0, 1.0)
        warm = np.vstack([plan[1:], plan[-1:]])
        x = step_truth(x, u, cfg.dt, truth)
        inputs.append(u)
        states.append(x.copy())
    states = np.array(states)
    err = state_error(states, goal, cfg.wrap_yaw)
    return ClosedLoopTrace(states, np.array(inputs), np.hypot(err[:, 0], err[:, 1]), err[:, 2],
                           np.array(solve_ms))


TRACE_HEADER = ["t", "px", "py", "phi", "vx", "vy", "dphi", "u_left", "u_right", "err_pos", "err_yaw", "solve_ms"]


def write_trace_csv(path, trace: ClosedLoopTrace, meta=None, include_timing=True):
    """One row per state; the final row has empty input and timing fields.

    ``include_timing=False`` blanks the wall-clock column so that repeated
    runs produce identical files.
    """
    with open(path, "w", newline="") as fh:
        for key in sorted({**trace.meta, **(meta or {})}):
            fh.write(f"# {key}={({**trace.meta, **(meta or {})})[key]}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        T = len(trace.inputs)
        for t, x in enumerate(trace.states):
            u = [f"{v:.17g}" for v in trace.inputs[t]] if t < T else ["", ""]
            ms = f"{trace.solve_ms[t]:.3f}" if (t < T and include_timing) else ""
            w.writerow([t] + [f"{v:.17g}" for v in x] + u
                       + [f"{trace.err_pos[t]:.17g}", f"{trace.err_yaw[t]:.17g}", ms])
