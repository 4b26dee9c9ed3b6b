import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distkoop.errors import NonFiniteState, SolverDegenerate
from distkoop.koopman import KoopmanModel
from distkoop.lift import init_params
from distkoop.mpc import (DEFAULT_GOAL, DEFAULT_Q, DEFAULT_R, DEFAULT_X0, TRACE_HEADER, ClosedLoopTrace,
                          MpcConfig, cem_plan, combined_step, combined_step_batch, run_closed_loop, solve_mpc,
                          trajectory_cost, write_trace_csv)
from distkoop.vessel import VesselParams

DT = 0.02


class ConstantVelocity:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def predict_batch(self, V, U):
        return np.repeat(self.v[:, None], V.shape[1], axis=1)


class DampedThrust:
    """``v+ = a v + b [u0 + u1, 0, u1 - u0]``: a transparent stand-in for a learned model."""

    def __init__(self, a=0.95, b=0.2):
        self.a, self.b = a, b

    def predict_batch(self, V, U):
        drive = np.vstack([U[0] + U[1], np.zeros(U.shape[1]), U[1] - U[0]])
        return self.a * V + self.b * drive


class Diverging:
    def predict_batch(self, V, U):
        return np.full_like(V, np.nan)


def random_koopman(seed):
    rng = np.random.default_rng(seed)
    return KoopmanModel(rng.normal(0, 0.2, (8, 8)), rng.normal(0, 0.2, (8, 2)), rng.normal(0, 0.2, (3, 8)),
                        init_params(seed))


def test_zero_velocity_freezes_pose():
    x = np.array([1.0, 2.0, 0.3, 0.5, 0.1, 0.2])
    out = combined_step(ConstantVelocity([0, 0, 0]), x, [0.2, 0.1], DT)
    assert np.array_equal(out[:3], x[:3]) and np.array_equal(out[3:], np.zeros(3))


def test_identity_rotation():
    out = combined_step(ConstantVelocity([1, 0, 0]), np.zeros(6), [0, 0], DT)
    assert out[0] == DT and out[1] == 0 and out[2] == 0


def test_quarter_turn():
    out = combined_step(ConstantVelocity([1, 0, 0]), [0, 0, np.pi / 2, 0, 0, 0], [0, 0], DT)
    assert out[1] == pytest.approx(DT, abs=1e-12)
    assert abs(out[0]) < 1e-12


def test_koopman_model_plugs_in():
    model = random_koopman(1)
    model.C[:] = 0
    out = combined_step(model, [3.0, 4.0, 1.0, 0.2, 0.1, 0.0], [0.5, -0.5], DT)
    assert np.array_equal(out, [3.0, 4.0, 1.0, 0.0, 0.0, 0.0])


def test_combined_step_non_finite():
    with pytest.raises(NonFiniteState):
        combined_step(Diverging(), np.zeros(6), [0, 0], DT)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 1000))
def test_translation_commutes(dx, dy, seed):
    rng = np.random.default_rng(seed)
    model = random_koopman(seed % 7)
    X = rng.normal(size=(4, 6))
    U = rng.uniform(-1, 1, (4, 2))
    shifted = X.copy()
    shifted[:, 0] += dx
    shifted[:, 1] += dy
    a = combined_step_batch(model, X, U, DT)
    b = combined_step_batch(model, shifted, U, DT)
    assert np.allclose(b[:, 0] - a[:, 0], dx, atol=1e-9) and np.allclose(b[:, 1] - a[:, 1], dy, atol=1e-9)
    assert np.array_equal(a[:, 2:], b[:, 2:])


def test_config_defaults_and_validation():
    cfg = MpcConfig()
    assert cfg.q == DEFAULT_Q and cfg.qf == tuple(2 * v for v in DEFAULT_Q) and cfg.r == DEFAULT_R
    assert cfg.horizon == 30 and cfg.dt == 0.02
    for bad in (dict(horizon=0), dict(q=(1, 2)), dict(r=(-1, 1)), dict(dt=0), dict(elites=500),
                dict(iterations=0), dict(block=0), dict(keep_elites=50)):
        with pytest.raises(ValueError):
            MpcConfig(**bad)


def test_cost_zero_at_rest_on_goal():
    goal = np.array([1.0, -2.0, 0.5, 0, 0, 0])
    cost = trajectory_cost(DampedThrust(), goal, np.zeros((30, 2)), goal, MpcConfig())
    assert cost == 0.0


def test_single_step_cost_by_hand():
    cfg = MpcConfig(horizon=1, q=(1, 2, 3, 4, 5, 6), qf=(6, 5, 4, 3, 2, 1), r=(0.5, 0.25))
    x0 = np.array([1.0, 0.0, 0.0, 0.5, 0.0, 0.0])
    u = np.array([0.4, 0.2])
    goal = np.zeros(6)
    model = DampedThrust(a=0.5, b=1.0)
    # v1 = 0.5 * [0.5, 0, 0] + [0.6, 0, -0.2] = [0.85, 0, -0.2]; pose moves by v1 * dt at phi = 0
    x1 = np.array([1.0 + 0.85 * DT, 0.0, -0.2 * DT, 0.85, 0.0, -0.2])
    expected = (1 * 1.0 + 4 * 0.25) + (0.5 * 0.16 + 0.25 * 0.04) + float(np.dot([6, 5, 4, 3, 2, 1], x1 ** 2))
    assert trajectory_cost(model, x0, u[None], goal, cfg) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_cost_nonnegative_and_zero_only_at_goal(seed):
    rng = np.random.default_rng(seed)
    cfg = MpcConfig(horizon=5)
    x0 = rng.normal(size=6)
    goal = rng.normal(size=6)
    u = rng.uniform(-1, 1, (5, 2))
    cost = trajectory_cost(DampedThrust(), x0, u, goal, cfg)
    assert cost > 0
    at_goal = goal.copy()
    at_goal[3:] = 0
    assert trajectory_cost(DampedThrust(), at_goal, np.zeros((5, 2)), at_goal, cfg) == 0.0


def test_solver_idles_at_goal():
    goal = np.array(DEFAULT_X0)
    u, cost = solve_mpc(DampedThrust(), goal, goal, MpcConfig())
    assert np.linalg.norm(u) <= 0.05
    assert cost < 1.0


def test_solver_drives_towards_goal_ahead():
    goal = np.array([5.0, 0, 0, 0, 0, 0])
    u, _ = solve_mpc(DampedThrust(), np.zeros(6), goal, MpcConfig())
    assert u[0] + u[1] > 0.5
    assert abs(u[0] - u[1]) < 0.5


def test_solver_deterministic():
    x = np.array([2.0, 1.0, 0.3, 0, 0, 0])
    a = solve_mpc(DampedThrust(), x, np.zeros(6), MpcConfig(seed=3))
    b = solve_mpc(DampedThrust(), x, np.zeros(6), MpcConfig(seed=3))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_degenerate_solver():
    with pytest.raises(SolverDegenerate):
        solve_mpc(Diverging(), np.zeros(6), np.ones(6), MpcConfig(samples=20, elites=5, keep_elites=2))


@pytest.mark.parametrize("seed", range(20))
def test_elite_cost_does_not_increase(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(-5, 5, 2), rng.uniform(-1, 1, 1), rng.normal(0, 0.3, 3)])
    goal = np.concatenate([rng.uniform(-5, 5, 2), rng.uniform(-1, 1, 1), np.zeros(3)])
    res = cem_plan(DampedThrust(), x, goal, MpcConfig(seed=seed, samples=100, elites=10, keep_elites=5))
    assert res.elite_means[-1] <= res.elite_means[0]
    assert np.all(np.abs(res.plan) <= 1.0)


def test_blocked_sampling_keeps_box():
    res = cem_plan(DampedThrust(), np.zeros(6), np.array([3.0, 1, 0, 0, 0, 0]),
                   MpcConfig(block=5, samples=50, elites=5, keep_elites=2, iterations=3, init_std=2.0))
    assert np.all(np.abs(res.plan) <= 1.0)


def test_closed_loop_respects_box_and_lengths(tmp_path):
    cfg = MpcConfig(samples=60, elites=8, keep_elites=3, iterations=3, init_std=3.0)
    trace = run_closed_loop(VesselParams(), DampedThrust(), DEFAULT_X0, DEFAULT_GOAL, cfg, 15)
    assert trace.states.shape == (16, 6) and trace.inputs.shape == (15, 2)
    assert trace.err_pos.shape == (16,) and trace.solve_ms.shape == (15,)
    assert np.all(np.abs(trace.inputs) <= 1.0)
    assert trace.err_pos[0] == pytest.approx(np.hypot(20, 10))
    assert trace.err_yaw[0] == pytest.approx(np.pi / 3 - np.pi / 2)
    again = run_closed_loop(VesselParams(), DampedThrust(), DEFAULT_X0, DEFAULT_GOAL, cfg, 15)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    write_trace_csv(p1, trace, {"config_hash": "abc", "seed": 0}, include_timing=False)
    write_trace_csv(p2, again, {"config_hash": "abc", "seed": 0}, include_timing=False)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[2] == ",".join(TRACE_HEADER)
    assert len(lines) == 3 + 16 and lines[-1].split(",")[7:9] == ["", ""]
    with pytest.raises(ValueError):
        run_closed_loop(VesselParams(), DampedThrust(), DEFAULT_X0, DEFAULT_GOAL, cfg, 0)


def test_first_arrival():
    trace = ClosedLoopTrace(np.zeros((4, 6)), np.zeros((3, 2)), np.array([1.0, 0.4, 0.3, 0.2]),
                            np.array([0.0, 0.2, 0.05, 0.0]), np.zeros(3))
    assert trace.first_arrival() == 2
    assert trace.first_arrival(pos_tol=0.1) is None


def test_yaw_wrapping_option():
    x = np.array([0.0, 0.0, 2 * np.pi, 0, 0, 0])
    goal = np.zeros(6)
    raw = trajectory_cost(ConstantVelocity([0, 0, 0]), x, np.zeros((1, 2)), goal, MpcConfig(horizon=1))
    wrapped = trajectory_cost(ConstantVelocity([0, 0, 0]), x, np.zeros((1, 2)), goal,
                              MpcConfig(horizon=1, wrap_yaw=True))
    assert raw > 1000 and wrapped < 1e-20
