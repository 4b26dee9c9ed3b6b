"""Training drivers: the distributed learner, a single-agent reference, and
the two centralized baselines, plus the one-step prediction metrics.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import consensus as cons
from .graph import mixing_weights, uniform_consensus_weights
from .koopman import KoopmanModel, build_data_matrices, local_loss, segment_arrays
from .lift import (AdamState, MlpParams, adam_direction, init_params, koopman_loss_grads,
                   lift_batch, loss_and_grad, regression_loss_and_grad)
from .vessel import VEL, Segment


@dataclass
class TrainConfig:
    S: int = 200
    S_bar: int = 100
    rounds: int = 50
    c: float = 0.003
    lr: float = 1e-4
    threshold: float = 7e-6
    init_seed: int = 0
    matrix_seed: int = 0
    r: int = 8
    hidden: int = 256
    mixing: str = "metropolis"
    optimizer: str = "adam"
    max_theta_steps: int = 200_000
    baseline_steps: int = 5000
    normalize: bool = False
    dko_init: str = "lstsq"
    track_oracle: bool = False
    weighting: str = "uniform"

    def __post_init__(self):
        if self.S < 1 or self.S_bar < 1 or self.rounds < 1:
            raise ValueError("S, S_bar and rounds must all be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if not self.c > 0:
            raise ValueError("c must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.weighting not in ("uniform", "per-agent"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.dko_init not in ("lstsq", "random"):
            raise ValueError(f"unknown dko_init {self.dko_init!r}")


@dataclass
class RunHistory:
    """Traces from one training run.

    ``theta_loss`` has one row per parameter step and one column per agent;
    ``matrix_rows`` one dict per matrix round (global round counter ``s``).
    """

    theta_loss: np.ndarray
    theta_disagreement: np.ndarray
    matrix_rows: list
    rounds_run: int
    converged: bool
    wall_clock: float
    message_counts: dict = field(default_factory=dict)

    @property
    def final_losses(self) -> np.ndarray:
        return self.theta_loss[-1]


def _normalization(segments, enabled):
    if not enabled:
        return None, None
    V = np.vstack([s.states[:, VEL] for s in segments])
    scale = V.std(axis=0)
    scale[scale == 0.0] = 1.0
    return V.mean(axis=0), scale


def _theta_step(state: AdamState, grad, optimizer):
    if optimizer == "adam":
        return adam_direction(state, grad)
    return state, grad


def run_ddkl_pt(cfg: TrainConfig, segments, graph, network=None):
    """Distributed deep Koopman learning over partial trajectories.

    Each outer round runs ``S`` synchronous matrix-consensus rounds with every
    network frozen, then ``S_bar`` rounds of neighbour averaging plus a local
    descent step on the network with each agent's matrices frozen. Matrix
    iterates carry over between outer rounds. Stops as soon as every agent's
    local loss is below ``cfg.threshold``.

    Returns
    -------
    models : list of KoopmanModel
    history : RunHistory
    """
    n = graph.n_agents
    if len(segments) != n:
        raise ValueError(f"{len(segments)} segments for {n} agents")
    t0 = time.perf_counter()
    network = network or cons.Network(graph)
    w = uniform_consensus_weights(graph)
    w_hat = mixing_weights(graph, cfg.mixing)
    shift, scale = _normalization(segments, cfg.normalize)

    theta0 = init_params(cfg.init_seed, hidden=cfg.hidden, n_out=cfg.r)
    thetas = [theta0.flatten() for _ in range(n)]
    adams = [AdamState.fresh(theta0.size, lr=cfg.lr) for _ in range(n)]
    data = [segment_arrays(seg, shift, scale) for seg in segments]

    states = None
    losses, theta_dis, rows = [], [], []
    converged = False
    rounds_run = 0
    s_global = 0
    theta_steps = 0
    for rnd in range(cfg.rounds):
        rounds_run = rnd + 1
        params = [theta0.like(t) for t in thetas]
        dms = [build_data_matrices(seg, p, shift, scale) for seg, p in zip(segments, params)]
        if states is None:
            states = [cons.build_consensus_state(dm, cfg.c, w, i, cfg.matrix_seed) for i, dm in enumerate(dms)]
        else:
            states = [cons.with_data(st, dm) for st, dm in zip(states, dms)]
        oracle = None
        if cfg.track_oracle:
            mean_theta = theta0.like(np.mean(thetas, axis=0))
            oracle = cons.centralized_ls_oracle(
                [build_data_matrices(seg, mean_theta, shift, scale) for seg in segments], cfg.weighting)

        for _ in range(cfg.S):
            states = cons.matrix_update_round(states, graph, w, network)
            s_global += 1
            dM, dC = cons.disagreement(states)
            row = dict(s=s_global, round=rnd, disagreement_M=dM, disagreement_C=dC,
                       dist_to_oracle_M=float("nan"), dist_to_oracle_C=float("nan"))
            if oracle is not None:
                Ms, Cs = oracle
                row["dist_to_oracle_M"] = max(float(np.linalg.norm(st.M - Ms)) for st in states) / np.linalg.norm(Ms)
                row["dist_to_oracle_C"] = max(float(np.linalg.norm(st.C - Cs)) for st in states) / np.linalg.norm(Cs)
            agent_losses = [local_loss(st.M[:, :cfg.r], st.M[:, cfg.r:], st.C, dm) for st, dm in zip(states, dms)]
            row["mean_local_loss"] = float(np.mean(agent_losses))
            rows.append(row)

        Ms = [st.M.copy() for st in states]
        Cs = [st.C.copy() for st in states]
        for _ in range(cfg.S_bar):
            step_losses, directions = [], []
            for i in range(n):
                loss, grad = loss_and_grad(theta0.like(thetas[i]), Ms[i], Cs[i], *data[i])
                adams[i], d = _theta_step(adams[i], grad, cfg.optimizer)
                step_losses.append(loss)
                directions.append(d)
            thetas = cons.theta_mixing_round(thetas, directions, w_hat, cfg.lr, graph, network)
            losses.append(step_losses)
            theta_dis.append(_max_pairwise(thetas))
            theta_steps += 1
            if max(step_losses) < cfg.threshold:
                converged = True
                break
            if theta_steps >= cfg.max_theta_steps:
                break
        if converged or theta_steps >= cfg.max_theta_steps:
            break

    models = [KoopmanModel.from_M(st.M, st.C, theta0.like(t), **_norm_kw(shift, scale))
              for st, t in zip(states, thetas)]
    history = RunHistory(np.array(losses), np.array(theta_dis), rows, rounds_run, converged,
                         time.perf_counter() - t0, dict(network.counts))
    return models, history


def _norm_kw(shift, scale):
    return {} if shift is None else {"v_shift": shift, "v_scale": scale}


def _max_pairwise(vectors):
    out = 0.0
    for i in range(len(vectors)):
        for j in range(i + 1, len(vectors)):
            out = max(out, float(np.linalg.norm(vectors[i] - vectors[j])))
    return out


def run_centralized_alternating(cfg: TrainConfig, segment: Segment):
    """Single learner alternating a proximal least-squares iteration for the
    matrices with descent steps for the network.

    Written without any graph, weight or message machinery; a one-agent
    distributed run must reproduce its loss trace exactly.
    """
    from scipy.linalg import lu_factor, lu_solve

    theta0 = init_params(cfg.init_seed, hidden=cfg.hidden, n_out=cfg.r)
    theta = theta0.flatten()
    adam = AdamState.fresh(theta.size, lr=cfg.lr)
    X, Xbar, U = segment_arrays(segment)
    r, m, n = cfg.r, U.shape[0], X.shape[0]
    rng = np.random.default_rng([cfg.matrix_seed, 0])
    Mt = rng.standard_normal((r + m, r))
    E = rng.standard_normal((r + m, r))
    Ct = rng.standard_normal((r, n))
    Eh = rng.standard_normal((r, n))
    c = cfg.c
    losses = []
    steps = 0
    done = False
    for _ in range(cfg.rounds):
        p = theta0.like(theta)
        G, Gbar = lift_batch(p, X), lift_batch(p, Xbar)
        Nm = np.vstack([G, U])
        I1, I2 = np.eye(r + m), np.eye(r)
        F = lu_factor(np.block([[I1 + c * (Nm @ Nm.T), I1], [-I1, I1]]))
        Fh = lu_factor(np.block([[I2 + c * (G @ G.T), I2], [-I2, I2]]))
        hM, hC = c * (Nm @ Gbar.T), c * (G @ X.T)
        for _ in range(cfg.S):
            sol = lu_solve(F, np.vstack([Mt + E + hM, -Mt + E]))
            solh = lu_solve(Fh, np.vstack([Ct + Eh + hC, -Ct + Eh]))
            Mt, E, Ct, Eh = sol[:r + m], sol[r + m:], solh[:r], solh[r:]
        M, C = Mt.T.copy(), Ct.T.copy()
        for _ in range(cfg.S_bar):
            loss, grad = loss_and_grad(theta0.like(theta), M, C, X, Xbar, U)
            adam, d = _theta_step(adam, grad, cfg.optimizer)
            theta = theta - cfg.lr * d
            losses.append(loss)
            steps += 1
            if loss < cfg.threshold or steps >= cfg.max_theta_steps:
                done = True
                break
        if done:
            break
    return KoopmanModel.from_M(Mt.T, Ct.T, theta0.like(theta)), np.array(losses)


@dataclass
class BaselineResult:
    model: object
    losses: np.ndarray
    converged: bool


def _full_segment(traj, train_end):
    return Segment(agent_id=1, start=0, states=traj.states[:train_end + 1], inputs=traj.inputs[:train_end])


def train_dko_centralized(traj, cfg: TrainConfig, train_end: int = 4000) -> BaselineResult:
    """Joint Adam descent on the network and ``A, B, C`` over the whole training slice.

    Uses the same initial network as the distributed learner. With
    ``dko_init="lstsq"`` the matrices start at the least-squares optimum for
    that network.
    """
    seg = _full_segment(traj, train_end)
    shift, scale = _normalization([seg], cfg.normalize)
    X, Xbar, U = segment_arrays(seg, shift, scale)
    theta0 = init_params(cfg.init_seed, hidden=cfg.hidden, n_out=cfg.r)
    r, m, n = cfg.r, U.shape[0], X.shape[0]
    if cfg.dko_init == "lstsq":
        M, C = cons.centralized_ls_oracle([build_data_matrices(seg, theta0, shift, scale)])
    else:
        rng = np.random.default_rng([cfg.matrix_seed, 0])
        M = rng.standard_normal((r, r + m))
        C = rng.standard_normal((n, r))
    p = theta0.size
    vec = np.concatenate([theta0.flatten(), M.ravel(), C.ravel()])
    adam = AdamState.fresh(vec.size, lr=cfg.lr)
    losses = []
    converged = False
    for _ in range(cfg.baseline_steps):
        th = theta0.like(vec[:p])
        Mk = vec[p:p + M.size].reshape(M.shape)
        Ck = vec[p + M.size:].reshape(C.shape)
        loss, g_t, g_M, g_C = koopman_loss_grads(th, Mk, Ck, X, Xbar, U)
        losses.append(loss)
        if loss < cfg.threshold:
            converged = True
            break
        adam, d = adam_direction(adam, np.concatenate([g_t, g_M.ravel(), g_C.ravel()]))
        vec = vec - cfg.lr * d
    model = KoopmanModel.from_M(vec[p:p + M.size].reshape(M.shape), vec[p + M.size:].reshape(C.shape),
                                theta0.like(vec[:p]), **_norm_kw(shift, scale))
    return BaselineResult(model, np.array(losses), converged)


@dataclass
class MlpBaselineModel:
    """Direct regressor ``v+ = net([v; u])``."""

    theta: MlpParams

    def predict_batch(self, V, U):
        return lift_batch(self.theta, np.vstack([V, U]))


def train_mlp_baseline(traj, cfg: TrainConfig, train_end: int = 4000, zero_output: bool = False) -> BaselineResult:
    V = traj.states[:train_end + 1, VEL].T
    Z = np.vstack([V[:, :-1], traj.inputs[:train_end].T])
    Y = V[:, 1:]
    theta = init_params(cfg.init_seed, n_in=Z.shape[0], hidden=cfg.hidden, n_out=Y.shape[0],
                        zero_output=zero_output)
    vec = theta.flatten()
    adam = AdamState.fresh(vec.size, lr=cfg.lr)
    losses = []
    converged = False
    for _ in range(cfg.baseline_steps):
        loss, grad = regression_loss_and_grad(theta.like(vec), Z, Y)
        losses.append(loss)
        if loss < cfg.threshold:
            converged = True
            break
        adam, d = adam_direction(adam, grad)
        vec = vec - cfg.lr * d
    return BaselineResult(MlpBaselineModel(theta.like(vec)), np.array(losses), converged)


def save_mlp(path, model: MlpBaselineModel, meta=None):
    from . import checkpoint
    t = model.theta
    checkpoint.write(path, {"W1": t.W1, "b1": t.b1, "W2": t.W2, "b2": t.b2}, {"kind": "mlp", **(meta or {})})


def load_any_model(path):
    """Load a Koopman or MLP checkpoint, dispatching on its ``kind`` tag."""
    from . import checkpoint
    from .koopman import load_model
    arrays, meta = checkpoint.read(path)
    if meta.get("kind") == "mlp":
        return MlpBaselineModel(MlpParams(arrays["W1"], arrays["b1"], arrays["W2"], arrays["b2"]))
    return load_model(path)


# -- metrics -----------------------------------------------------------------

def holdout_slice(traj, start: int = 4000, end: int = 5000):
    """``(V, U, V_next)`` column batches for transitions ``start <= t < end``."""
    V = traj.states[start:end + 1, VEL].T
    return V[:, :-1], traj.inputs[start:end].T, V[:, 1:]


def one_step_predictions(model, V, U) -> np.ndarray:
    if isinstance(model, KoopmanModel):
        from .koopman import predict_batch
        return predict_batch(model, V, U)
    if hasattr(model, "predict_batch"):
        return model.predict_batch(V, U)
    return np.asarray(model(V, U), dtype=float)


def prediction_error(models, V, U, V_next) -> float:
    """Mean over models and time of the squared one-step prediction error."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    errs = [np.mean(np.sum((one_step_predictions(mdl, V, U) - V_next) ** 2, axis=0)) for mdl in models]
    return float(np.mean(errs))


@dataclass
class MetricsReport:
    rows: list
    summary: dict

    def write_csv(self, path, meta=None):
        with open(path, "w", newline="") as fh:
            for key in sorted(meta or {}):
                fh.write(f"# {key}={meta[key]}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "run", "metric"])
            for method, run, val in self.rows:
                w.writerow([method, run, f"{val:.17g}"])
            for method, (mean, std) in self.summary.items():
                w.writerow([method, "summary", f"{mean:.17g}±{std:.17g}"])


def evaluate_metrics(models_by_method: dict, test_data) -> MetricsReport:
    """One-step test error per method and run.

    ``models_by_method`` maps a method name to a list over runs; each run
    entry is a single model or a list of per-agent models, in which case the
    agent errors are averaged. The summary holds the mean and the population
    standard deviation across runs.
    """
    V, U, V_next = test_data
    rows, summary = [], {}
    for method, runs in models_by_method.items():
        vals = [prediction_error(run_models, V, U, V_next) for run_models in runs]
        rows.extend((method, j, v) for j, v in enumerate(vals))
        summary[method] = (float(np.mean(vals)), float(np.std(vals)))
    return MetricsReport(rows, summary)


def read_metrics_csv(path):
    rows, summary = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)
        for method, run, metric in reader:
            if run == "summary":
                mean, _, std = metric.partition("±")
                summary[method] = (float(mean), float(std))
            else:
                rows.append((method, int(run), float(metric)))
    return MetricsReport(rows, summary)
