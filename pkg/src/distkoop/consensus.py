"""Distributed update rules for the Koopman matrices and the lifting network.

Two rounds are provided, both synchronous: every agent publishes a message
built from its iterate at round ``s``, a :class:`Network` hands each agent the
messages of its neighbours (itself included), and each agent then computes
its round ``s+1`` iterate from those messages plus its private data.

Matrix round (per agent ``i``, transposed unknowns ``Mt = M_i'``)::

    F_i [Mt+; E+] = [d_i Mt + sum_j w_ij E_j + c N_i Gbar_i' ; -sum_j w_ij Mt_j + d_i E_i]
    F_i = [[d_i I + c N_i N_i', d_i I], [-d_i I, d_i I]]     (I of size r+m)

and the same form for ``Ct = C_i'`` with ``G_i G_i'`` and ``c G_i X_i'``
(identity of size r). At a fixed point the ``Mt_i`` agree and their common
value solves the pooled normal equations ``sum_i (N_i N_i' Mt - N_i Gbar_i') = 0``.

Parameter round::

    theta_i+ = sum_j what_ij theta_j - alpha_i step_i

where ``step_i`` is the raw gradient (plain subgradient method) or an Adam
direction.
"""

import csv
from dataclasses import dataclass, fields, replace
from itertools import combinations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import NonFiniteState, SingularBlockSystem


@dataclass(frozen=True)
class MatrixMessage:
    sender: int
    Mt: np.ndarray
    E: np.ndarray
    Ct: np.ndarray
    Eh: np.ndarray


@dataclass(frozen=True)
class ThetaMessage:
    sender: int
    theta: np.ndarray


MESSAGE_TYPES = (MatrixMessage, ThetaMessage)


def message_payload_fields():
    """Field names each message type may carry, keyed by type name."""
    return {cls.__name__: tuple(f.name for f in fields(cls)) for cls in MESSAGE_TYPES}


class Network:
    """Synchronous neighbour-only message delivery.

    Rejects anything that is not a declared message type, so private data
    cannot leave an agent through this channel. With ``record=True`` every
    delivered message is kept in ``log`` for auditing.
    """

    def __init__(self, graph, record=False):
        self.graph = graph
        self.record = record
        self.log = []
        self.counts = {cls.__name__: 0 for cls in MESSAGE_TYPES}
        self._neighbors = [graph.neighbors(i) for i in range(graph.n_agents)]

    def exchange(self, outgoing):
        if len(outgoing) != self.graph.n_agents:
            raise ValueError("one outgoing message per agent is required")
        for i, msg in enumerate(outgoing):
            if type(msg) not in MESSAGE_TYPES:
                raise TypeError(f"agent {i} tried to send a {type(msg).__name__}")
            if msg.sender != i:
                raise ValueError(f"message from slot {i} claims sender {msg.sender}")
            self.counts[type(msg).__name__] += 1
            if self.record:
                self.log.append(msg)
        return [{j: outgoing[j] for j in nb} for nb in self._neighbors]


@dataclass(frozen=True)
class MatrixConsensusState:
    """One agent's matrix iterates, auxiliaries and factorized block systems.

    ``rhs_M``/``rhs_C`` and the factorizations are derived from the agent's
    private data and never appear in a message.
    """

    agent: int
    d: float
    c: float
    Mt: np.ndarray
    E: np.ndarray
    Ct: np.ndarray
    Eh: np.ndarray
    F_lu: tuple
    Fh_lu: tuple
    rhs_M: np.ndarray
    rhs_C: np.ndarray

    @property
    def M(self) -> np.ndarray:
        return self.Mt.T

    @property
    def C(self) -> np.ndarray:
        return self.Ct.T

    def message(self) -> MatrixMessage:
        return MatrixMessage(self.agent, self.Mt, self.E, self.Ct, self.Eh)


def block_system(H, d: float, c: float) -> np.ndarray:
    """``[[d I + c H, d I], [-d I, d I]]`` for a square Gram matrix ``H``."""
    k = H.shape[0]
    eye = np.eye(k)
    return np.block([[d * eye + c * H, d * eye], [-d * eye, d * eye]])


def _factor(F, what, agent):
    if not np.all(np.isfinite(F)):
        raise SingularBlockSystem(f"agent {agent}: {what} has non-finite entries")
    lu, piv = lu_factor(F, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= np.finfo(float).eps * diag.max() * F.shape[0]:
        raise SingularBlockSystem(f"agent {agent}: {what} is numerically singular")
    return lu, piv


def _data_terms(dm, d, c, agent):
    N = dm.N
    F = block_system(N @ N.T, d, c)
    Fh = block_system(dm.G @ dm.G.T, d, c)
    return (_factor(F, "F", agent), _factor(Fh, "F_hat", agent),
            c * (N @ dm.Gbar.T), c * (dm.G @ dm.X.T))


def build_consensus_state(dm, c: float, weights, agent: int, init_seed: int = 0) -> MatrixConsensusState:
    """Initial state for ``agent`` with standard-normal iterates.

    ``weights`` is a :class:`~distkoop.graph.ConsensusWeights`; only the
    agent's row sum ``d`` enters its block systems.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    r = dm.G.shape[0]
    k = r + dm.U.shape[0]
    n = dm.X.shape[0]
    rng = np.random.default_rng([init_seed, agent])
    Mt = rng.standard_normal((k, r))
    E = rng.standard_normal((k, r))
    Ct = rng.standard_normal((r, n))
    Eh = rng.standard_normal((r, n))
    d = float(weights.d[agent])
    F_lu, Fh_lu, rhs_M, rhs_C = _data_terms(dm, d, c, agent)
    return MatrixConsensusState(agent, d, c, Mt, E, Ct, Eh, F_lu, Fh_lu, rhs_M, rhs_C)


def with_data(state: MatrixConsensusState, dm) -> MatrixConsensusState:
    """Keep the iterates, rebuild everything derived from the data."""
    F_lu, Fh_lu, rhs_M, rhs_C = _data_terms(dm, state.d, state.c, state.agent)
    return replace(state, F_lu=F_lu, Fh_lu=Fh_lu, rhs_M=rhs_M, rhs_C=rhs_C)


def agent_matrix_update(state: MatrixConsensusState, inbox: dict, w_row) -> MatrixConsensusState:
    sum_E = 0.0
    sum_Mt = 0.0
    sum_Eh = 0.0
    sum_Ct = 0.0
    for j, msg in inbox.items():
        w = w_row[j]
        sum_E = sum_E + w * msg.E
        sum_Mt = sum_Mt + w * msg.Mt
        sum_Eh = sum_Eh + w * msg.Eh
        sum_Ct = sum_Ct + w * msg.Ct
    d = state.d
    k = state.Mt.shape[0]
    sol = lu_solve(state.F_lu, np.vstack([d * state.Mt + sum_E + state.rhs_M, -sum_Mt + d * state.E]),
                   check_finite=False)
    r = state.Ct.shape[0]
    solh = lu_solve(state.Fh_lu, np.vstack([d * state.Ct + sum_Eh + state.rhs_C, -sum_Ct + d * state.Eh]),
                    check_finite=False)
    if not (np.all(np.isfinite(sol)) and np.all(np.isfinite(solh))):
        raise NonFiniteState(f"agent {state.agent}: matrix iterate diverged")
    return replace(state, Mt=sol[:k], E=sol[k:], Ct=solh[:r], Eh=solh[r:])


def matrix_update_round(states, graph, weights, network=None) -> list:
    """One synchronous round of the matrix consensus update for every agent."""
    network = network or Network(graph)
    inboxes = network.exchange([s.message() for s in states])
    return [agent_matrix_update(s, inboxes[i], weights.w[i]) for i, s in enumerate(states)]


def disagreement(states):
    """Largest pairwise Frobenius distance between agents' ``M`` and ``C``."""
    dm = dc = 0.0
    for a, b in combinations(states, 2):
        dm = max(dm, float(np.linalg.norm(a.Mt - b.Mt)))
        dc = max(dc, float(np.linalg.norm(a.Ct - b.Ct)))
    return dm, dc


def centralized_ls_oracle(all_dm, weighting: str = "uniform"):
    """Pooled least-squares ``(M*, C*)`` for a fixed lifting network.

    ``weighting="per-agent"`` scales each agent's columns by ``1/sqrt(T_i)``
    so that every agent's loss counts with its ``1/(2 T_i)`` factor;
    ``"uniform"`` concatenates the raw columns, which is what the matrix
    update rule converges to. Rank-deficient problems get the minimum-norm
    solution.
    """
    if weighting not in ("uniform", "per-agent"):
        raise ValueError(f"unknown weighting {weighting!r}")
    Ns, Gbs, Gs, Xs = [], [], [], []
    for dm in all_dm:
        s = 1.0 / np.sqrt(dm.T) if weighting == "per-agent" else 1.0
        Ns.append(s * dm.N)
        Gbs.append(s * dm.Gbar)
        Gs.append(s * dm.G)
        Xs.append(s * dm.X)
    N = np.hstack(Ns)
    G = np.hstack(Gs)
    Mt = np.linalg.lstsq(N.T, np.hstack(Gbs).T, rcond=None)[0]
    Ct = np.linalg.lstsq(G.T, np.hstack(Xs).T, rcond=None)[0]
    return Mt.T, Ct.T


def agent_theta_update(theta, inbox: dict, w_hat_row, alpha: float, step) -> np.ndarray:
    acc = np.zeros_like(theta)
    for j, msg in inbox.items():
        acc = acc + w_hat_row[j] * msg.theta
    return acc - alpha * step


def theta_mixing_round(thetas, steps, w_hat, alpha, graph=None, network=None) -> list:
    """One synchronous neighbour-averaging plus descent step for every agent.

    Parameters
    ----------
    thetas : list of ndarray
        Flat parameter vectors at round ``s``.
    steps : list of ndarray
        Per-agent descent directions (gradients, or Adam directions).
    w_hat : MixingWeights or ndarray
        Doubly stochastic mixing matrix.
    alpha : float or sequence of float
        Learning rate, shared or per agent.
    graph : Graph, optional
        Topology; inferred from the support of ``w_hat`` when omitted.
    """
    W = getattr(w_hat, "w_hat", w_hat)
    n = len(thetas)
    alphas = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
    if network is None:
        if graph is None:
            from .graph import build_graph
            edges = [(i + 1, j + 1) for i in range(n) for j in range(i + 1, n) if W[i, j] > 0]
            graph = build_graph(n, edges)
        network = Network(graph)
    inboxes = network.exchange([ThetaMessage(i, np.asarray(t)) for i, t in enumerate(thetas)])
    out = []
    for i in range(n):
        new = agent_theta_update(thetas[i], inboxes[i], W[i], alphas[i], steps[i])
        if not np.all(np.isfinite(new)):
            raise NonFiniteState(f"agent {i}: parameter iterate diverged")
        out.append(new)
    return out


ROUND_HISTORY_HEADER = ["s", "disagreement_M", "disagreement_C", "dist_to_oracle_M",
                        "dist_to_oracle_C", "mean_local_loss"]


def run_matrix_consensus(all_dm, graph, weights, c=1.0, rounds=1000, init_seed=0,
                         oracle=None, log_every=1, states=None):
    """Iterate the matrix round with a frozen network and collect a history.

    Returns the final states and a list of history rows keyed by
    ``ROUND_HISTORY_HEADER``; oracle distances are relative Frobenius errors
    (max over agents) and are NaN when no oracle is supplied.
    """
    from .koopman import local_loss

    network = Network(graph)
    if states is None:
        states = [build_consensus_state(dm, c, weights, i, init_seed) for i, dm in enumerate(all_dm)]
    history = []

    def log(s):
        dM, dC = disagreement(states)
        if oracle is not None:
            Ms, Cs = oracle
            eM = max(np.linalg.norm(st.M - Ms) for st in states) / np.linalg.norm(Ms)
            eC = max(np.linalg.norm(st.C - Cs) for st in states) / np.linalg.norm(Cs)
        else:
            eM = eC = float("nan")
        r = states[0].Ct.shape[0]
        loss = np.mean([local_loss(st.M[:, :r], st.M[:, r:], st.C, dm) for st, dm in zip(states, all_dm)])
        history.append(dict(s=s, disagreement_M=dM, disagreement_C=dC, dist_to_oracle_M=float(eM),
                            dist_to_oracle_C=float(eC), mean_local_loss=float(loss)))

    if log_every:
        log(0)
    for s in range(1, rounds + 1):
        states = matrix_update_round(states, graph, weights, network)
        if log_every and (s % log_every == 0 or s == rounds):
            log(s)
    return states, history


def write_round_history(path, history, meta=None, extra_columns=()):
    with open(path, "w", newline="") as fh:
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        cols = ROUND_HISTORY_HEADER + list(extra_columns)
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
