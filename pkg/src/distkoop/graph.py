"""Communication topology and the two weight families used by the agents.

Agents are 1-indexed wherever a human or a file sees them and 0-indexed
everywhere else. ``build_graph`` is the only place the conversion happens.
"""

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DisconnectedGraph, IndexOutOfRange


@dataclass(frozen=True)
class Graph:
    """Undirected, connected graph with implicit self-arcs.

    ``edges`` holds 0-indexed pairs ``(i, j)`` with ``i < j``.
    """

    n_agents: int
    edges: frozenset

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        a.flags.writeable = False
        return a

    def degree(self, i: int) -> int:
        """Number of neighbours of ``i``, self excluded."""
        return int(self.adjacency[i].sum())

    def neighbors(self, i: int) -> tuple:
        """Neighbour set of ``i`` including ``i`` itself, sorted."""
        idx = set(np.flatnonzero(self.adjacency[i]).tolist())
        idx.add(i)
        return tuple(sorted(idx))

    def edge_list_one_indexed(self) -> list:
        return sorted([i + 1, j + 1] for i, j in self.edges)


def _is_connected(n, adjacency):
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adjacency[i]):
            j = int(j)
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == n


def build_graph(n_agents: int, edges) -> Graph:
    """Build a validated graph from 1-indexed edge pairs.

    Parameters
    ----------
    n_agents : int
        Number of agents, at least 1.
    edges : iterable of pairs
        Unordered agent pairs, 1-indexed. Duplicates and both orientations
        are accepted. Self-loops are rejected since every node already
        neighbours itself.

    Raises
    ------
    IndexOutOfRange
        If an endpoint falls outside ``[1, n_agents]`` or a self-loop is given.
    DisconnectedGraph
        If some pair of agents has no connecting path.
    """
    if int(n_agents) != n_agents or n_agents < 1:
        raise IndexOutOfRange(f"n_agents must be a positive integer, got {n_agents!r}")
    n_agents = int(n_agents)
    norm = set()
    for pair in edges:
        if len(pair) != 2:
            raise IndexOutOfRange(f"edge {pair!r} is not a pair")
        i, j = (int(v) for v in pair)
        for v in (i, j):
            if not 1 <= v <= n_agents:
                raise IndexOutOfRange(f"edge {pair!r}: endpoint {v} not in [1, {n_agents}]")
        if i == j:
            raise IndexOutOfRange(f"edge {pair!r}: self-arcs are implicit, do not list them")
        i, j = i - 1, j - 1
        norm.add((min(i, j), max(i, j)))
    g = Graph(n_agents, frozenset(norm))
    if not _is_connected(n_agents, g.adjacency):
        raise DisconnectedGraph(f"graph on {n_agents} agents with edges {sorted(norm)} is not connected")
    return g


def ring_graph(n_agents: int) -> Graph:
    """Cycle 1-2-...-N-1 (a path for N=2, a single node for N=1)."""
    if n_agents <= 2:
        edges = [(1, 2)] if n_agents == 2 else []
    else:
        edges = [(k, k % n_agents + 1) for k in range(1, n_agents + 1)]
    return build_graph(n_agents, edges)


@dataclass(frozen=True)
class ConsensusWeights:
    """Symmetric weights ``w`` for the matrix updates and row sums ``d``."""

    w: np.ndarray
    d: np.ndarray


@dataclass(frozen=True)
class MixingWeights:
    """Doubly stochastic mixing matrix for the parameter averaging step."""

    w_hat: np.ndarray


def _support(g):
    return g.adjacency | np.eye(g.n_agents, dtype=bool)


def uniform_consensus_weights(g: Graph) -> ConsensusWeights:
    w = _support(g).astype(float)
    return ConsensusWeights(w=w, d=w.sum(axis=1))


def metropolis_weights(g: Graph) -> MixingWeights:
    """Metropolis-Hastings weights, doubly stochastic on any connected graph."""
    n = g.n_agents
    deg = g.adjacency.sum(axis=1)
    w = np.zeros((n, n))
    for i, j in g.edges:
        w[i, j] = w[j, i] = 1.0 / (1.0 + max(deg[i], deg[j]))
    for i in range(n):
        w[i, i] = 1.0 - (w[i].sum() - w[i, i])
    return MixingWeights(w_hat=w)


def uniform_row_weights(g: Graph) -> MixingWeights:
    """Equal weight ``1/|N_i|`` on every neighbour (self included).

    Only doubly stochastic when every node has the same degree, so irregular
    graphs are rejected.
    """
    deg = g.adjacency.sum(axis=1)
    if np.any(deg != deg[0]):
        raise ValueError("uniform-rows mixing requires a regular graph; use metropolis")
    s = _support(g).astype(float)
    return MixingWeights(w_hat=s / s.sum(axis=1, keepdims=True))


def mixing_weights(g: Graph, mode: str = "metropolis") -> MixingWeights:
    if mode == "metropolis":
        return metropolis_weights(g)
    if mode == "uniform-rows":
        return uniform_row_weights(g)
    raise ValueError(f"unknown mixing mode {mode!r}")


def second_largest_eigenvalue_modulus(w_hat: np.ndarray) -> float:
    """Second-largest eigenvalue magnitude; below one means averaging converges."""
    mags = np.sort(np.abs(np.linalg.eigvals(w_hat)))[::-1]
    return float(mags[1]) if len(mags) > 1 else 0.0
