"""Static graphs, Markov-evolving dynamic graphs and their averaged walk chain."""
from __future__ import annotations

import bisect
import json
import random
from collections import deque
from dataclasses import dataclass, field
from itertools import accumulate
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROW_TOL = 1e-12
DIRECT_SOLVE_MAX_STATES = 64
POWER_ITER_CAP = 10**6


class GraphError(ValueError):
    pass


class StationaryError(RuntimeError):
    pass


def _edge(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class StaticGraph:
    """Simple undirected graph on nodes ``0..n-1``."""

    n: int
    edges: frozenset[tuple[int, int]]
    _nbrs: tuple[tuple[int, ...], ...] = field(repr=False, compare=False)
    _nbr_sets: tuple[frozenset[int], ...] = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]]) -> "StaticGraph":
        if n < 1:
            raise GraphError("graph needs at least one node")
        es = set()
        for e in edges:
            i, j = int(e[0]), int(e[1])
            if i == j:
                raise GraphError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i}, {j}) outside node range 0..{n - 1}")
            key = _edge(i, j)
            if key in es:
                raise GraphError(f"parallel edge {key}")
            es.add(key)
        adj: list[set[int]] = [set() for _ in range(n)]
        for i, j in es:
            adj[i].add(j)
            adj[j].add(i)
        return cls(
            n=n,
            edges=frozenset(es),
            _nbrs=tuple(tuple(sorted(a)) for a in adj),
            _nbr_sets=tuple(frozenset(a) for a in adj),
        )

    @property
    def m(self) -> int:
        return len(self.edges)

    def neighbors(self, i: int) -> tuple[int, ...]:
        """Sorted neighbor tuple (sorted so random choices are reproducible)."""
        return self._nbrs[i]

    def neighbor_set(self, i: int) -> frozenset[int]:
        return self._nbr_sets[i]

    def degree(self, i: int) -> int:
        return len(self._nbrs[i])

    def has_edge(self, i: int, j: int) -> bool:
        return j in self._nbr_sets[i]

    def without_edge(self, i: int, j: int) -> "StaticGraph":
        key = _edge(i, j)
        if key not in self.edges:
            raise GraphError(f"no edge {key} to remove")
        return StaticGraph.from_edges(self.n, self.edges - {key})

    def with_edge(self, i: int, j: int) -> "StaticGraph":
        return StaticGraph.from_edges(self.n, set(self.edges) | {_edge(i, j)})

    def walk_matrix(self) -> np.ndarray:
        """Simple random walk matrix; an isolated node keeps the walker (self-loop)."""
        P = np.zeros((self.n, self.n))
        for i, nb in enumerate(self._nbrs):
            if nb:
                P[i, list(nb)] = 1.0 / len(nb)
            else:
                P[i, i] = 1.0
        return P

    def to_dict(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in sorted(self.edges)]}


@dataclass(frozen=True)
class GraphDiagnostics:
    connected: bool
    bipartite: bool
    components: int


def validate_graph(g: StaticGraph) -> GraphDiagnostics:
    """BFS connectivity plus 2-coloring. Bipartite graphs do not guarantee token meeting."""
    color = [-1] * g.n
    bipartite = True
    components = 0
    for s in range(g.n):
        if color[s] != -1:
            continue
        components += 1
        color[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for v in g.neighbors(u):
                if color[v] == -1:
                    color[v] = 1 - color[u]
                    q.append(v)
                elif color[v] == color[u]:
                    bipartite = False
    return GraphDiagnostics(connected=components == 1, bipartite=bipartite, components=components)


@dataclass(frozen=True, eq=False)
class DynamicGraphProcess:
    """Finite set of topologies over one node set, switching as a homogeneous Markov chain."""

    states: tuple[StaticGraph, ...]
    transitions: np.ndarray
    _cum_rows: tuple[tuple[float, ...], ...] = field(repr=False, compare=False)

    def __init__(self, states: Sequence[StaticGraph], transitions):
        states = tuple(states)
        T = np.array(transitions, dtype=float)
        if not states:
            raise GraphError("process needs at least one graph state")
        if T.shape != (len(states), len(states)):
            raise GraphError(f"transition matrix shape {T.shape} does not match {len(states)} states")
        if len({s.n for s in states}) != 1:
            raise GraphError("all graph states must share the same node count")
        if (T < 0).any() or np.abs(T.sum(axis=1) - 1.0).max() > ROW_TOL:
            raise GraphError("transition rows must be non-negative and sum to 1")
        T.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "transitions", T)
        object.__setattr__(self, "_cum_rows", tuple(tuple(accumulate(row)) for row in T.tolist()))

    @classmethod
    def static(cls, g: StaticGraph) -> "DynamicGraphProcess":
        return cls([g], [[1.0]])

    @property
    def n(self) -> int:
        return self.states[0].n

    def __len__(self) -> int:
        return len(self.states)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "states": [s.to_dict() for s in self.states],
            "transitions": self.transitions.tolist(),
        }


@dataclass(frozen=True, eq=False)
class GraphDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if (w < 0).any() or abs(w.sum() - 1.0) > ROW_TOL:
            raise GraphError("distribution weights must be non-negative and sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __getitem__(self, k):
        return self.weights[k]

    def __len__(self):
        return len(self.weights)


def _reachable_from(T: np.ndarray, start: int) -> list[int]:
    seen = {start}
    q = deque([start])
    while q:
        u = q.popleft()
        for v in np.nonzero(T[u] > 0)[0]:
            v = int(v)
            if v not in seen:
                seen.add(v)
                q.append(v)
    return sorted(seen)


def stationary_distribution(p: DynamicGraphProcess) -> GraphDistribution:
    """Stationary law of the topology chain, restricted to states reachable from state 0.

    Up to 64 states the balance equations are solved directly (one equation
    replaced by normalization); larger chains use power iteration.
    """
    T = p.transitions
    R = _reachable_from(T, 0)
    Q = T[np.ix_(R, R)]
    k = len(R)
    if k <= DIRECT_SOLVE_MAX_STATES:
        A = Q.T - np.eye(k)
        A[-1, :] = 1.0
        b = np.zeros(k)
        b[-1] = 1.0
        try:
            pi_r = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise StationaryError("no unique stationary distribution") from exc
    else:
        pi_r = np.full(k, 1.0 / k)
        for _ in range(POWER_ITER_CAP):
            nxt = pi_r @ Q
            if np.abs(nxt - pi_r).max() <= ROW_TOL:
                pi_r = nxt
                break
            pi_r = nxt
        else:
            raise StationaryError("no unique stationary distribution (power iteration did not converge)")
    if (pi_r < -1e-10).any():
        raise StationaryError("no unique stationary distribution")
    pi_r = np.clip(pi_r, 0.0, None)
    pi_r /= pi_r.sum()
    if np.abs(pi_r @ Q - pi_r).max() > 1e-10:
        raise StationaryError("no unique stationary distribution (residual too large)")
    pi = np.zeros(len(p))
    pi[R] = pi_r
    return GraphDistribution(pi)


def averaged_transition_matrix(p: DynamicGraphProcess, pi: GraphDistribution) -> np.ndarray:
    """Walk matrix averaged over topologies: ``sum_G pi(G) * P(G)``."""
    if len(pi) != len(p):
        raise GraphError(f"distribution has {len(pi)} weights for {len(p)} states")
    P = np.zeros((p.n, p.n))
    for w, g in zip(pi.weights, p.states):
        if w > 0:
            P += w * g.walk_matrix()
    return P


def sample_next_graph(p: DynamicGraphProcess, current: int, rng) -> int:
    """Draw the next topology index from row ``current``. ``rng`` needs a ``random()`` method."""
    cum = p._cum_rows[current]
    if len(cum) == 1:
        return 0
    k = bisect.bisect_right(cum, rng.random())
    # guard against the last cumulative sum landing a hair below 1.0
    return min(k, len(cum) - 1)


# -- serialization ---------------------------------------------------------

def graph_from_dict(d: dict) -> StaticGraph:
    try:
        return StaticGraph.from_edges(int(d["n"]), d["edges"])
    except (KeyError, TypeError) as exc:
        raise GraphError(f"malformed graph description: {exc}") from exc


def process_from_dict(d: dict) -> DynamicGraphProcess:
    """Accept either a plain graph ``{"n", "edges"}`` or a process with ``states``/``transitions``."""
    if "states" in d:
        states = [graph_from_dict({"n": s.get("n", d.get("n")), "edges": s["edges"]}) for s in d["states"]]
        if "transitions" not in d:
            raise GraphError("dynamic process requires 'transitions'")
        return DynamicGraphProcess(states, d["transitions"])
    return DynamicGraphProcess.static(graph_from_dict(d))


def load_process(path: str | Path) -> DynamicGraphProcess:
    with open(path) as fh:
        return process_from_dict(json.load(fh))


# -- named families used as fixtures -----------------------------------------

def path_graph(n: int) -> StaticGraph:
    return StaticGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def cycle_graph(n: int) -> StaticGraph:
    if n < 3:
        raise GraphError("cycle needs n >= 3")
    return StaticGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def complete_graph(n: int) -> StaticGraph:
    return StaticGraph.from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def random_connected_graph(n: int, extra_p: float, rng: random.Random) -> StaticGraph:
    """Random spanning tree plus each remaining pair independently with prob ``extra_p``."""
    order = list(range(n))
    rng.shuffle(order)
    edges = {_edge(order[k], order[rng.randrange(k)]) for k in range(1, n)}
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in edges and rng.random() < extra_p:
                edges.add((i, j))
    return StaticGraph.from_edges(n, edges)
