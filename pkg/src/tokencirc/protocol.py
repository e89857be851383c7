"""Per-node state machine of the token circulation protocol.

Rules, as applied at node ``i``:

* R1 -- one or more tokens received: stamp, merge, maybe launch a reloading
  wave, forward to a random neighbor, reset the timer.
* R2 -- timer expired: create an empty token and forward it.
* R3 -- reloading wave received: relay to tree children, reset the timer.
* R4 -- clock tick: decrement the timer.

Everything here is a pure function over immutable values; the simulator owns
scheduling and randomness.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .graph import StaticGraph

Table = tuple  # tuple[Optional[int], ...]; None is the undefined entry


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolParams:
    capacity: int
    timeout: int

    def __post_init__(self):
        if self.capacity < 1:
            raise ProtocolError("capacity must be >= 1")
        if self.timeout <= self.capacity + 1:
            raise ProtocolError(
                f"T_m must exceed capacity+1 (got T_m={self.timeout}, capacity={self.capacity})"
            )

    @property
    def wave_threshold(self) -> int:
        """Hop count at which the holder launches a wave: ``T_m - (capacity + 1)``."""
        return self.timeout - (self.capacity + 1)


@dataclass(frozen=True, slots=True)
class TokenMsg:
    emitter: int
    recipient: int
    table: Table
    hop: int
    trace_id: int


@dataclass(frozen=True, slots=True)
class WaveMsg:
    sender: int
    recipient: int
    table: Table
    launched: int = -1  # round of the originating R1.c; instrumentation only


@dataclass(frozen=True, slots=True)
class NodeState:
    id: int
    timer: int
    father: Optional[int] = None


@dataclass(frozen=True, slots=True)
class R1Result:
    token: TokenMsg
    waves: list
    node: NodeState
    stalled: bool
    merged: int
    launched: bool = False


def empty_table(capacity: int, owner: int) -> Table:
    t = [None] * capacity
    t[owner] = owner
    return tuple(t)


def merge_tokens(t1: TokenMsg, t2: TokenMsg) -> TokenMsg:
    """Fill t1's undefined entries from t2; hop is the max. t1 keeps its identity."""
    if len(t1.table) != len(t2.table):
        raise ProtocolError(f"table length mismatch: {len(t1.table)} vs {len(t2.table)}")
    table = tuple(a if a is not None else b for a, b in zip(t1.table, t2.table))
    return TokenMsg(t1.emitter, t1.recipient, table, max(t1.hop, t2.hop), t1.trace_id)


def _stamp(t: TokenMsg, i: int) -> TokenMsg:
    table = list(t.table)
    table[t.emitter] = i
    table[i] = i
    return TokenMsg(t.emitter, t.recipient, tuple(table), t.hop + 1, t.trace_id)


def wave_children(table: Table, i: int) -> list[int]:
    """Nodes registered with ``i`` as their father, excluding ``i`` itself."""
    return [j for j, f in enumerate(table) if f == i and j != i]


def apply_r1(
    node: NodeState,
    received: Sequence[TokenMsg],
    params: ProtocolParams,
    neighbors: Sequence[int],
    rng,
    now: int = -1,
    waves_enabled: bool = True,
) -> R1Result:
    """Receive a non-empty set of tokens.

    ``neighbors`` must be a sorted sequence so that ``rng.choice`` is
    reproducible. With no neighbors the merged token stays at the node
    (``stalled=True``), its hop counter is left as received, and the timer is
    still reset. ``waves_enabled=False`` suppresses R1.c entirely; it exists
    only to exhibit what goes wrong without the reloading wave.
    """
    if not received:
        raise ProtocolError("R1 needs at least one token")
    i = node.id
    ordered = sorted(received, key=lambda t: (t.emitter, t.trace_id))
    if not neighbors:
        merged = ordered[0]
        for t in ordered[1:]:
            merged = merge_tokens(merged, t)
        table = list(merged.table)
        for t in ordered:
            table[t.emitter] = i
        table[i] = i
        held = TokenMsg(i, i, tuple(table), merged.hop, merged.trace_id)
        return R1Result(held, [], NodeState(i, params.timeout, node.father), True, len(ordered) - 1)

    stamped = [_stamp(t, i) for t in ordered]
    merged = stamped[0]
    for t in stamped[1:]:
        merged = merge_tokens(merged, t)
    if len(ordered) > 1:
        # an earlier token's stale entry may hide a later emitter's stamp
        table = list(merged.table)
        for t in ordered:
            table[t.emitter] = i
        merged = TokenMsg(merged.emitter, merged.recipient, tuple(table), merged.hop, merged.trace_id)

    hop = merged.hop
    waves = []
    launched = False
    if waves_enabled and hop >= params.wave_threshold:
        launched = True
        nbrs = set(neighbors)
        waves = [WaveMsg(i, j, merged.table, now) for j in wave_children(merged.table, i) if j in nbrs]
        hop = 0

    dest = rng.choice(neighbors)
    out = TokenMsg(i, dest, merged.table, hop, merged.trace_id)
    return R1Result(out, waves, NodeState(i, params.timeout, dest), False, len(ordered) - 1, launched)


def apply_r2(node: NodeState, params: ProtocolParams, neighbors: Sequence[int], rng, trace_id: int = 0):
    """Timer expired: create a fresh token at the node.

    Returns ``(token, node, stalled)``. On an isolated node the token is held
    (recipient == emitter == node).
    """
    if node.timer != 0:
        raise ProtocolError(f"R2 requires timer 0, node {node.id} has {node.timer}")
    i = node.id
    table = empty_table(params.capacity, i)
    if not neighbors:
        return TokenMsg(i, i, table, 0, trace_id), NodeState(i, params.timeout, node.father), True
    dest = rng.choice(neighbors)
    return TokenMsg(i, dest, table, 0, trace_id), NodeState(i, params.timeout, dest), False


def apply_r3(node: NodeState, w: WaveMsg, params: ProtocolParams, neighbors: Iterable[int]):
    """Relay a reloading wave to the tree children that are still neighbors."""
    i = node.id
    table = list(w.table)
    table[i] = None
    table = tuple(table)
    nbrs = neighbors if isinstance(neighbors, (set, frozenset)) else set(neighbors)
    out = [WaveMsg(i, j, table, w.launched) for j in wave_children(table, i) if j in nbrs]
    return out, NodeState(i, params.timeout, node.father)


def apply_r4(node: NodeState) -> NodeState:
    if node.timer <= 0:
        raise ProtocolError(f"clock tick on node {node.id} with timer {node.timer}; R2 must fire")
    return NodeState(node.id, node.timer - 1, node.father)


def induced_tree(table: Table) -> set[tuple[int, int]]:
    return {(k, f) for k, f in enumerate(table) if f is not None and f != k}


def is_correct(t: TokenMsg | Table, g: StaticGraph) -> bool:
    table = t.table if isinstance(t, TokenMsg) else t
    for k, f in enumerate(table):
        if f is None or f == k:
            continue
        if k >= g.n or f >= g.n or not g.has_edge(k, f):
            return False
    return True


def is_spanning_tree(table: Table, marked: Iterable[int], g: StaticGraph) -> bool:
    """Does the table, restricted to ``marked``, form a spanning tree of the marked nodes?

    Every marked node must either be a root (self entry) or point to a marked
    neighbor; the resulting edges must be acyclic and connect all of ``marked``.
    """
    marked = set(marked)
    if not marked:
        return True
    parent = {v: v for v in marked}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = 0
    for k in marked:
        f = table[k] if k < len(table) else None
        if f is None:
            return False
        if f == k:
            continue
        if f not in marked or not g.has_edge(k, f):
            return False
        a, b = find(k), find(f)
        if a == b:
            return False
        parent[a] = b
        edges += 1
    return edges == len(marked) - 1


def local_detection(node: NodeState, g: StaticGraph) -> bool:
    """True when the last link the node sent the token on has disappeared."""
    return node.father is not None and not g.has_edge(node.id, node.father)
