"""Round-based deterministic execution of the protocol, with fault injection.

One round is the model's time unit: every message sent in round ``r`` is
received and handled in round ``r + 1``. Within a round the order is fixed:

1. scheduled faults, then the topology moves (if link dynamics are on);
   in-flight messages whose link is gone are dropped;
2. reloading-wave messages (R3), one at a time;
3. token messages, all tokens reaching one node handled as one R1 set,
   each in-flight token first surviving loss with probability ``1 - p``;
4. R2 on every idle node whose timer is 0;
5. R4 on every other idle node.
"""
from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .graph import DynamicGraphProcess, StaticGraph, sample_next_graph
from .protocol import (
    NodeState,
    ProtocolParams,
    TokenMsg,
    WaveMsg,
    apply_r1,
    apply_r2,
    apply_r3,
    apply_r4,
    empty_table,
    induced_tree,
    is_correct,
    local_detection,
    wave_children,
)

logger = logging.getLogger(__name__)

FAULT_KINDS = ("delete-token", "duplicate-token", "corrupt-table", "remove-link", "add-link")
TOKEN_FAULTS = ("delete-token", "duplicate-token", "corrupt-table")

NOT_A1, A1, A1_A2, A3, LC = "notA1", "A1", "A1&A2", "A3", "LC"
CLASSES = (NOT_A1, A1, A1_A2, A3, LC)


class ScenarioError(ValueError):
    pass


class FaultError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaultEvent:
    round: int
    kind: str
    target: object = None  # kind-specific: token index, edge pair, or "tree"


@dataclass(frozen=True)
class FaultModel:
    token_loss_p: float = 0.0
    initial_tokens: int = 1
    initial_tables: str = "fresh"  # fresh | random-corrupt
    initial_timers: str = "full"  # full | random
    corrupt_events: tuple[FaultEvent, ...] = ()
    link_dynamics: bool = False

    def __post_init__(self):
        if not 0.0 <= self.token_loss_p <= 1.0:
            raise ScenarioError("token_loss_p must be in [0, 1]")
        if self.initial_tokens < 0:
            raise ScenarioError("initial_tokens must be >= 0")
        if self.initial_tables not in ("fresh", "random-corrupt"):
            raise ScenarioError(f"unknown initial_tables mode {self.initial_tables!r}")
        if self.initial_timers not in ("full", "random"):
            raise ScenarioError(f"unknown initial_timers mode {self.initial_timers!r}")
        for ev in self.corrupt_events:
            if ev.kind not in FAULT_KINDS:
                raise ScenarioError(f"unknown fault kind {ev.kind!r}")
            if ev.round < 0:
                raise ScenarioError("fault rounds must be >= 0")
            if ev.kind in TOKEN_FAULTS and ev.round == 0 and self.initial_tokens == 0:
                raise ScenarioError(f"{ev.kind} at round 0 needs initial_tokens > 0")


@dataclass(frozen=True)
class Scenario:
    process: DynamicGraphProcess
    params: ProtocolParams
    faults: FaultModel = FaultModel()
    horizon: int = 1000
    seed: int = 0
    reload_wave: bool = True  # test switch: False disables R1.c

    def __post_init__(self):
        if self.horizon <= 0:
            raise ScenarioError("horizon must be > 0")
        if self.process.n > self.params.capacity:
            raise ScenarioError(
                f"graph has {self.process.n} nodes but capacity is {self.params.capacity}"
            )


@dataclass
class Configuration:
    """Global snapshot. ``tokens`` and ``waves`` are the messages due in round ``round``."""

    round: int
    graph_state: int
    graph: StaticGraph
    nodes: list[NodeState]
    tokens: list[TokenMsg]
    waves: list[WaveMsg]
    stalled: list[TokenMsg] = field(default_factory=list)
    visited: dict[int, frozenset] = field(default_factory=dict)
    next_trace: int = 0
    r2_total: int = 0

    @property
    def n(self) -> int:
        return len(self.nodes)

    def all_tokens(self) -> list[TokenMsg]:
        return self.tokens + self.stalled

    def token_count(self) -> int:
        return len(self.tokens) + len(self.stalled)

    def copy(self) -> "Configuration":
        return Configuration(
            self.round, self.graph_state, self.graph, list(self.nodes), list(self.tokens),
            list(self.waves), list(self.stalled), dict(self.visited), self.next_trace, self.r2_total,
        )


@dataclass
class RoundEvents:
    r2_creators: list = field(default_factory=list)
    undue: int = 0
    merges: int = 0
    wave_launches: int = 0
    wave_msgs: int = 0
    lost: int = 0
    dropped_tokens: int = 0
    dropped_waves: int = 0
    # (round, sender, child, launched) per wave forward suppressed by a missing link
    blocked_forwards: list = field(default_factory=list)
    token_receivers: list = field(default_factory=list)
    faults: list = field(default_factory=list)
    # local-detection flags right after this round's faults (None if no fault fired)
    detection_after_faults: Optional[tuple] = None


@dataclass(frozen=True)
class Classification:
    label: str
    token_count: int
    a1: bool
    a2: bool
    a3: bool
    detection: tuple  # nodes whose father link is missing


@dataclass
class RunMetrics:
    convergence_round: Optional[int] = None
    r2_creations: int = 0
    merges: int = 0
    wave_launches: int = 0
    legitimacy_timeline: list = field(default_factory=list)
    cover_round: Optional[int] = None
    undue_creations: int = 0
    undue_creations_after_A3: int = 0
    lost_tokens: int = 0
    dropped_tokens: int = 0

    @property
    def lc_fraction(self) -> float:
        tl = self.legitimacy_timeline
        return sum(1 for c in tl if c == LC) / len(tl) if tl else 0.0

    @property
    def stable_from(self) -> Optional[int]:
        """First round after which every round is LC, if the run ends in LC."""
        tl = self.legitimacy_timeline
        if not tl or tl[-1] != LC:
            return None
        k = len(tl) - 1
        while k > 0 and tl[k - 1] == LC:
            k -= 1
        return k


TRACE_COLUMNS = ("round", "class", "token_count", "wave_msgs", "r2_total", "graph_state")


@dataclass
class RunResult:
    metrics: RunMetrics
    trace: list  # rows matching TRACE_COLUMNS
    messages: Optional[list] = None


# -- initialization --------------------------------------------------------

def _random_table(n: int, capacity: int, rng: random.Random) -> tuple:
    t = [None] * capacity
    for k in range(n):
        if rng.random() < 0.5:
            t[k] = rng.randrange(n)
    return tuple(t)


def init_configuration(s: Scenario, rng: random.Random) -> Configuration:
    """Arbitrary start per the fault model: timers, then initial tokens on random links."""
    params, f = s.params, s.faults
    g = s.process.states[0]
    n = g.n
    if f.initial_timers == "full":
        nodes = [NodeState(i, params.timeout) for i in range(n)]
    else:
        nodes = [NodeState(i, rng.randint(0, params.timeout)) for i in range(n)]
    senders = [i for i in range(n) if g.degree(i) > 0]
    if f.initial_tokens and not senders:
        raise ScenarioError("initial tokens need at least one edge")
    tokens = []
    for k in range(f.initial_tokens):
        e = rng.choice(senders)
        r = rng.choice(g.neighbors(e))
        if f.initial_tables == "fresh":
            table, hop = empty_table(params.capacity, e), 0
        else:
            table, hop = _random_table(n, params.capacity, rng), rng.randrange(params.wave_threshold)
        tokens.append(TokenMsg(e, r, table, hop, k))
    visited = {t.trace_id: frozenset() for t in tokens}
    return Configuration(0, 0, g, nodes, tokens, [], [], visited, f.initial_tokens, 0)


# -- fault injection ---------------------------------------------------------

def _tree_edges(c: Configuration) -> list:
    carrying = {(t.emitter, t.recipient) for t in c.tokens} | {(t.recipient, t.emitter) for t in c.tokens}
    out = set()
    for t in c.all_tokens():
        for k, f in induced_tree(t.table):
            if k < c.n and f < c.n and c.graph.has_edge(k, f) and (k, f) not in carrying:
                out.add((min(k, f), max(k, f)))
    return sorted(out)


def inject_fault(c: Configuration, kind: str, rng: random.Random, target=None) -> Configuration:
    """Apply one transient fault; returns a new configuration."""
    if kind not in FAULT_KINDS:
        raise FaultError(f"unknown fault kind {kind!r}")
    c = c.copy()
    n = c.n
    if kind in TOKEN_FAULTS:
        pool = c.all_tokens()
        if not pool:
            raise FaultError(f"{kind}: no token in the configuration")
        idx = target if isinstance(target, int) else rng.randrange(len(pool))
        tok = pool[idx]
        in_flight = idx < len(c.tokens)
        if kind == "delete-token":
            (c.tokens if in_flight else c.stalled).remove(tok)
            c.visited.pop(tok.trace_id, None)
        elif kind == "duplicate-token":
            tid = c.next_trace
            c.next_trace += 1
            nb = c.graph.neighbors(tok.emitter)
            if in_flight and nb:
                dup = TokenMsg(tok.emitter, rng.choice(nb), tok.table, tok.hop, tid)
                c.tokens.append(dup)
            else:
                dup = TokenMsg(tok.emitter, tok.recipient, tok.table, tok.hop, tid)
                (c.tokens if in_flight else c.stalled).append(dup)
            c.visited[tid] = c.visited.get(tok.trace_id, frozenset())
        else:
            table = list(tok.table)
            for k in range(n):
                if rng.random() < 0.5:
                    table[k] = rng.randrange(n) if rng.random() < 0.5 else None
            bad = TokenMsg(tok.emitter, tok.recipient, tuple(table), tok.hop, tok.trace_id)
            lst = c.tokens if in_flight else c.stalled
            lst[lst.index(tok)] = bad
        return c

    if kind == "remove-link":
        if target == "tree":
            cands = _tree_edges(c)
            if not cands:
                raise FaultError("remove-link: token tree has no removable edge")
            i, j = rng.choice(cands)
        elif target is None:
            if not c.graph.edges:
                raise FaultError("remove-link: graph has no edge")
            i, j = rng.choice(sorted(c.graph.edges))
        else:
            i, j = target
        c.graph = c.graph.without_edge(i, j)
        return c

    # add-link
    if target is None:
        cands = [(i, j) for i in range(n) for j in range(i + 1, n) if not c.graph.has_edge(i, j)]
        if not cands:
            raise FaultError("add-link: graph is complete")
        i, j = rng.choice(cands)
    else:
        i, j = target
    c.graph = c.graph.with_edge(i, j)
    return c


# -- execution ---------------------------------------------------------------

def advance(c: Configuration, s: Scenario, rng: random.Random) -> tuple[Configuration, RoundEvents]:
    """Execute round ``c.round``; return the next configuration and what happened."""
    ev = RoundEvents()
    r = c.round
    for fe in s.faults.corrupt_events:
        if fe.round == r:
            try:
                c = inject_fault(c, fe.kind, rng, fe.target)
                ev.faults.append(fe.kind)
            except FaultError as exc:
                logger.warning("round %d: skipped fault %s: %s", r, fe.kind, exc)
    if ev.faults:
        ev.detection_after_faults = tuple(nd.id for nd in c.nodes if local_detection(nd, c.graph))
    params = s.params
    p_loss = s.faults.token_loss_p

    graph_state, g = c.graph_state, c.graph
    if s.faults.link_dynamics and len(s.process) > 1:
        graph_state = sample_next_graph(s.process, graph_state, rng)
        g = s.process.states[graph_state]

    nodes = list(c.nodes)
    processed = [False] * len(nodes)
    visited = dict(c.visited)

    # (2) reloading waves
    out_waves: list[WaveMsg] = []
    for w in c.waves:
        i = w.recipient
        if not g.has_edge(w.sender, i):
            ev.dropped_waves += 1
            continue
        nbrs = g.neighbor_set(i)
        fwd, nodes[i] = apply_r3(nodes[i], w, params, nbrs)
        processed[i] = True
        out_waves.extend(fwd)
        kids = wave_children(w.table, i)
        if len(fwd) != len(kids):
            ev.blocked_forwards.extend((r, i, j, w.launched) for j in kids if j not in nbrs)

    # (3) tokens
    inbox: dict[int, list[TokenMsg]] = defaultdict(list)
    for t in c.tokens:
        if not g.has_edge(t.emitter, t.recipient):
            ev.dropped_tokens += 1
            visited.pop(t.trace_id, None)
            continue
        if p_loss > 0.0 and rng.random() < p_loss:
            ev.lost += 1
            visited.pop(t.trace_id, None)
            continue
        inbox[t.recipient].append(t)
    for t in c.stalled:
        inbox[t.recipient].append(t)

    out_tokens: list[TokenMsg] = []
    stalled: list[TokenMsg] = []
    for i in sorted(inbox):
        batch = inbox[i]
        res = apply_r1(nodes[i], batch, params, g.neighbors(i), rng, now=r, waves_enabled=s.reload_wave)
        nodes[i] = res.node
        processed[i] = True
        ev.token_receivers.append(i)
        keep = res.token.trace_id
        acc = set(visited.get(keep, ()))
        for t in batch:
            if t.trace_id != keep:
                acc |= visited.pop(t.trace_id, frozenset())
        acc.add(i)
        visited[keep] = frozenset(acc)
        ev.merges += res.merged
        if res.launched:
            ev.wave_launches += 1
            out_waves.extend(res.waves)
            kids = wave_children(res.token.table, i)
            if len(res.waves) != len(kids):
                nbrs = g.neighbor_set(i)
                ev.blocked_forwards.extend((r, i, j, r) for j in kids if j not in nbrs)
        (stalled if res.stalled else out_tokens).append(res.token)

    # (4) R2 on idle expired nodes, (5) R4 elsewhere
    existing = len(out_tokens) + len(stalled)
    next_trace = c.next_trace
    for i, nd in enumerate(nodes):
        if processed[i]:
            continue
        if nd.timer == 0:
            tok, nodes[i], held = apply_r2(nd, params, g.neighbors(i), rng, trace_id=next_trace)
            next_trace += 1
            visited[tok.trace_id] = frozenset((i,))
            (stalled if held else out_tokens).append(tok)
            ev.r2_creators.append(i)
            if existing:
                ev.undue += 1
        else:
            nodes[i] = apply_r4(nd)

    ev.wave_msgs = len(out_waves)
    nxt = Configuration(
        r + 1, graph_state, g, nodes, out_tokens, out_waves, stalled, visited,
        next_trace, c.r2_total + len(ev.r2_creators),
    )
    return nxt, ev


def step(c: Configuration, s: Scenario, rng: random.Random) -> Configuration:
    return advance(c, s, rng)[0]


def classify(c: Configuration, g: Optional[StaticGraph] = None) -> Classification:
    g = c.graph if g is None else g
    toks = c.all_tokens()
    count = len(toks)
    a1 = all(is_correct(t, g) for t in toks)
    a2 = count >= 1
    covered = False
    if a1 and a2:
        seen: set = set()
        for t in toks:
            seen |= c.visited.get(t.trace_id, frozenset())
        covered = len(seen) == g.n
    a3 = a1 and a2 and covered
    if not a1:
        label = NOT_A1
    elif not a2:
        label = A1
    elif not a3:
        label = A1_A2
    elif count == 1:
        label = LC
    else:
        label = A3
    detection = tuple(nd.id for nd in c.nodes if local_detection(nd, g))
    return Classification(label, count, a1, a2, a3, detection)


def covered(c: Configuration) -> bool:
    seen: set = set()
    for t in c.all_tokens():
        seen |= c.visited.get(t.trace_id, frozenset())
    return len(seen) == c.n


def simulate(s: Scenario, rng: Optional[random.Random] = None) -> Iterator[tuple]:
    """Yield ``(configuration, events, classification)`` after each of ``s.horizon`` rounds."""
    rng = random.Random(s.seed) if rng is None else rng
    c = init_configuration(s, rng)
    for _ in range(s.horizon):
        c, ev = advance(c, s, rng)
        yield c, ev, classify(c)


def _message_record(c: Configuration) -> dict:
    return {
        "round": c.round,
        "tokens": [
            {"emitter": t.emitter, "recipient": t.recipient, "hop": t.hop, "trace_id": t.trace_id,
             "table": list(t.table)}
            for t in c.all_tokens()
        ],
        "waves": [{"sender": w.sender, "recipient": w.recipient, "table": list(w.table)} for w in c.waves],
        "timers": [nd.timer for nd in c.nodes],
    }


def run(s: Scenario, record_messages: bool = False) -> RunResult:
    """Run the scenario to its horizon. Deterministic given ``s.seed``."""
    m = RunMetrics()
    rows = []
    messages = [] if record_messages else None
    prev_a3 = False
    for c, ev, cl in simulate(s):
        r = c.round - 1
        nr2 = len(ev.r2_creators)
        m.r2_creations += nr2
        m.merges += ev.merges
        m.wave_launches += ev.wave_launches
        m.undue_creations += ev.undue
        m.lost_tokens += ev.lost
        m.dropped_tokens += ev.dropped_tokens
        if prev_a3:
            m.undue_creations_after_A3 += nr2
        prev_a3 = cl.a3
        m.legitimacy_timeline.append(cl.label)
        if m.convergence_round is None and cl.label == LC:
            m.convergence_round = r
        if m.cover_round is None and covered(c):
            m.cover_round = r
        rows.append((r, cl.label, cl.token_count, ev.wave_msgs, c.r2_total, c.graph_state))
        if messages is not None:
            messages.append(_message_record(c))
    return RunResult(m, rows, messages)
