import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokencirc.graph import StaticGraph, complete_graph, path_graph, random_connected_graph
from tokencirc.protocol import (
    NodeState,
    ProtocolError,
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
    is_spanning_tree,
    local_detection,
    merge_tokens,
)

_ = None


class Scripted:
    """rng stand-in whose choice() replays a fixed route."""

    def __init__(self, route):
        self.route = list(route)

    def choice(self, seq):
        nxt = self.route.pop(0)
        assert nxt in seq
        return nxt


def walk(route, n, capacity, params=None):
    """Carry a fresh token created at route[0] along ``route``; return the final token."""
    params = params or ProtocolParams(capacity, 10 * capacity)
    g = complete_graph(n)
    start = route[0]
    tok, _node, _ = apply_r2(NodeState(start, 0), params, g.neighbors(start), Scripted(route[1:2]))
    for k in range(1, len(route)):
        i = route[k]
        nxt = route[k + 1:k + 2] or [g.neighbors(i)[0]]
        res = apply_r1(NodeState(i, 3), [tok], params, g.neighbors(i), Scripted(nxt))
        tok = res.token
    return tok


def one_based(table):
    return [None if x is None else x + 1 for x in table]


def test_table_after_first_route():
    # route 1,3,5,4,3 with ids written from 1
    tok = walk([0, 2, 4, 3, 2], 5, 5)
    assert one_based(tok.table) == [3, _, 3, 3, 4]


def test_table_after_continued_route():
    tok = walk([0, 2, 4, 3, 2, 1, 0, 1, 2, 0], 5, 5)
    assert one_based(tok.table) == [1, 3, 1, 3, 4]


def test_induced_tree_examples():
    t1 = tuple(x - 1 if x else None for x in [3, _, 3, 3, 4])
    assert {(a + 1, b + 1) for a, b in induced_tree(t1)} == {(1, 3), (4, 3), (5, 4)}
    t2 = tuple(x - 1 for x in [1, 3, 1, 3, 4])
    assert {(a + 1, b + 1) for a, b in induced_tree(t2)} == {(3, 1), (2, 3), (4, 3), (5, 4)}
    assert induced_tree((None,) * 4) == set()


def test_merge_examples():
    t1 = TokenMsg(0, 1, (1, None, 1, None, None), 2, 0)
    t2 = TokenMsg(3, 1, (None, 3, None, 3, 4), 5, 1)
    m = merge_tokens(t1, t2)
    assert m.table == (1, 3, 1, 3, 4)
    assert m.hop == 5 and m.trace_id == 0
    fresh = TokenMsg(2, 1, empty_table(5, 2), 0, 7)
    kept = merge_tokens(t2, fresh)
    assert kept.table == (None, 3, 2, 3, 4) and kept.hop == 5
    assert merge_tokens(t2, t2) == t2


def test_merge_length_mismatch():
    with pytest.raises(ProtocolError):
        merge_tokens(TokenMsg(0, 1, (0, None), 0, 0), TokenMsg(0, 1, (0, None, None), 0, 1))


def test_params_guard():
    with pytest.raises(ProtocolError, match=r"T_m must exceed capacity\+1"):
        ProtocolParams(5, 6)
    assert ProtocolParams(5, 7).wave_threshold == 1


def test_r1_threshold_boundary():
    params = ProtocolParams(5, 12)  # threshold 6
    # node 1 holds children 0 and 2 (neighbors) and 3 (no longer a neighbor)
    table = (1, 1, 1, 1, None)
    tok = TokenMsg(0, 1, table, params.wave_threshold - 1, 0)
    res = apply_r1(NodeState(1, 4), [tok], params, [0, 2], Scripted([2]), now=9)
    assert res.launched
    assert sorted(w.recipient for w in res.waves) == [0, 2]
    assert all(w.launched == 9 for w in res.waves)
    assert res.token.hop == 0
    assert res.node == NodeState(1, 12, 2)
    below = apply_r1(NodeState(1, 4), [TokenMsg(0, 1, table, params.wave_threshold - 2, 0)],
                     params, [0, 2], Scripted([0]))
    assert not below.launched and below.waves == [] and below.token.hop == params.wave_threshold - 1


def test_r1_waves_disabled():
    params = ProtocolParams(3, 8)
    tok = TokenMsg(0, 1, (1, 1, None), 10, 0)
    res = apply_r1(NodeState(1, 0), [tok], params, [0, 2], Scripted([0]), waves_enabled=False)
    assert not res.launched and res.token.hop == 11


def test_r1_merges_in_emitter_order():
    params = ProtocolParams(4, 20)
    a = TokenMsg(2, 1, (None, None, 3, 2), 1, 5)
    b = TokenMsg(0, 1, (0, None, 0, None), 4, 9)
    res = apply_r1(NodeState(1, 2), [a, b], params, [0, 2, 3], Scripted([3]))
    # b (emitter 0) is merged first and keeps its trace; a fills gaps
    assert res.token.trace_id == 9
    assert res.token.table == (1, 1, 1, 2)
    assert res.token.hop == 5 and res.merged == 1


def test_r1_isolated_node_stalls():
    params = ProtocolParams(3, 8)
    tok = TokenMsg(0, 1, (0, None, None), 3, 0)
    res = apply_r1(NodeState(1, 2, father=0), [tok], params, [], Scripted([]))
    assert res.stalled
    assert res.token.hop == 3
    assert res.token.recipient == 1 and res.token.table[0] == 1 and res.token.table[1] == 1
    assert res.node.timer == 8


def test_r1_empty_input():
    with pytest.raises(ProtocolError):
        apply_r1(NodeState(0, 1), [], ProtocolParams(3, 8), [1], random.Random(0))


def test_r2_fresh_token(k5):
    params = ProtocolParams(5, 10)
    tok, node, stalled = apply_r2(NodeState(2, 0), params, k5.neighbors(2), random.Random(3), trace_id=4)
    assert tok.table == (None, None, 2, None, None)
    assert tok.hop == 0 and not stalled and node.timer == 10 and node.father == tok.recipient
    assert is_correct(tok, path_graph(5))
    again, _, _ = apply_r2(NodeState(2, 0), params, k5.neighbors(2), random.Random(3), trace_id=4)
    assert again == tok
    held, _, st_ = apply_r2(NodeState(2, 0), params, [], random.Random(3))
    assert st_ and held.recipient == 2
    with pytest.raises(ProtocolError):
        apply_r2(NodeState(2, 1), params, [0], random.Random(3))


def test_r3_cases():
    params = ProtocolParams(4, 10)
    leaf_out, node = apply_r3(NodeState(3, 2), WaveMsg(1, 3, (1, 1, 1, 1)), params, {1})
    assert leaf_out == [] and node.timer == 10
    # own entry is a root self-loop: no self-forward
    out, _ = apply_r3(NodeState(1, 2), WaveMsg(0, 1, (1, 1, None, None)), params, {0, 2})
    assert [w.recipient for w in out] == [0]
    assert out[0].table[1] is None
    # chain 0 -> 1 -> 2 with edge (1, 2) gone
    out, _ = apply_r3(NodeState(1, 2), WaveMsg(0, 1, (0, 0, 1, None)), params, {0})
    assert out == []


def test_r3_keeps_father():
    _, node = apply_r3(NodeState(1, 2, father=3), WaveMsg(0, 1, (0, 0, None, None)), ProtocolParams(4, 10), {0})
    assert node.father == 3


def test_r4():
    params = ProtocolParams(3, 9)
    node = NodeState(0, params.timeout)
    assert apply_r4(node).timer == 8
    assert apply_r4(NodeState(0, 1)).timer == 0
    for _ in range(params.timeout):
        node = apply_r4(node)
    assert node.timer == 0
    with pytest.raises(ProtocolError):
        apply_r4(node)


def test_is_correct_examples():
    g = StaticGraph.from_edges(5, [(2, 0), (1, 2), (3, 2), (4, 3)])
    assert is_correct((0, 2, 0, 2, 3), g)
    assert not is_correct((2, None, None, None, None), StaticGraph.from_edges(5, [(0, 1)]))
    assert is_correct(empty_table(5, 3), StaticGraph.from_edges(5, []))


def test_is_spanning_tree_examples():
    g = StaticGraph.from_edges(5, [(2, 0), (1, 2), (3, 2), (4, 3), (0, 4)])
    assert is_spanning_tree((None, None, 2, None, None), {2}, g)
    assert is_spanning_tree((0, 2, 0, 2, 3), set(range(5)), g)
    # 1 -> 0 and 3 -> 2: two disjoint chains
    assert not is_spanning_tree((0, 0, 2, 2, None), {0, 1, 2, 3}, complete_graph(5))
    # a cycle among marked nodes
    assert not is_spanning_tree((1, 2, 0), {0, 1, 2}, complete_graph(3))
    # uses a non-edge
    assert not is_spanning_tree((0, 0, 1), {0, 1, 2}, path_graph(3).without_edge(1, 2))


def test_local_detection():
    g = path_graph(3)
    assert not local_detection(NodeState(1, 3), g)
    assert not local_detection(NodeState(1, 3, father=2), g)
    assert local_detection(NodeState(1, 3, father=2), g.without_edge(1, 2))


# -- properties ----------------------------------------------------------------

tables = st.lists(st.one_of(st.none(), st.integers(0, 5)), min_size=6, max_size=6).map(tuple)


@settings(max_examples=200, deadline=None)
@given(tables, tables, tables)
def test_merge_associative(a, b, c):
    ta, tb, tc = (TokenMsg(0, 1, t, h, h) for h, t in enumerate((a, b, c)))
    left = merge_tokens(merge_tokens(ta, tb), tc)
    right = merge_tokens(ta, merge_tokens(tb, tc))
    assert left.table == right.table and left.hop == right.hop


@settings(max_examples=200, deadline=None)
@given(tables, tables)
def test_merge_commutes_on_agreeing_tables(a, b):
    b = tuple(y if (x is None or y is None) else x for x, y in zip(a, b))
    ta, tb = TokenMsg(0, 1, a, 3, 0), TokenMsg(2, 1, b, 7, 1)
    assert merge_tokens(ta, tb).table == merge_tokens(tb, ta).table


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(tables, st.integers(0, 5), st.integers(0, 30)), min_size=1, max_size=4),
       st.integers(0, 5), st.integers(0, 1000))
def test_r1_stamps_receiver_and_emitters(msgs, i, seed):
    params = ProtocolParams(6, 40)
    received = [TokenMsg(e, i, t, h, k) for k, (t, e, h) in enumerate(msgs)]
    nbrs = [j for j in range(6) if j != i]
    res = apply_r1(NodeState(i, 0), received, params, nbrs, random.Random(seed))
    assert res.token.table[i] == i
    for t in received:
        assert res.token.table[t.emitter] == i
    assert 0 <= res.token.hop < params.wave_threshold
    assert res.node.timer == params.timeout and res.node.father == res.token.recipient


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 9), st.integers(0, 10**6), st.integers(1, 200))
def test_random_walk_tables_span_visited(n, seed, steps):
    rng = random.Random(seed)
    g = random_connected_graph(n, 0.3, rng)
    params = ProtocolParams(n, 4 * n)
    start = rng.randrange(n)
    tok, _, _ = apply_r2(NodeState(start, 0), params, g.neighbors(start), rng)
    visited = {start}
    for _ in range(steps):
        i = tok.recipient
        visited.add(i)
        tok = apply_r1(NodeState(i, 1), [tok], params, g.neighbors(i), rng).token
        assert is_correct(tok, g)
        assert is_spanning_tree(tok.table, visited, g)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10**6))
def test_wave_depth_equals_tree_height(n, seed):
    """Waves from the root keep moving for exactly as many rounds as the tree is tall."""
    rng = random.Random(seed)
    g = random_connected_graph(n, 0.3, rng)
    # BFS tree rooted at 0, written as a father table
    table = [None] * n
    table[0] = 0
    depth = {0: 0}
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in g.neighbors(u):
                if v not in depth:
                    depth[v], table[v] = depth[u] + 1, u
                    nxt.append(v)
        frontier = nxt
    table = tuple(table)
    params = ProtocolParams(n, n + 5)
    waves = [WaveMsg(0, j, table) for j in range(1, n) if table[j] == 0]
    table0 = list(table)
    table0[0] = None
    waves = [WaveMsg(0, w.recipient, tuple(table0)) for w in waves]
    rounds = 0
    while waves:
        rounds += 1
        nxt = []
        for w in waves:
            out, _ = apply_r3(NodeState(w.recipient, 1), w, params, g.neighbor_set(w.recipient))
            nxt.extend(out)
        waves = nxt
    assert rounds == max(depth.values())
