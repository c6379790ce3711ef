"""Knowledge graph tests. The k-shortest-path implementation is checked
against an independent brute-force enumeration of all simple paths, and
the perturbation protocols are audited edit by edit."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgchat.kgraph import (
    SELF_LOOP,
    AdjacencyTensor,
    GraphError,
    KnowledgeGraph,
    Triple,
    build_adjacency,
    graph_edit_distance,
    k_shortest_paths,
    load_triples_tsv,
    perturb_all,
    perturb_last1,
    perturb_last2,
    sample_subgraph,
    save_triples_tsv,
)


def T(h, r, t):
    return Triple(h, r, t)


# ---------------------------------------------------------------------------
# brute-force path oracle: enumerate every simple path by walking the
# same bidirectional arc set, with no pruning or heaps involved.


def all_simple_paths(graph, source, target):
    arcs = {}
    for t in graph.triples:
        arcs.setdefault(t.head, []).append((t.relation, t.tail, 0, t))
        if t.tail != t.head:
            arcs.setdefault(t.tail, []).append((t.relation, t.head, 1, t))

    found = []

    def walk(node, visited, trips, key):
        if node == target and trips:
            found.append((len(trips), key, tuple(trips)))
            return
        for rel, nxt, flag, trip in arcs.get(node, []):
            if nxt in visited:
                continue
            walk(nxt, visited | {nxt}, trips + [trip], key + ((rel, nxt, flag),))

    if source == target:
        return [[]]
    walk(source, {source}, [], ())
    found.sort()
    return [list(trips) for _, _, trips in found]


def random_graph(rng, n_entities, n_triples, n_relations=2):
    ents = [f"e{i}" for i in range(n_entities)]
    rels = [f"r{i}" for i in range(n_relations)]
    triples = set()
    guard = 0
    while len(triples) < n_triples and guard < 200:
        guard += 1
        h, t = rng.choice(ents, size=2, replace=False)
        triples.add(T(str(h), str(rng.choice(rels)), str(t)))
    return KnowledgeGraph(triples, extra_entities=ents, extra_relations=rels)


# ---------------------------------------------------------------------------
# KnowledgeGraph basics


def test_graph_vocabularies_come_from_triples():
    g = KnowledgeGraph([T("a", "r", "b")], extra_entities=["z"])
    assert g.entities == {"a", "b", "z"}
    assert g.relations == {"r"}
    assert len(g) == 1


def test_graph_rejects_reserved_relation():
    with pytest.raises(GraphError):
        KnowledgeGraph([T("a", SELF_LOOP, "b")])


def test_graph_is_immutable():
    g = KnowledgeGraph([T("a", "r", "b")])
    with pytest.raises(AttributeError):
        g.triples = frozenset()


def test_tsv_round_trip(tmp_path):
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "s", "c"), T("甄嬛", "IsTitleOf", "熹妃")])
    path = tmp_path / "kg.tsv"
    save_triples_tsv(g, path)
    loaded = load_triples_tsv(path)
    assert loaded.triples == g.triples


def test_tsv_comments_and_blank_lines(tmp_path):
    path = tmp_path / "kg.tsv"
    path.write_text("# comment\n\na\tr\tb\n", encoding="utf-8")
    assert load_triples_tsv(path).triples == {T("a", "r", "b")}


def test_tsv_malformed_line_reports_number(tmp_path):
    path = tmp_path / "kg.tsv"
    path.write_text("a\tr\tb\na\tb\n", encoding="utf-8")
    with pytest.raises(GraphError, match="line 2"):
        load_triples_tsv(path)


# ---------------------------------------------------------------------------
# k shortest paths


def test_single_edge_path():
    g = KnowledgeGraph([T("a", "r", "b")])
    assert k_shortest_paths(g, "a", "b", 3) == [[T("a", "r", "b")]]


def test_reverse_traversal_of_directed_triple():
    # Stored direction is a->b; walking b->a reports the stored triple.
    g = KnowledgeGraph([T("a", "r", "b")])
    assert k_shortest_paths(g, "b", "a", 1) == [[T("a", "r", "b")]]


def test_source_equals_target_gives_single_empty_path():
    g = KnowledgeGraph([T("a", "r", "b")])
    assert k_shortest_paths(g, "a", "a", 4) == [[]]


def test_unreachable_gives_no_paths():
    g = KnowledgeGraph([T("a", "r", "b"), T("c", "r", "d")])
    assert k_shortest_paths(g, "a", "d", 3) == []


def test_unknown_entity_raises():
    g = KnowledgeGraph([T("a", "r", "b")])
    with pytest.raises(GraphError):
        k_shortest_paths(g, "a", "nope", 1)
    with pytest.raises(GraphError):
        k_shortest_paths(g, "a", "b", 0)


def test_parallel_relations_are_distinct_paths():
    g = KnowledgeGraph([T("a", "r1", "b"), T("a", "r2", "b")])
    paths = k_shortest_paths(g, "a", "b", 5)
    assert paths == [[T("a", "r1", "b")], [T("a", "r2", "b")]]


def test_tie_breaking_prefers_smaller_relation_then_entity():
    g = KnowledgeGraph([
        T("s", "r1", "m1"), T("m1", "r1", "t"),
        T("s", "r1", "m2"), T("m2", "r1", "t"),
        T("s", "r0", "m3"), T("m3", "r9", "t"),
    ])
    paths = k_shortest_paths(g, "s", "t", 3)
    # All three have length 2; lexicographic (relation, entity) order decides.
    assert paths[0][0] == T("s", "r0", "m3")
    assert paths[1][0] == T("s", "r1", "m1")
    assert paths[2][0] == T("s", "r1", "m2")


@pytest.mark.parametrize("seed", range(12))
def test_k_shortest_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n_entities=6, n_triples=9)
    ents = sorted(g.entities)
    src = ents[int(rng.integers(len(ents)))]
    dst = ents[int(rng.integers(len(ents)))]
    expect = all_simple_paths(g, src, dst)[:5]
    got = k_shortest_paths(g, src, dst, 5)
    assert got == expect


def test_five_node_parallel_routes_match_enumeration():
    g = KnowledgeGraph([
        T("a", "r", "b"), T("b", "r", "e"),
        T("a", "s", "c"), T("c", "s", "e"),
        T("a", "r", "d"), T("d", "r", "e"), T("d", "s", "e"),
    ])
    assert k_shortest_paths(g, "a", "e", 10) == all_simple_paths(g, "a", "e")


# ---------------------------------------------------------------------------
# subgraph sampling and GED


def test_sample_subgraph_unions_pairwise_paths():
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "r", "c"), T("x", "r", "y")])
    sub = sample_subgraph(g, ["a"], ["c"])
    assert sub.triples == {T("a", "r", "b"), T("b", "r", "c")}
    multi = sample_subgraph(g, ["a", "x"], ["c", "y"])
    assert multi.triples == g.triples


def test_sample_subgraph_self_pair_keeps_isolated_entity():
    g = KnowledgeGraph([T("a", "r", "b")])
    sub = sample_subgraph(g, ["a"], ["a"])
    assert sub.triples == set()
    assert sub.entities == {"a"}


def test_sample_subgraph_respects_k():
    # k = 1 keeps only the single best route.
    g = KnowledgeGraph([T("a", "r1", "b"), T("a", "r2", "b")])
    sub = sample_subgraph(g, ["a"], ["b"], k=1)
    assert sub.triples == {T("a", "r1", "b")}


def test_ged_is_symmetric_difference():
    g1 = KnowledgeGraph([T("a", "r", "b"), T("b", "r", "c")])
    g2 = KnowledgeGraph([T("a", "r", "b"), T("b", "r", "d")])
    assert graph_edit_distance(g1, g2) == 2
    assert graph_edit_distance(g1, g1) == 0
    assert graph_edit_distance(g1, KnowledgeGraph()) == 2


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=50, deadline=None)
def test_ged_triangle_inequality_and_symmetry(seed):
    rng = np.random.default_rng(seed)
    a = random_graph(rng, 5, 6)
    b = random_graph(rng, 5, 6)
    c = random_graph(rng, 5, 6)
    assert graph_edit_distance(a, b) == graph_edit_distance(b, a)
    assert graph_edit_distance(a, c) <= graph_edit_distance(a, b) + graph_edit_distance(b, c)


# ---------------------------------------------------------------------------
# adjacency tensor


def test_adjacency_self_loops_and_normalized_tails():
    g = KnowledgeGraph([T("a", "r", "b"), T("a", "r", "c")])
    adj = build_adjacency(g, ("a", "b", "c"), ("r",))
    rows = adj.rows()
    assert rows[(0, 1)] == ((0, 1.0),)  # self-loop for a
    assert rows[(0, 0)] == ((1, 0.5), (2, 0.5))  # tails split evenly
    assert (1, 0) not in rows  # absent (head, relation) carries no mass
    assert adj.active[0, 0] == 1.0
    assert adj.active[1, 0] == 0.0
    assert np.all(adj.active[:, adj.self_index] == 1.0)


def test_adjacency_total_weight_per_head():
    g = KnowledgeGraph([T("a", "r", "b"), T("a", "s", "b"), T("a", "s", "c")])
    adj = build_adjacency(g, ("a", "b", "c"), ("r", "s"))
    rows = adj.rows()
    for head, n_active in ((0, 2), (1, 0), (2, 0)):
        total = sum(w for (h, _), tails in rows.items() if h == head for _, w in tails)
        assert total == pytest.approx(1.0 + n_active)


def test_adjacency_rejects_unknown_vocab_entries():
    g = KnowledgeGraph([T("a", "r", "b")])
    with pytest.raises(GraphError):
        build_adjacency(g, ("a",), ("r",))
    with pytest.raises(GraphError):
        build_adjacency(g, ("a", "b"), ())
    with pytest.raises(GraphError):
        build_adjacency(g, ("a", "b"), ("r", SELF_LOOP))


def test_adjacency_edge_order_self_block_then_sorted_triples():
    g = KnowledgeGraph([T("c", "r", "a"), T("a", "r", "b")])
    adj = build_adjacency(g, ("a", "b", "c"), ("r",))
    n = adj.n_entities
    assert list(adj.head[:n]) == [0, 1, 2]
    assert list(adj.tail[:n]) == [0, 1, 2]
    assert list(adj.head[n:]) == [0, 2]  # (a,r,b) sorts before (c,r,a)


# ---------------------------------------------------------------------------
# perturbations


def test_perturb_all_batch_of_two_swaps():
    a = KnowledgeGraph([T("a", "r", "b")])
    b = KnowledgeGraph([T("x", "r", "y")])
    out = perturb_all([a, b], seed=0)
    assert out[0].graph == b and out[1].graph == a
    assert out[0].hypothesis == {"x", "y"}
    assert out[1].hypothesis == {"a", "b"}


def test_perturb_all_rejects_singleton_batch():
    with pytest.raises(GraphError):
        perturb_all([KnowledgeGraph([T("a", "r", "b")])], seed=0)


@pytest.mark.parametrize("seed", range(100))
def test_perturb_all_is_derangement_preserving_multiset(seed):
    graphs = [KnowledgeGraph([T(f"a{i}", "r", f"b{i}")]) for i in range(6)]
    out = perturb_all(graphs, seed=seed)
    assert sorted(r.origin for r in out) == list(range(6))
    assert all(r.origin != i for i, r in enumerate(out))


def test_perturb_all_deterministic():
    graphs = [KnowledgeGraph([T(f"a{i}", "r", f"b{i}")]) for i in range(5)]
    first = [r.origin for r in perturb_all(graphs, seed=9)]
    second = [r.origin for r in perturb_all(graphs, seed=9)]
    assert first == second


def test_perturb_last1_single_path():
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "s", "c")],
                       extra_entities=["d", "e"])
    res = perturb_last1(g, [[T("a", "r", "b"), T("b", "s", "c")]], seed=1)
    assert len(res.edits) == 1
    old, new = res.edits[0]
    assert old == T("b", "s", "c")
    assert new.head == "b" and new.relation == "s" and new.tail != "c"
    assert res.hypothesis == {new.tail}
    assert old not in res.graph.triples and new in res.graph.triples
    assert T("a", "r", "b") in res.graph.triples


def test_perturb_last1_dedupes_shared_final_triple():
    g = KnowledgeGraph([T("a", "r", "b"), T("x", "r", "b"), T("b", "s", "c")],
                       extra_entities=["d", "e", "f"])
    paths = [[T("a", "r", "b"), T("b", "s", "c")],
             [T("x", "r", "b"), T("b", "s", "c")]]
    res = perturb_last1(g, paths, seed=3)
    assert len(res.edits) == 1


def test_perturb_last1_edit_log_equals_triple_difference():
    rng = np.random.default_rng(0)
    for seed in range(25):
        g = random_graph(rng, 6, 8)
        paths = [[t] for t in sorted(g.triples)[:3]]
        res = perturb_last1(g, paths, seed=seed)
        delta = g.triples ^ res.graph.triples
        logged = {t for pair in res.edits for t in pair}
        assert delta == logged


def test_perturb_last1_deterministic_given_seed():
    g = KnowledgeGraph([T("a", "r", "b")], extra_entities=["c", "d", "e", "f"])
    r1 = perturb_last1(g, [[T("a", "r", "b")]], seed=5)
    r2 = perturb_last1(g, [[T("a", "r", "b")]], seed=5)
    assert r1.edits == r2.edits


def test_perturb_last1_pool_exhaustion():
    g = KnowledgeGraph([T("a", "r", "b")])
    with pytest.raises(GraphError, match="pool"):
        perturb_last1(g, [[T("a", "r", "b")]], seed=0, pool=["b"])


def test_perturb_last1_skips_and_logs_empty_paths(caplog):
    g = KnowledgeGraph([T("a", "r", "b")], extra_entities=["c"])
    with caplog.at_level("WARNING"):
        res = perturb_last1(g, [[]], seed=0)
    assert res.skipped_paths == 1
    assert res.edits == ()
    assert res.graph.triples == g.triples
    assert "skipped" in caplog.text


def test_perturb_last2_rewires_both_steps():
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "s", "c")],
                       extra_entities=["d", "e", "f"])
    res = perturb_last2(g, [[T("a", "r", "b"), T("b", "s", "c")]], seed=2)
    assert len(res.edits) == 2
    (old1, new1), (old2, new2) = res.edits
    assert old1 == T("a", "r", "b") and old2 == T("b", "s", "c")
    assert new1.head == "a" and new1.relation == "r" and new1.tail != "b"
    assert new2.relation == "s" and new2.tail != "c"
    assert new2.head == new1.tail  # the rewired steps still chain
    assert res.hypothesis == {new2.tail}
    assert g.triples ^ res.graph.triples == {old1, old2, new1, new2}


def test_perturb_last2_skips_short_paths(caplog):
    g = KnowledgeGraph([T("a", "r", "b")], extra_entities=["c", "d"])
    with caplog.at_level("WARNING"):
        res = perturb_last2(g, [[T("a", "r", "b")]], seed=0)
    assert res.skipped_paths == 1
    assert res.edits == ()


def test_perturb_last2_longer_path_uses_final_two():
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "r", "c"), T("c", "s", "d")],
                       extra_entities=["e", "f", "g"])
    path = [T("a", "r", "b"), T("b", "r", "c"), T("c", "s", "d")]
    res = perturb_last2(g, [path], seed=4)
    removed = {old for old, _ in res.edits}
    assert removed == {T("b", "r", "c"), T("c", "s", "d")}
    assert T("a", "r", "b") in res.graph.triples


def test_perturb_last2_deterministic_and_logged():
    g = KnowledgeGraph([T("a", "r", "b"), T("b", "s", "c")],
                       extra_entities=["d", "e", "f", "g"])
    path = [[T("a", "r", "b"), T("b", "s", "c")]]
    r1 = perturb_last2(g, path, seed=11)
    r2 = perturb_last2(g, path, seed=11)
    assert r1.edits == r2.edits
    delta = g.triples ^ r1.graph.triples
    assert delta == {t for pair in r1.edits for t in pair}
