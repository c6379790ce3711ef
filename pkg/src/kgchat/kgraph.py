"""Knowledge graph toolbox.

Directed labeled triples, TSV persistence, deterministic k-shortest
loopless paths (bidirectional traversal over the stored directed
edges), per-turn subgraph sampling, triple-level graph edit distance,
the normalized adjacency tensor that the reasoning decoder walks, and
the three graph perturbation protocols used to probe whether a trained
model actually reads its graph.

Everything here is deterministic: collections are processed in sorted
order and ties are broken lexicographically by (relation, entity).
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SELF_LOOP = "<self>"


class GraphError(ValueError):
    """Malformed triples, unknown entities, or an unusable perturbation."""


class Triple(NamedTuple):
    head: str
    relation: str
    tail: str


class _Arc(NamedTuple):
    """One traversal step. Stored triples are walkable in both directions
    for path sampling; flag 0 follows the stored orientation, flag 1
    goes against it. The reported path always carries the stored triple."""
    relation: str
    neighbor: str
    flag: int
    triple: Triple


class KnowledgeGraph:
    """Immutable set of triples plus the entity/relation vocabularies
    they induce. `extra_entities` keeps nodes that currently have no
    edges (isolated sources, entities orphaned by a perturbation)."""

    __slots__ = ("triples", "entities", "relations")

    def __init__(self, triples: Iterable[Triple] = (),
                 extra_entities: Iterable[str] = (),
                 extra_relations: Iterable[str] = ()):
        ts = frozenset(Triple(*t) for t in triples)
        for t in ts:
            if t.relation == SELF_LOOP:
                raise GraphError(f"{SELF_LOOP} is reserved and cannot be stored: {t}")
            if not t.head or not t.relation or not t.tail:
                raise GraphError(f"triple with empty field: {t}")
        object.__setattr__(self, "triples", ts)
        object.__setattr__(self, "entities",
                           frozenset(e for t in ts for e in (t.head, t.tail))
                           | frozenset(extra_entities))
        object.__setattr__(self, "relations",
                           frozenset(t.relation for t in ts) | frozenset(extra_relations))

    def __setattr__(self, *_):
        raise AttributeError("KnowledgeGraph is immutable")

    def __eq__(self, other):
        return (isinstance(other, KnowledgeGraph)
                and self.triples == other.triples
                and self.entities == other.entities
                and self.relations == other.relations)

    def __hash__(self):
        return hash((self.triples, self.entities, self.relations))

    def __len__(self):
        return len(self.triples)

    def __repr__(self):
        return (f"KnowledgeGraph({len(self.triples)} triples, "
                f"{len(self.entities)} entities, {len(self.relations)} relations)")

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples)


# ---------------------------------------------------------------------------
# TSV persistence: head <TAB> relation <TAB> tail, '#' starts a comment.


def load_triples_tsv(path) -> KnowledgeGraph:
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise GraphError(f"{path}: line {lineno}: expected 3 tab-separated "
                                 f"fields, got {line!r}")
            triples.append(Triple(parts[0].strip(), parts[1].strip(), parts[2].strip()))
    return KnowledgeGraph(triples)


def save_triples_tsv(graph: KnowledgeGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# head\trelation\ttail\n")
        for t in graph.sorted_triples():
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


# ---------------------------------------------------------------------------
# k shortest loopless paths


def _traversal_adjacency(graph: KnowledgeGraph) -> dict:
    adj: dict[str, list[_Arc]] = {}
    for t in graph.triples:
        adj.setdefault(t.head, []).append(_Arc(t.relation, t.tail, 0, t))
        if t.tail != t.head:
            adj.setdefault(t.tail, []).append(_Arc(t.relation, t.head, 1, t))
    return {node: tuple(sorted(arcs)) for node, arcs in adj.items()}


def _path_key(arcs: Sequence[_Arc]) -> tuple:
    return tuple((a.relation, a.neighbor, a.flag) for a in arcs)


def _best_path(adj, source, target, banned_arcs, banned_nodes):
    """Uniform-cost search minimizing (length, lexicographic path key).
    Returns a tuple of arcs, or None when target is unreachable."""
    heap = [(0, (), source, ())]
    seen = set()
    while heap:
        _, _, node, arcs = heapq.heappop(heap)
        if node == target:
            return arcs
        if node in seen:
            continue
        seen.add(node)
        for arc in adj.get(node, ()):
            if arc.neighbor in seen or arc.neighbor in banned_nodes:
                continue
            if (node, arc) in banned_arcs:
                continue
            nxt = arcs + (arc,)
            heapq.heappush(heap, (len(nxt), _path_key(nxt), arc.neighbor, nxt))
    return None


def k_shortest_paths(graph: KnowledgeGraph, source: str, target: str,
                     k: int) -> list[list[Triple]]:
    """Yen-style enumeration of the k shortest loopless paths between two
    entities, treating every stored triple as walkable in both
    directions with unit weight. Paths are reported as sequences of the
    stored triples. Parallel triples between the same endpoints yield
    distinct paths. source == target yields one empty path.
    """
    if k < 1:
        raise GraphError("k must be >= 1")
    for e in (source, target):
        if e not in graph.entities:
            raise GraphError(f"unknown entity {e!r}")
    if source == target:
        return [[]]

    adj = _traversal_adjacency(graph)
    first = _best_path(adj, source, target, frozenset(), frozenset())
    if first is None:
        return []

    accepted = [first]
    candidates: list = []
    known = {first}
    while len(accepted) < k:
        prev = accepted[-1]
        prev_nodes = [source] + [a.neighbor for a in prev]
        for i in range(len(prev)):
            spur_node = prev_nodes[i]
            root = prev[:i]
            banned_arcs = set()
            for path in accepted:
                if len(path) > i and path[:i] == root:
                    banned_arcs.add((spur_node, path[i]))
            banned_nodes = set(prev_nodes[:i])
            spur = _best_path(adj, spur_node, target, banned_arcs, banned_nodes)
            if spur is None:
                continue
            cand = root + spur
            if cand not in known:
                known.add(cand)
                heapq.heappush(candidates, (len(cand), _path_key(cand), cand))
        if not candidates:
            break
        _, _, best = heapq.heappop(candidates)
        accepted.append(best)
    return [[a.triple for a in path] for path in accepted]


def shortest_path_lengths(graph: KnowledgeGraph,
                          pairs: Iterable[tuple[str, str]]) -> dict:
    """Hop counts for each (source, target) pair under the same
    bidirectional traversal as k_shortest_paths; unreachable pairs map
    to None. One BFS per distinct source."""
    adj = _traversal_adjacency(graph)
    pairs = sorted(set(pairs))
    for s, t in pairs:
        for e in (s, t):
            if e not in graph.entities:
                raise GraphError(f"unknown entity {e!r}")
    by_source: dict[str, dict[str, int]] = {}
    out = {}
    for s, t in pairs:
        if s not in by_source:
            dist = {s: 0}
            frontier = [s]
            while frontier:
                nxt = []
                for node in frontier:
                    for arc in adj.get(node, ()):
                        if arc.neighbor not in dist:
                            dist[arc.neighbor] = dist[node] + 1
                            nxt.append(arc.neighbor)
                frontier = nxt
            by_source[s] = dist
        out[(s, t)] = by_source[s].get(t)
    return out


def sample_subgraph(graph: KnowledgeGraph, sources: Iterable[str],
                    targets: Iterable[str], k: int = 5) -> KnowledgeGraph:
    """Union of the triples on the top-k shortest paths over every
    (source, target) pair. A pair with source == target contributes its
    endpoint as an isolated node so the turn can still ground on it."""
    sources = sorted(set(sources))
    targets = sorted(set(targets))
    for e in sources + targets:
        if e not in graph.entities:
            raise GraphError(f"unknown entity {e!r}")
    triples: set[Triple] = set()
    isolated: set[str] = set()
    for s in sources:
        for t in targets:
            if s == t:
                isolated.add(s)
                continue
            for path in k_shortest_paths(graph, s, t, k):
                triples.update(path)
    return KnowledgeGraph(triples, extra_entities=isolated)


def graph_edit_distance(a: KnowledgeGraph, b: KnowledgeGraph) -> int:
    """Symmetric difference of the triple sets (insertions + deletions)."""
    return len(a.triples ^ b.triples)


# ---------------------------------------------------------------------------
# Adjacency tensor
#
# Logical shape |V| x |L'| x |V| over the full entity vocabulary, where
# L' is the global relation set plus SELF_LOOP. Realized as flat edge
# arrays: the self-loop block first (one per entity, weight 1, in
# entity-index order), then the graph's triples sorted by (head,
# relation, tail) with weight 1/#tails of their (head, relation) group.
# The fixed edge order keeps hop accumulation bit-reproducible.


@dataclass(frozen=True)
class AdjacencyTensor:
    entities: tuple
    relations: tuple          # global relations + SELF_LOOP last
    head: np.ndarray
    rel: np.ndarray
    tail: np.ndarray
    weight: np.ndarray
    active: np.ndarray        # (|V|, |L'|) float mask, 1.0 where (h, r) has tails

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(self.relations)

    @property
    def self_index(self) -> int:
        return len(self.relations) - 1

    def entity_index(self, entity: str) -> int:
        try:
            return self._entity_pos[entity]
        except KeyError:
            raise GraphError(f"unknown entity {entity!r}") from None

    @cached_property
    def _entity_pos(self) -> dict:
        return {e: i for i, e in enumerate(self.entities)}

    def rows(self) -> dict:
        """Audit view: (head index, relation index) -> ((tail index, weight), ...)."""
        out: dict = {}
        for h, r, t, w in zip(self.head, self.rel, self.tail, self.weight):
            out.setdefault((int(h), int(r)), []).append((int(t), float(w)))
        return {k: tuple(v) for k, v in out.items()}


def build_adjacency(graph: KnowledgeGraph, entities: Sequence[str],
                    relations: Sequence[str]) -> AdjacencyTensor:
    """Index a graph against the global vocabularies.

    Every entity gets a self-loop with weight 1 under the reserved
    SELF_LOOP relation; each (head, relation) group present in the graph
    distributes weight 1/#tails over its tails. (head, relation) pairs
    absent from the graph carry zero mass and are marked inactive.
    """
    entities = tuple(entities)
    relations = tuple(relations)
    if SELF_LOOP in relations:
        raise GraphError(f"{SELF_LOOP} must not appear in the relation vocabulary")
    epos = {e: i for i, e in enumerate(entities)}
    rpos = {r: i for i, r in enumerate(relations)}
    if len(epos) != len(entities) or len(rpos) != len(relations):
        raise GraphError("duplicate entries in a vocabulary")
    missing = graph.entities - set(entities)
    if missing:
        raise GraphError(f"entities missing from vocabulary: {sorted(missing)[:5]}")
    missing_r = graph.relations - set(relations)
    if missing_r:
        raise GraphError(f"relations missing from vocabulary: {sorted(missing_r)}")

    n = len(entities)
    self_idx = len(relations)
    groups: dict[tuple[int, int], list[int]] = {}
    for t in graph.triples:
        groups.setdefault((epos[t.head], rpos[t.relation]), []).append(epos[t.tail])

    heads = list(range(n))
    rels = [self_idx] * n
    tails = list(range(n))
    weights = [1.0] * n
    active = np.zeros((n, self_idx + 1))
    active[:, self_idx] = 1.0
    for (h, r) in sorted(groups):
        ts = sorted(groups[(h, r)])
        w = 1.0 / len(ts)
        active[h, r] = 1.0
        for t in ts:
            heads.append(h)
            rels.append(r)
            tails.append(t)
            weights.append(w)

    return AdjacencyTensor(
        entities=entities,
        relations=relations + (SELF_LOOP,),
        head=np.asarray(heads, dtype=np.int64),
        rel=np.asarray(rels, dtype=np.int64),
        tail=np.asarray(tails, dtype=np.int64),
        weight=np.asarray(weights, dtype=np.float64),
        active=active,
    )


# ---------------------------------------------------------------------------
# Perturbation protocols


@dataclass(frozen=True)
class PerturbationResult:
    """A perturbed graph, the entities an adapted reply is expected to
    draw from, and the exact triple edits ((removed, added) pairs; empty
    for whole-graph swaps). `origin` is the batch index a swapped graph
    came from."""
    graph: KnowledgeGraph
    hypothesis: frozenset
    edits: tuple = ()
    skipped_paths: int = 0
    origin: int | None = None


def perturb_all(graphs: Sequence[KnowledgeGraph], seed: int) -> list[PerturbationResult]:
    """Reassign whole graphs across a batch by a seeded derangement, so
    no item keeps its own graph. Requires a batch of at least 2."""
    n = len(graphs)
    if n < 2:
        raise GraphError("perturb_all needs a batch of >= 2 graphs")
    rng = np.random.default_rng(seed)
    perm = list(range(n))
    # Sattolo's shuffle yields a uniform full cycle: always a derangement.
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return [PerturbationResult(graph=graphs[perm[i]],
                               hypothesis=frozenset(graphs[perm[i]].entities),
                               origin=perm[i])
            for i in range(n)]


def _draw(rng: np.random.Generator, candidates: Sequence[str]) -> str:
    return candidates[int(rng.integers(len(candidates)))]


def perturb_last1(graph: KnowledgeGraph, paths: Sequence[Sequence[Triple]],
                  seed: int, pool: Sequence[str] | None = None) -> PerturbationResult:
    """Replace the tail of each path's final triple with a random pool
    entity. Identical final triples are edited once. Substitutes are
    drawn so the edit log and the triple-set difference agree exactly:
    a substitute never recreates an existing or already-edited triple.
    """
    pool = sorted(set(pool if pool is not None else graph.entities))
    finals = sorted({p[-1] for p in paths if len(p) >= 1})
    skipped = sum(1 for p in paths if len(p) < 1)
    if skipped:
        logger.warning("perturb_last1: skipped %d empty paths", skipped)
    for t in finals:
        if t not in graph.triples:
            raise GraphError(f"path final triple not in graph: {t}")

    rng = np.random.default_rng(seed)
    removed = set(finals)
    added: set[Triple] = set()
    edits = []
    for old in finals:
        candidates = [e for e in pool
                      if e != old.tail
                      and Triple(old.head, old.relation, e) not in graph.triples
                      and Triple(old.head, old.relation, e) not in added
                      and Triple(old.head, old.relation, e) not in removed]
        if not candidates:
            raise GraphError(f"substitute pool exhausted for {old}")
        new = Triple(old.head, old.relation, _draw(rng, candidates))
        added.add(new)
        edits.append((old, new))

    new_graph = KnowledgeGraph((graph.triples - removed) | added,
                               extra_entities=graph.entities,
                               extra_relations=graph.relations)
    return PerturbationResult(graph=new_graph,
                              hypothesis=frozenset(t.tail for _, t in edits),
                              edits=tuple(edits),
                              skipped_paths=skipped)


def perturb_last2(graph: KnowledgeGraph, paths: Sequence[Sequence[Triple]],
                  seed: int, pool: Sequence[str] | None = None) -> PerturbationResult:
    """Rewire the last two steps of each path: (g, r1, m), (m, r2, t)
    becomes (g, r1, m'), (m', r2, t') with fresh entities m' != m and
    t' != t, keeping both relations. Paths shorter than 2 triples are
    skipped with a warning. Identical trailing pairs are edited once."""
    pool = sorted(set(pool if pool is not None else graph.entities))
    pairs = sorted({(p[-2], p[-1]) for p in paths if len(p) >= 2})
    skipped = sum(1 for p in paths if len(p) < 2)
    if skipped:
        logger.warning("perturb_last2: skipped %d paths shorter than 2 steps", skipped)
    for first, second in pairs:
        for t in (first, second):
            if t not in graph.triples:
                raise GraphError(f"path triple not in graph: {t}")
        if first.tail != second.head:
            raise GraphError(f"path steps do not chain: {first} -> {second}")

    rng = np.random.default_rng(seed)
    removed = {t for pair in pairs for t in pair}
    added: set[Triple] = set()
    edits = []
    hypothesis = set()
    for first, second in pairs:
        busy = graph.triples | added | removed
        chosen = None
        for m2 in rng.permutation([e for e in pool if e != first.tail]):
            new1 = Triple(first.head, first.relation, str(m2))
            if new1 in busy:
                continue
            for t2 in rng.permutation([e for e in pool if e != second.tail]):
                new2 = Triple(str(m2), second.relation, str(t2))
                if new2 not in busy and new2 != new1:
                    chosen = (new1, new2)
                    break
            if chosen:
                break
        if chosen is None:
            raise GraphError(f"substitute pool exhausted for {(first, second)}")
        new1, new2 = chosen
        added.update((new1, new2))
        edits.extend([(first, new1), (second, new2)])
        hypothesis.add(new2.tail)

    new_graph = KnowledgeGraph((graph.triples - removed) | added,
                               extra_entities=graph.entities,
                               extra_relations=graph.relations)
    return PerturbationResult(graph=new_graph,
                              hypothesis=frozenset(hypothesis),
                              edits=tuple(edits),
                              skipped_paths=skipped)
