from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from src.exceptions import InputError, NoCommunityError
from src.logging_config import setup_logger
from src.modules.base import Searcher
from src.modules.graph import Edge, Graph, connected_component, core_numbers, edge_key, truss_numbers

logger = setup_logger(__name__)


@dataclass(frozen=True)
class CommunityResult:
    nodes: frozenset
    k: int
    method: str


def _check_queries(g: Graph, queries: Iterable[int]) -> list[int]:
    qs = sorted({int(q) for q in queries})
    if not qs:
        raise InputError("Query set is empty")
    bad = [q for q in qs if not 0 <= q < g.n]
    if bad:
        raise InputError(f"Query node {bad[0]} is not in the graph (n={g.n})")
    return qs


def _adjacency(edges: Iterable[Edge]) -> dict[int, set]:
    adj: dict[int, set] = {}
    for u, v in edges:
        adj.setdefault(u, set()).add(v)
        adj.setdefault(v, set()).add(u)
    return adj


def _peel_to_truss(edges: set, k: int) -> set:
    """Largest subset of `edges` where every edge closes at least k - 2 triangles."""
    adj = _adjacency(edges)
    support = {e: len(adj[e[0]] & adj[e[1]]) for e in edges}
    queue = deque(e for e, s in support.items() if s < k - 2)
    alive = set(edges)
    while queue:
        e = queue.popleft()
        if e not in alive:
            continue
        alive.discard(e)
        u, v = e
        for w in adj[u] & adj[v]:
            for f in (edge_key(u, w), edge_key(v, w)):
                if f in alive:
                    support[f] -= 1
                    if support[f] == k - 3:
                        queue.append(f)
        adj[u].discard(v)
        adj[v].discard(u)
    return alive


def _query_distance(adj: dict[int, set], nodes: set, queries: list[int]) -> dict[int, int]:
    """max over q of BFS distance from q, for every node in `nodes`."""
    out = {v: 0 for v in nodes}
    for q in queries:
        dist = {q: 0}
        frontier = deque([q])
        while frontier:
            v = frontier.popleft()
            for u in adj.get(v, ()):
                if u in nodes and u not in dist:
                    dist[u] = dist[v] + 1
                    frontier.append(u)
        for v in nodes:
            out[v] = max(out[v], dist.get(v, len(nodes)))
    return out


def _component_with(edges: set, queries: list[int]):
    """Connected component of `edges` holding every query, or None."""
    adj = _adjacency(edges)
    if queries[0] not in adj:
        return None
    comp = connected_component(adj, queries[0])
    if any(q not in comp for q in queries):
        return None
    return comp, {e for e in edges if e[0] in comp}, adj


def ctc_search(g: Graph, queries: Iterable[int]) -> CommunityResult:
    """
    Closest truss community: the connected k-truss with maximal k holding
    every query, shrunk by repeatedly deleting the node farthest from the
    queries (ties: largest id) while it remains a connected k-truss that
    holds them. Returns the node set left when no further deletion keeps
    that property.
    """
    qs = _check_queries(g, queries)
    truss = truss_numbers(g)

    found = None
    for k in sorted(set(truss.values()), reverse=True):
        found = _component_with({e for e, t in truss.items() if t >= k}, qs)
        if found is not None:
            break
    if found is None:
        raise NoCommunityError(f"No k-truss (k >= 2) connects queries {qs}")

    nodes, edges, adj = found
    while True:
        dist = _query_distance(adj, nodes, qs)
        candidates = [v for v in nodes if v not in qs]
        if not candidates:
            break
        far = max(candidates, key=lambda v: (dist[v], v))
        kept = _peel_to_truss({e for e in edges if far not in e}, k)
        step = _component_with(kept, qs)
        if step is None:
            break
        nodes, edges, adj = step

    return CommunityResult(frozenset(nodes), k, "ctc")


def ctc_with_fallback(g: Graph, queries: Iterable[int]) -> CommunityResult:
    """ctc_search, or the plain connected component of the queries when no truss holds them."""
    try:
        return ctc_search(g, queries)
    except NoCommunityError as e:
        qs = _check_queries(g, queries)
        comp = connected_component(g.adjacency, qs[0])
        logger.debug(f"{e}; falling back to the connected component of {qs[0]}")
        return CommunityResult(frozenset(comp | set(qs)), 2 if len(comp) > 1 else 0, "ctc-fallback")


def kcore_community(g: Graph, q: int) -> CommunityResult:
    """Connected component of q inside the k-core with k = core_number(q)."""
    if not 0 <= q < g.n:
        raise InputError(f"Query node {q} is not in the graph (n={g.n})")
    core = core_numbers(g)
    k = int(core[q])
    allowed = set(np.flatnonzero(core >= k).tolist())
    return CommunityResult(frozenset(connected_component(g.adjacency, q, allowed)), k, "kcore")


class _AlgorithmicSearcher(Searcher):
    learned = False

    def find(self, g: Graph, q: int) -> CommunityResult:
        raise NotImplementedError

    def predict(self, task) -> np.ndarray:
        out = np.zeros((len(task.queryset_queries), task.graph.n), dtype=np.float64)
        for i, q in enumerate(task.queryset_queries):
            out[i, list(self.find(task.graph, int(q)).nodes)] = 1.0
        return out


class CtcSearcher(_AlgorithmicSearcher):
    name = "ctc"

    def find(self, g, q):
        return ctc_with_fallback(g, [q])


class KCoreSearcher(_AlgorithmicSearcher):
    name = "kcore"

    def find(self, g, q):
        return kcore_community(g, q)
