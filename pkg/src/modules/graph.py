import heapq
from collections import deque
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from src.exceptions import InputError
from src.logging_config import setup_logger

logger = setup_logger(__name__)

Edge = tuple[int, int]


@dataclass(frozen=True, eq=False)
class Graph:
    """
    Immutable undirected simple graph.

    `edges` holds every undirected edge once as (u, v) with u < v, sorted.
    `adjacency[v]` is the sorted neighbour tuple of v. `node_labels[i]` is the
    id of local node i in the graph it came from (original dataset id for
    loaded graphs, parent index for sampled subgraphs).
    """
    node_count: int
    edges: tuple[Edge, ...]
    adjacency: tuple[tuple[int, ...], ...]
    attributes: Optional[np.ndarray] = None
    node_labels: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.node_count

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def attribute_dim(self) -> int:
        return 0 if self.attributes is None else int(self.attributes.shape[1])

    def degree(self, v: int) -> int:
        return len(self.adjacency[v])

    def neighbors(self, v: int) -> tuple[int, ...]:
        return self.adjacency[v]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.neighbor_sets[u]

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.fromiter((len(a) for a in self.adjacency), dtype=np.int64, count=self.node_count)

    @cached_property
    def neighbor_sets(self) -> tuple[frozenset, ...]:
        return tuple(frozenset(a) for a in self.adjacency)

    @cached_property
    def edge_index(self) -> np.ndarray:
        """Directed 2 x 2m index (both orientations), source row first."""
        if not self.edges:
            return np.zeros((2, 0), dtype=np.int64)
        e = np.asarray(self.edges, dtype=np.int64)
        return np.ascontiguousarray(np.concatenate([e.T, e[:, ::-1].T], axis=1))


def _check_attributes(attributes, node_count: int) -> Optional[np.ndarray]:
    if attributes is None:
        return None
    a = np.asarray(attributes)
    if a.ndim != 2 or a.shape[0] != node_count:
        raise InputError(
            f"Attribute matrix has {a.shape[0] if a.ndim else 0} rows, expected {node_count}"
        )
    if a.size and not np.isin(a, (0, 1)).all():
        raise InputError("Attribute matrix must be binary")
    a = a.astype(np.uint8, copy=True)
    a.setflags(write=False)
    return a


def build_graph(edge_pairs: Iterable[Sequence[int]], node_count: int,
                attributes=None, node_labels: Optional[Sequence] = None) -> Graph:
    """Deduplicate, drop self-loops and symmetrise raw pairs into a Graph."""
    if node_count < 0:
        raise InputError(f"node_count must be nonnegative, got {node_count}")
    seen = set()
    for pair in edge_pairs:
        u, v = int(pair[0]), int(pair[1])
        if not (0 <= u < node_count and 0 <= v < node_count):
            raise InputError(f"Edge ({u}, {v}) has a node id outside [0, {node_count})")
        if u == v:
            continue
        seen.add((u, v) if u < v else (v, u))

    edges = tuple(sorted(seen))
    adj = [[] for _ in range(node_count)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    adjacency = tuple(tuple(sorted(a)) for a in adj)

    if node_labels is not None:
        node_labels = tuple(node_labels)
        if len(node_labels) != node_count:
            raise InputError(f"node_labels has {len(node_labels)} entries, expected {node_count}")

    return Graph(node_count, edges, adjacency, _check_attributes(attributes, node_count), node_labels)


def with_attributes(g: Graph, attributes) -> Graph:
    return replace(g, attributes=_check_attributes(attributes, g.node_count))


def induced_subgraph(g: Graph, nodes: Sequence[int]) -> Graph:
    """Subgraph induced by `nodes`; local id i is nodes[i], recorded in node_labels."""
    local = {int(v): i for i, v in enumerate(nodes)}
    pairs = []
    for v, i in local.items():
        for u in g.adjacency[v]:
            j = local.get(u)
            if j is not None and i < j:
                pairs.append((i, j))
    attrs = None if g.attributes is None else g.attributes[np.asarray(nodes, dtype=np.int64)]
    return build_graph(pairs, len(local), attrs, node_labels=[int(v) for v in nodes])


def core_numbers(g: Graph) -> np.ndarray:
    """k-core decomposition by bucket peeling of minimum-degree nodes."""
    n = g.node_count
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    deg = [len(a) for a in g.adjacency]
    max_deg = max(deg)

    # bucket sort nodes by degree
    bins = [0] * (max_deg + 1)
    for d in deg:
        bins[d] += 1
    start = 0
    for d in range(max_deg + 1):
        bins[d], start = start, start + bins[d]
    pos = [0] * n
    order = [0] * n
    for v in range(n):
        pos[v] = bins[deg[v]]
        order[pos[v]] = v
        bins[deg[v]] += 1
    for d in range(max_deg, 0, -1):
        bins[d] = bins[d - 1]
    bins[0] = 0

    for i in range(n):
        v = order[i]
        for u in g.adjacency[v]:
            if deg[u] > deg[v]:
                du, pu = deg[u], pos[u]
                pw = bins[du]
                w = order[pw]
                if u != w:
                    order[pu], order[pw] = w, u
                    pos[u], pos[w] = pw, pu
                bins[du] += 1
                deg[u] -= 1
    return np.asarray(deg, dtype=np.int64)


def clustering_coefficients(g: Graph) -> np.ndarray:
    """lcc(v) = 2 T(v) / (deg(v) (deg(v) - 1)); zero below degree 2."""
    out = np.zeros(g.node_count, dtype=np.float64)
    sets = g.neighbor_sets
    for v, nbrs in enumerate(g.adjacency):
        k = len(nbrs)
        if k < 2:
            continue
        links = sum(len(sets[u] & sets[v]) for u in nbrs) // 2
        out[v] = 2.0 * links / (k * (k - 1))
    return out


def bfs_order(g: Graph, seed_node: int, limit: Optional[int] = None) -> list[int]:
    """FIFO visiting order from seed, neighbours enqueued in ascending id."""
    if not 0 <= seed_node < g.node_count:
        raise InputError(f"Seed node {seed_node} is not in the graph")
    limit = g.node_count if limit is None else limit
    order = [seed_node]
    seen = {seed_node}
    queue = deque([seed_node])
    while queue and len(order) < limit:
        v = queue.popleft()
        for u in g.adjacency[v]:
            if u not in seen:
                seen.add(u)
                order.append(u)
                queue.append(u)
                if len(order) >= limit:
                    break
    return order


def bfs_subgraph(g: Graph, seed_node: int, target_size: int) -> Graph:
    if target_size < 1:
        raise InputError(f"target_size must be >= 1, got {target_size}")
    return induced_subgraph(g, bfs_order(g, seed_node, target_size))


def connected_component(adjacency: Sequence[Iterable[int]], start: int,
                        allowed: Optional[set] = None) -> set:
    """Nodes reachable from start, optionally restricted to `allowed`."""
    if allowed is not None and start not in allowed:
        return set()
    seen = {start}
    queue = deque([start])
    while queue:
        v = queue.popleft()
        for u in adjacency[v]:
            if u not in seen and (allowed is None or u in allowed):
                seen.add(u)
                queue.append(u)
    return seen


def edge_key(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


def truss_numbers(g: Graph) -> dict[Edge, int]:
    """Per-edge trussness by triangle-support counting and minimum-support peeling."""
    nbrs = [set(a) for a in g.adjacency]
    support = {(u, v): len(nbrs[u] & nbrs[v]) for u, v in g.edges}
    heap = [(s, e) for e, s in support.items()]
    heapq.heapify(heap)

    truss: dict[Edge, int] = {}
    k = 2
    while heap:
        s, e = heapq.heappop(heap)
        if e in truss or s != support[e]:
            continue  # stale entry
        k = max(k, s + 2)
        truss[e] = k
        u, v = e
        for w in nbrs[u] & nbrs[v]:
            for f in (edge_key(u, w), edge_key(v, w)):
                support[f] -= 1
                heapq.heappush(heap, (support[f], f))
        nbrs[u].discard(v)
        nbrs[v].discard(u)
    return truss
