from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np

from src.exceptions import InputError
from src.logging_config import setup_logger
from src.modules.graph import Graph, build_graph, with_attributes

logger = setup_logger(__name__)


@dataclass(frozen=True, eq=False)
class CommunitySet:
    communities: tuple[frozenset, ...]
    membership_index: tuple[tuple[int, ...], ...]

    @classmethod
    def from_communities(cls, communities: Iterable[Iterable[int]], node_count: int) -> "CommunitySet":
        comms = []
        for c in communities:
            members = frozenset(int(v) for v in c)
            if not members:
                continue
            bad = [v for v in members if not 0 <= v < node_count]
            if bad:
                raise InputError(f"Community member {bad[0]} is not a node of the graph")
            comms.append(members)
        index = [[] for _ in range(node_count)]
        for ci, members in enumerate(comms):
            for v in members:
                index[v].append(ci)
        return cls(tuple(comms), tuple(tuple(ix) for ix in index))

    def __len__(self) -> int:
        return len(self.communities)

    def of(self, v: int) -> tuple[int, ...]:
        return self.membership_index[v]

    def members_of(self, v: int) -> frozenset:
        """Union of every community containing v (empty if v belongs to none)."""
        ix = self.membership_index[v]
        if len(ix) == 1:
            return self.communities[ix[0]]
        return frozenset().union(*(self.communities[i] for i in ix))


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    communities: CommunitySet
    name: str


def _read_lines(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _ints(tokens: Iterable[str], path, lineno: int) -> list[int]:
    try:
        return [int(x) for x in tokens]
    except ValueError as e:
        raise InputError(f"{path}:{lineno}: expected integer values ({e})") from e


def _compact(tokens: Iterable[str]) -> list[str]:
    """Stable compaction order: numeric ids sorted by value, otherwise lexicographic."""
    unique = set(tokens)
    if all(t.lstrip("-").isdigit() for t in unique):
        return sorted(unique, key=int)
    return sorted(unique)


def _resolver(graph: Graph):
    if graph.node_labels is not None:
        table = {str(label): i for i, label in enumerate(graph.node_labels)}
        return table.get
    def by_index(token: str):
        try:
            v = int(token)
        except ValueError:
            return None
        return v if 0 <= v < graph.node_count else None
    return by_index


def load_edge_list(path) -> Graph:
    """Edge list "u v" per line ("#" comments allowed); ids compacted to [0, n)."""
    pairs = []
    for lineno, line in _read_lines(path):
        parts = line.split()
        if len(parts) < 2:
            raise InputError(f"{path}:{lineno}: expected two node ids, got '{line}'")
        pairs.append((parts[0], parts[1]))

    labels = _compact(t for p in pairs for t in p)
    index = {t: i for i, t in enumerate(labels)}
    graph = build_graph(((index[u], index[v]) for u, v in pairs), len(labels), node_labels=labels)
    logger.info(f"Loaded edge list {path}: n={graph.n}, m={graph.m}")
    return graph


def load_communities(path, graph: Graph, fmt: str = "cmty") -> CommunitySet:
    """
    fmt="cmty":   one community per line, whitespace-separated node ids (SNAP).
    fmt="labels": "node_id label" per line; one community per distinct label.
    Ids are resolved through the graph's compaction table.
    """
    resolve = _resolver(graph)

    def lookup(token: str, lineno: int) -> int:
        v = resolve(token)
        if v is None:
            raise InputError(f"{path}:{lineno}: node '{token}' is not in the graph")
        return v

    if fmt == "cmty":
        comms = [[lookup(t, lineno) for t in line.split()] for lineno, line in _read_lines(path)]
    elif fmt == "labels":
        by_label: dict[str, list[int]] = {}
        for lineno, line in _read_lines(path):
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'node_id label', got '{line}'")
            by_label.setdefault(parts[1], []).append(lookup(parts[0], lineno))
        comms = [by_label[k] for k in _compact(by_label)]
    else:
        raise InputError(f"Unknown community file format '{fmt}'")

    cs = CommunitySet.from_communities(comms, graph.node_count)
    logger.info(f"Loaded {len(cs)} communities from {path}")
    return cs


def load_attributes(path, graph: Graph) -> Graph:
    """Binary attribute rows "node_id a1 a2 ...". Nodes without a row get zeros."""
    resolve = _resolver(graph)
    rows: dict[int, list[int]] = {}
    width = None
    for lineno, line in _read_lines(path):
        parts = line.split()
        v = resolve(parts[0])
        if v is None:
            raise InputError(f"{path}:{lineno}: node '{parts[0]}' is not in the graph")
        values = _ints(parts[1:], path, lineno)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise InputError(f"{path}:{lineno}: expected {width} attributes, got {len(values)}")
        rows[v] = values
    attrs = np.zeros((graph.node_count, width or 0), dtype=np.uint8)
    for v, values in rows.items():
        attrs[v] = values
    return with_attributes(graph, attrs)


def load_linqs(content_path, cites_path, name: str = "linqs") -> DatasetBundle:
    """
    Raw LINQS citation data (Cora/Citeseer): ".content" rows are
    "paper_id w_1 ... w_d class_label", ".cites" rows are "cited citing".
    Citations that reference unknown papers are skipped.
    """
    ids, words, classes = [], [], []
    for lineno, line in _read_lines(content_path):
        parts = line.split()
        if len(parts) < 2:
            raise InputError(f"{content_path}:{lineno}: malformed content row")
        ids.append(parts[0])
        words.append(_ints(parts[1:-1], content_path, lineno))
        if len(words[-1]) != len(words[0]):
            raise InputError(f"{content_path}:{lineno}: expected {len(words[0])} word flags, got {len(words[-1])}")
        classes.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}

    pairs, skipped = [], 0
    for lineno, line in _read_lines(cites_path):
        parts = line.split()
        if len(parts) < 2:
            raise InputError(f"{cites_path}:{lineno}: expected two paper ids, got '{line}'")
        u, v = index.get(parts[0]), index.get(parts[1])
        if u is None or v is None:
            skipped += 1
            continue
        pairs.append((u, v))
    if skipped:
        logger.warning(f"Skipped {skipped} citations to papers missing from {content_path}")

    graph = build_graph(pairs, len(ids), np.asarray(words, dtype=np.uint8), node_labels=ids)
    by_label: dict[str, list[int]] = {}
    for i, c in enumerate(classes):
        by_label.setdefault(c, []).append(i)
    cs = CommunitySet.from_communities([by_label[c] for c in sorted(by_label)], graph.n)
    logger.info(f"Loaded {name}: n={graph.n}, m={graph.m}, |A|={graph.attribute_dim}, |C|={len(cs)}")
    return DatasetBundle(graph, cs, name)


def _ego_ids(directory: Path) -> list[tuple[str, Path]]:
    found = []
    for p in sorted(directory.rglob("*.edges")):
        found.append((p.stem, p.parent))
    return sorted(found, key=lambda x: (int(x[0]) if x[0].isdigit() else 0, x[0]))


def _read_featnames(path: Path) -> list[str]:
    names = []
    for _, line in _read_lines(path):
        parts = line.split(maxsplit=1)
        names.append(parts[1] if len(parts) > 1 else parts[0])
    return names


def load_ego_networks(directory) -> list[DatasetBundle]:
    """
    ego-Facebook layout: per ego id E the files E.edges, E.circles, E.feat,
    E.egofeat and optionally E.featnames. The ego is linked to every alter.
    Attribute columns are aligned across egos by feature name when every ego
    ships featnames, otherwise rows are zero-padded to the widest ego.
    """
    directory = Path(directory)
    if not directory.exists():
        raise InputError(f"Ego-network directory not found: {directory}")

    raw = []
    for ego, folder in _ego_ids(directory):
        circles_path = folder / f"{ego}.circles"
        if not circles_path.exists():
            raise InputError(f"Ego network {ego} has no circles file ({circles_path})")

        edges_path = folder / f"{ego}.edges"
        pairs = []
        for lineno, line in _read_lines(edges_path):
            parts = line.split()
            if len(parts) < 2:
                raise InputError(f"{edges_path}:{lineno}: expected two node ids, got '{line}'")
            pairs.append((parts[0], parts[1]))
        circles = []
        for _, line in _read_lines(circles_path):
            parts = line.split()
            circles.append(parts[1:])

        feats: dict[str, list[int]] = {}
        feat_path = folder / f"{ego}.feat"
        if feat_path.exists():
            for lineno, line in _read_lines(feat_path):
                parts = line.split()
                feats[parts[0]] = _ints(parts[1:], feat_path, lineno)
        egofeat_path = folder / f"{ego}.egofeat"
        if egofeat_path.exists():
            for lineno, line in _read_lines(egofeat_path):
                feats[ego] = _ints(line.split(), egofeat_path, lineno)
        names_path = folder / f"{ego}.featnames"
        names = _read_featnames(names_path) if names_path.exists() else None
        raw.append((ego, pairs, circles, feats, names))

    if not raw:
        return []

    aligned = all(r[4] is not None for r in raw)
    if aligned:
        vocab = sorted({name for r in raw for name in r[4]})
        column = {name: j for j, name in enumerate(vocab)}
        width = len(vocab)
    else:
        width = max((len(v) for r in raw for v in r[3].values()), default=0)

    bundles = []
    for ego, pairs, circles, feats, names in raw:
        tokens = {t for p in pairs for t in p} | {t for c in circles for t in c} | set(feats) | {ego}
        labels = _compact(tokens)
        index = {t: i for i, t in enumerate(labels)}
        ego_ix = index[ego]
        edge_pairs = [(index[u], index[v]) for u, v in pairs]
        edge_pairs += [(ego_ix, i) for i in range(len(labels)) if i != ego_ix]

        attrs = np.zeros((len(labels), width), dtype=np.uint8)
        for node, row in feats.items():
            if aligned:
                cols = [column[names[j]] for j, x in enumerate(row) if x and j < len(names)]
                attrs[index[node], cols] = 1
            else:
                attrs[index[node], :len(row)] = row

        graph = build_graph(edge_pairs, len(labels), attrs, node_labels=labels)
        cs = CommunitySet.from_communities([[index[t] for t in c] for c in circles], graph.n)
        bundles.append(DatasetBundle(graph, cs, ego))
        logger.info(f"Loaded ego network {ego}: n={graph.n}, m={graph.m}, |C|={len(cs)}")
    return bundles


def generate_sbm(block_sizes: Sequence[int], p_in: float, p_out: float, rng_seed: int = 0,
                 name: Optional[str] = None) -> DatasetBundle:
    """Planted-partition graph; every block is one ground-truth community."""
    if not (0.0 <= p_in <= 1.0 and 0.0 <= p_out <= 1.0):
        raise InputError(f"SBM probabilities must lie in [0, 1], got p_in={p_in}, p_out={p_out}")
    sizes = [int(b) for b in block_sizes]
    k = len(sizes)
    probs = [[p_in if i == j else p_out for j in range(k)] for i in range(k)]
    nxg = nx.stochastic_block_model(sizes, probs, seed=rng_seed)
    n = sum(sizes)
    graph = build_graph(nxg.edges(), n, node_labels=list(range(n)))

    blocks, start = [], 0
    for size in sizes:
        blocks.append(range(start, start + size))
        start += size
    cs = CommunitySet.from_communities(blocks, n)
    return DatasetBundle(graph, cs, name or f"sbm-{'-'.join(map(str, sizes))}")


def _label(graph: Graph, v: int) -> str:
    return str(graph.node_labels[v]) if graph.node_labels is not None else str(v)


def write_edge_list(path, graph: Graph) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# n={graph.n} m={graph.m}\n")
        for u, v in graph.edges:
            f.write(f"{_label(graph, u)}\t{_label(graph, v)}\n")


def write_communities(path, communities: CommunitySet, graph: Graph) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for members in communities.communities:
            f.write("\t".join(_label(graph, v) for v in sorted(members)) + "\n")


