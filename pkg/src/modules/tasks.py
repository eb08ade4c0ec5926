from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from src.config import FeatureMode, Scenario, ScenarioConfig, settings
from src.exceptions import ConfigurationError, SamplingError
from src.logging_config import setup_logger
from src.modules.datasets import DatasetBundle
from src.modules.graph import Graph, bfs_order, clustering_coefficients, core_numbers, induced_subgraph

logger = setup_logger(__name__)


@dataclass(frozen=True)
class QueryLabels:
    query: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.positives) + len(self.negatives)


@dataclass(frozen=True, eq=False)
class Task:
    """
    One episode (G, Q, L). `support` holds the labelled support pairs;
    `queryset_membership[i]` is the full ground-truth membership vector of
    `queryset_queries[i]` over the task graph (used for training-label
    sampling and for metrics, never fed to a model at test time).
    """
    graph: Graph
    support: tuple[QueryLabels, ...]
    support_membership: np.ndarray
    queryset_queries: np.ndarray
    queryset_membership: np.ndarray
    base_features: np.ndarray
    pos_per_query: int = 5
    neg_per_query: int = 10
    task_id: str = "task"
    source: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def shots(self) -> int:
        return len(self.support)

    @property
    def support_queries(self) -> tuple[int, ...]:
        return tuple(s.query for s in self.support)

    @property
    def feature_dim(self) -> int:
        return int(self.base_features.shape[1])

    def truth(self, i: int) -> set:
        return set(np.flatnonzero(self.queryset_membership[i]).tolist())


def assemble_base_features(g: Graph, mode: FeatureMode) -> np.ndarray:
    """Rows [attributes | core number | local clustering coefficient]."""
    mode = FeatureMode(mode)
    structural = np.stack([core_numbers(g).astype(np.float64), clustering_coefficients(g)], axis=1)
    if mode is FeatureMode.STRUCTURAL_ONLY:
        return structural
    if g.attributes is None:
        raise ConfigurationError("Feature mode 'attrs+structural' needs a graph with node attributes")
    return np.concatenate([g.attributes.astype(np.float64), structural], axis=1)


def sample_query_labels(membership: np.ndarray, q: int, pos: int, neg: int,
                        rng: np.random.Generator) -> QueryLabels:
    """Positives from the query's community minus q, negatives from outside it, no replacement."""
    positives = np.flatnonzero(membership)
    positives = positives[positives != q]
    negatives = np.flatnonzero(~membership)
    if positives.size == 0:
        raise SamplingError(f"Query {q} has no community members besides itself")
    p = rng.choice(positives, size=min(pos, positives.size), replace=False)
    n = rng.choice(negatives, size=min(neg, negatives.size), replace=False) if negatives.size else np.empty(0, int)
    return QueryLabels(int(q), tuple(sorted(int(v) for v in p)), tuple(sorted(int(v) for v in n)))


def queryset_labels(task: Task, rng: np.random.Generator, pos: Optional[int] = None,
                    neg: Optional[int] = None) -> list[QueryLabels]:
    """Fresh training labels for every queryset query, drawn from its membership vector."""
    pos = task.pos_per_query if pos is None else pos
    neg = task.neg_per_query if neg is None else neg
    return [
        sample_query_labels(task.queryset_membership[i], int(q), pos, neg, rng)
        for i, q in enumerate(task.queryset_queries)
    ]


def relabel_support(task: Task, pos: int, neg: int, rng: np.random.Generator) -> Task:
    """Same task with support labels redrawn at new per-query counts."""
    support = tuple(
        sample_query_labels(task.support_membership[i], s.query, pos, neg, rng)
        for i, s in enumerate(task.support)
    )
    return Task(task.graph, support, task.support_membership, task.queryset_queries,
                task.queryset_membership, task.base_features, pos, neg, task.task_id, task.source,
                dict(task.metadata))


def _local_membership(bundle: DatasetBundle, parents: Sequence[int]):
    """Per local node: its community ids and the local membership vector of the union."""
    local = {v: i for i, v in enumerate(parents)}
    n = len(parents)
    comm_ids, rows = [], []
    for v in parents:
        ids = bundle.communities.of(v)
        row = np.zeros(n, dtype=bool)
        for u in bundle.communities.members_of(v):
            j = local.get(u)
            if j is not None:
                row[j] = True
        comm_ids.append(frozenset(ids))
        rows.append(row)
    return comm_ids, rows


def sample_task(bundle: DatasetBundle, cfg: ScenarioConfig, rng: np.random.Generator,
                allowed_communities: Optional[set] = None, use_full_graph: bool = False,
                feature_mode: Optional[FeatureMode] = None, task_id: str = "task") -> Task:
    """
    BFS subgraph around a random community-bearing seed, then support and
    queryset queries. For SGDC the queryset queries come from communities
    disjoint from every support query's communities.
    """
    g, cs = bundle.graph, bundle.communities
    allowed = None if allowed_communities is None else frozenset(allowed_communities)

    # 1. Subgraph
    if use_full_graph:
        parents = list(range(g.n))
    else:
        seeds = [v for v in range(g.n) if cs.of(v) and (allowed is None or set(cs.of(v)) & allowed)]
        if not seeds:
            raise SamplingError(f"No community-bearing seed nodes in {bundle.name}")
        seed = int(rng.choice(seeds))
        parents = bfs_order(g, seed, cfg.subgraph_size)
    sub = induced_subgraph(g, parents)
    comm_ids, rows = _local_membership(bundle, parents)

    # 2. Eligible queries: in a community, every community allowed, at least one positive
    eligible = np.array([
        i for i in range(sub.n)
        if comm_ids[i] and (allowed is None or comm_ids[i] <= allowed) and rows[i].sum() >= 2
    ], dtype=np.int64)
    query_count = cfg.query_count
    if use_full_graph and cfg.shots < eligible.size < cfg.shots + query_count:
        query_count = int(eligible.size) - cfg.shots
        logger.warning(f"{bundle.name}: only {eligible.size} eligible queries, queryset shrunk to {query_count}")
    need = cfg.shots + query_count
    if eligible.size < need:
        raise SamplingError(f"Subgraph has {eligible.size} eligible queries, need {need}")

    # 3. Support and queryset queries
    if cfg.scenario is Scenario.SGDC:
        q0 = int(rng.choice(eligible))
        c_s = comm_ids[q0]
        support_pool = np.array([i for i in eligible if i != q0 and comm_ids[i] <= c_s], dtype=np.int64)
        query_pool = np.array([i for i in eligible if not (comm_ids[i] & c_s)], dtype=np.int64)
        if support_pool.size < cfg.shots - 1 or query_pool.size < query_count:
            raise SamplingError(
                f"Disjoint-community split failed: {support_pool.size + 1} support / {query_pool.size} query candidates"
            )
        rest = rng.choice(support_pool, size=cfg.shots - 1, replace=False) if cfg.shots > 1 else []
        support_q = [q0] + [int(v) for v in rest]
        query_q = rng.choice(query_pool, size=query_count, replace=False)
    else:
        picked = rng.choice(eligible, size=need, replace=False)
        support_q = [int(v) for v in picked[:cfg.shots]]
        query_q = picked[cfg.shots:]

    # 4. Labels and features
    support = tuple(
        sample_query_labels(rows[q], q, cfg.pos_per_query, cfg.neg_per_query, rng) for q in support_q
    )
    query_q = np.asarray(query_q, dtype=np.int64)
    features = assemble_base_features(sub, feature_mode or cfg.feature_mode)
    return Task(
        graph=sub,
        support=support,
        support_membership=np.stack([rows[q] for q in support_q]),
        queryset_queries=query_q,
        queryset_membership=np.stack([rows[q] for q in query_q]),
        base_features=features,
        pos_per_query=cfg.pos_per_query,
        neg_per_query=cfg.neg_per_query,
        task_id=task_id,
        source=bundle.name,
    )


@dataclass
class TaskSet:
    train: list[Task]
    valid: list[Task]
    test: list[Task]

    def splits(self):
        return (("train", self.train), ("valid", self.valid), ("test", self.test))

    def __len__(self) -> int:
        return len(self.train) + len(self.valid) + len(self.test)


def _sample_with_retries(bundle, cfg, rng, **kwargs) -> Task:
    for attempt in Retrying(
        stop=stop_after_attempt(settings.SAMPLING_RETRIES),
        retry=retry_if_exception_type(SamplingError),
        reraise=True,
    ):
        with attempt:
            if attempt.retry_state.attempt_number > 1:
                logger.warning(f"Resampling {kwargs.get('task_id')} (attempt {attempt.retry_state.attempt_number})")
            return sample_task(bundle, cfg, rng, **kwargs)


def _split_communities(bundle: DatasetBundle, rng: np.random.Generator) -> tuple[set, set]:
    k = len(bundle.communities)
    if k < 4:
        raise ConfigurationError(
            f"SGDC needs at least 4 communities to hold out disjoint ones, {bundle.name} has {k}"
        )
    order = rng.permutation(k)
    cut = k // 2
    return set(order[:cut].tolist()), set(order[cut:].tolist())


def build_scenario_taskset(bundles: Sequence[DatasetBundle], cfg: ScenarioConfig) -> TaskSet:
    """
    SGSC/SGDC: all splits from bundles[0] (SGDC holds out half of the
    communities for valid/test). MGOD: each bundle is one whole-graph task,
    split 60/20/20 in the given order. MGDD: train from bundles[0],
    valid/test from bundles[1], structural features only.
    """
    if not bundles:
        raise ConfigurationError("No dataset bundles given")
    scenario = Scenario(cfg.scenario)
    master = np.random.SeedSequence(cfg.rng_seed)

    if scenario is Scenario.MGOD:
        if len(bundles) < 3:
            raise ConfigurationError(f"MGOD needs at least 3 graphs, got {len(bundles)}")
        n_hold = max(1, round(0.2 * len(bundles)))
        n_train = len(bundles) - 2 * n_hold
        children = master.spawn(len(bundles))
        tasks = [
            _sample_with_retries(b, cfg, np.random.default_rng(s), use_full_graph=True, task_id=f"ego_{b.name}")
            for b, s in zip(bundles, children)
        ]
        ts = TaskSet(tasks[:n_train], tasks[n_train:n_train + n_hold], tasks[n_train + n_hold:])
        logger.info(f"Built MGOD task set: {len(ts.train)}/{len(ts.valid)}/{len(ts.test)}")
        return ts

    feature_mode = cfg.feature_mode
    if scenario is Scenario.MGDD:
        if len(bundles) < 2 or bundles[0] is bundles[1]:
            raise ConfigurationError("MGDD needs a source graph and a different target graph")
        if feature_mode is not FeatureMode.STRUCTURAL_ONLY:
            logger.info("MGDD uses structural-only features (attribute vocabularies differ across graphs)")
        feature_mode = FeatureMode.STRUCTURAL_ONLY
        roles = {"train": bundles[0], "valid": bundles[1], "test": bundles[1]}
    else:
        roles = {"train": bundles[0], "valid": bundles[0], "test": bundles[0]}

    partition_seed, *children = master.spawn(1 + cfg.n_train + cfg.n_valid + cfg.n_test)
    pools = {"train": None, "valid": None, "test": None}
    if scenario is Scenario.SGDC:
        train_pool, held_out = _split_communities(bundles[0], np.random.default_rng(partition_seed))
        pools = {"train": train_pool, "valid": held_out, "test": held_out}

    counts = {"train": cfg.n_train, "valid": cfg.n_valid, "test": cfg.n_test}
    out: dict[str, list[Task]] = {}
    it = iter(children)
    for split, count in counts.items():
        out[split] = [
            _sample_with_retries(
                roles[split], cfg, np.random.default_rng(next(it)),
                allowed_communities=pools[split], feature_mode=feature_mode, task_id=f"{split}_{i:03d}",
            )
            for i in range(count)
        ]
    ts = TaskSet(out["train"], out["valid"], out["test"])
    logger.info(f"Built {scenario.value.upper()} task set: {len(ts.train)}/{len(ts.valid)}/{len(ts.test)}")
    return ts
