import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.config import BaselineConfig, CgnpConfig, FeatureMode, ScenarioConfig  # noqa: E402
from src.modules.datasets import CommunitySet, DatasetBundle, generate_sbm  # noqa: E402
from src.modules.graph import build_graph  # noqa: E402
from src.modules.tasks import Task, assemble_base_features, build_scenario_taskset, sample_query_labels  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end accuracy targets (need --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def triangle():
    return build_graph([(0, 1), (1, 2), (0, 2)], 3)


@pytest.fixture
def two_cliques() -> DatasetBundle:
    """Two 5-cliques {0..4} and {5..9} joined by the edge (4, 5)."""
    edges = [(u, v) for block in (range(0, 5), range(5, 10)) for u in block for v in block if u < v]
    edges.append((4, 5))
    graph = build_graph(edges, 10)
    return DatasetBundle(graph, CommunitySet.from_communities([range(0, 5), range(5, 10)], 10), "two-cliques")


@pytest.fixture
def make_task():
    """Task over a whole bundle graph with chosen support and queryset queries."""
    def factory(bundle, support=(0,), queries=(1, 6), pos=2, neg=2, seed=0,
                mode=FeatureMode.STRUCTURAL_ONLY, task_id="toy"):
        rng = np.random.default_rng(seed)
        n = bundle.graph.n

        def membership(q):
            row = np.zeros(n, dtype=bool)
            row[list(bundle.communities.members_of(q))] = True
            return row

        return Task(
            graph=bundle.graph,
            support=tuple(sample_query_labels(membership(q), q, pos, neg, rng) for q in support),
            support_membership=np.stack([membership(q) for q in support]),
            queryset_queries=np.array(queries, dtype=np.int64),
            queryset_membership=np.stack([membership(q) for q in queries]),
            base_features=assemble_base_features(bundle.graph, mode),
            pos_per_query=pos,
            neg_per_query=neg,
            task_id=task_id,
            source=bundle.name,
        )
    return factory


@pytest.fixture(scope="session")
def sbm_bundle() -> DatasetBundle:
    return generate_sbm([40, 40], 0.3, 0.02, rng_seed=0)


@pytest.fixture(scope="session")
def small_scenario() -> ScenarioConfig:
    return ScenarioConfig(
        subgraph_size=80, query_count=10, pos_per_query=5, neg_per_query=10,
        n_train=6, n_valid=2, n_test=2, feature_mode=FeatureMode.STRUCTURAL_ONLY, rng_seed=0,
    )


@pytest.fixture(scope="session")
def sbm_taskset(sbm_bundle, small_scenario):
    return build_scenario_taskset([sbm_bundle], small_scenario)


@pytest.fixture
def small_cgnp() -> CgnpConfig:
    return CgnpConfig(hidden_dim=8, num_layers=2, dropout=0.0, mlp_hidden=16, attention_dim=8,
                      epochs=2, lr=5e-3, valid_every=1)


@pytest.fixture
def small_baseline() -> BaselineConfig:
    return BaselineConfig(hidden_dim=8, num_layers=2, dropout=0.0, epochs=2, inner_steps_train=2,
                          inner_steps_test=2, lr=5e-3, valid_every=1)
