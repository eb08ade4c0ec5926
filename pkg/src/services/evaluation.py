import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.config import DatasetConfig, ExperimentConfig, Scenario, config_hash, settings
from src.exceptions import ConfigurationError, InputError
from src.logging_config import run_log, setup_logger
from src.modules.base import Searcher, Validator
from src.modules.baselines import (FeatTransSearcher, GpnSearcher, MamlSearcher, ReptileSearcher,
                                   SupervisedSearcher)
from src.modules.cgnp import CgnpSearcher, predict_community
from src.modules.datasets import (DatasetBundle, generate_sbm, load_attributes, load_communities,
                                  load_edge_list, load_ego_networks, load_linqs)
from src.modules.search import CtcSearcher, KCoreSearcher
from src.modules.tasks import Task, TaskSet, build_scenario_taskset
from src.utils.serialization import (MANIFEST, load_checkpoint, load_taskset, save_checkpoint, save_taskset,
                                     task_digest, write_csv, write_json)

logger = setup_logger(__name__)

METRIC_COLUMNS = ["acc", "pre", "rec", "f1"]


@dataclass(frozen=True)
class Metrics:
    acc: float
    pre: float
    rec: float
    f1: float

    def as_dict(self) -> dict:
        return {"acc": self.acc, "pre": self.pre, "rec": self.rec, "f1": self.f1}


def compute_metrics(predicted, truth, n: Optional[int] = None) -> Metrics:
    """
    `predicted` is a node set; `truth` a boolean membership vector (or a node
    set, then `n` is required). Accuracy counts agreement over all n nodes.
    """
    if isinstance(truth, (set, frozenset)):
        if n is None:
            raise InputError("n is required when truth is given as a node set")
        truth_set = {int(v) for v in truth}
    else:
        vec = np.asarray(truth, dtype=bool)
        n = vec.size if n is None else n
        truth_set = set(np.flatnonzero(vec).tolist())
    if not truth_set:
        raise InputError("Ground-truth community is empty")
    pred_set = {int(v) for v in predicted}

    hit = len(pred_set & truth_set)
    pre = hit / len(pred_set) if pred_set else 0.0
    rec = hit / len(truth_set)
    f1 = 2 * pre * rec / (pre + rec) if pre + rec > 0 else 0.0
    wrong = len(pred_set ^ truth_set)
    return Metrics(acc=(n - wrong) / n, pre=pre, rec=rec, f1=f1)


def build_searcher(cfg: ExperimentConfig) -> Searcher:
    name = cfg.model
    if name.startswith("cgnp-"):
        return CgnpSearcher(cfg.cgnp_settings(), cfg.seed)
    searchers = {
        "supervised": SupervisedSearcher,
        "feattrans": FeatTransSearcher,
        "maml": MamlSearcher,
        "reptile": ReptileSearcher,
        "gpn": GpnSearcher,
    }
    if name in searchers:
        return searchers[name](cfg.baseline, cfg.seed)
    if name == "ctc":
        return CtcSearcher()
    if name == "kcore":
        return KCoreSearcher()
    raise ConfigurationError(f"Unknown model '{name}'")


def load_dataset(ds: DatasetConfig) -> list[DatasetBundle]:
    if ds.kind == "sbm":
        return [generate_sbm(ds.sbm_blocks, ds.sbm_p_in, ds.sbm_p_out, ds.sbm_seed, ds.name)]
    if ds.kind == "linqs":
        return [load_linqs(ds.content, ds.cites, ds.name)]
    if ds.kind == "ego":
        bundles = load_ego_networks(ds.ego_dir)
        if not bundles:
            raise ConfigurationError(f"No ego networks found under {ds.ego_dir}")
        return bundles

    graph = load_edge_list(ds.edges)
    if ds.attributes is not None:
        graph = load_attributes(ds.attributes, graph)
    if ds.communities is not None:
        communities = load_communities(ds.communities, graph, "cmty")
    elif ds.labels is not None:
        communities = load_communities(ds.labels, graph, "labels")
    else:
        raise ConfigurationError(f"Dataset '{ds.name}' needs a communities or labels file")
    return [DatasetBundle(graph, communities, ds.name)]


def mean_f1(predict, tasks: Sequence[Task], threshold: float) -> float:
    scores = []
    for task in tasks:
        probs = predict(task)
        for i, q in enumerate(task.queryset_queries):
            pred = predict_community(probs[i], int(q), threshold)
            scores.append(compute_metrics(pred, task.queryset_membership[i]).f1)
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class ResultsTable:
    model: str
    scenario: str
    shots: int
    rows: pd.DataFrame
    train_seconds: float = 0.0
    test_seconds: float = 0.0
    config_hash: str = ""
    seed: int = 0
    task_digests: dict = field(default_factory=dict)
    uses_queryset_labels: bool = False
    paths: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        if self.rows.empty:
            return {c: 0.0 for c in METRIC_COLUMNS}
        return {c: float(self.rows[c].mean()) for c in METRIC_COLUMNS}

    def per_task(self) -> pd.DataFrame:
        return self.rows.groupby("task_id", sort=False)[METRIC_COLUMNS].mean().reset_index()

    def summary(self) -> dict:
        return {
            "model": self.model,
            "scenario": self.scenario,
            "shots": self.shots,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_tasks": int(self.rows["task_id"].nunique()) if not self.rows.empty else 0,
            "n_queries": int(len(self.rows)),
            "means": self.means,
            "task_digests": self.task_digests,
            "gpn_queryset_labels": self.uses_queryset_labels,
            "timing": {
                "train_seconds": self.train_seconds,
                "test_seconds": self.test_seconds,
                "finished_at": datetime.now(timezone.utc).isoformat(),
            },
        }


class ExperimentRunner:
    """Loads data, builds (or reloads) tasks, trains, evaluates and writes results for one config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.out_dir = Path(cfg.output_dir)
        self.stem = f"{cfg.model}_{cfg.scenario.scenario.value}_{cfg.scenario.shots}shot"

    # 1. Data
    def load_bundles(self) -> list[DatasetBundle]:
        scenario = self.cfg.scenario.scenario
        bundles = load_dataset(self.cfg.dataset)
        if scenario is Scenario.MGDD:
            if self.cfg.target_dataset is None:
                raise ConfigurationError("MGDD needs a [target_dataset] section")
            return [bundles[0], load_dataset(self.cfg.target_dataset)[0]]
        if scenario is Scenario.MGOD:
            return bundles
        return bundles[:1]

    def build_tasks(self) -> TaskSet:
        tasks_dir = self.cfg.tasks_dir
        if tasks_dir is not None and (Path(tasks_dir) / MANIFEST).exists():
            taskset, _ = load_taskset(tasks_dir)
            return taskset
        taskset = build_scenario_taskset(self.load_bundles(), self.cfg.scenario)
        if tasks_dir is not None:
            save_taskset(taskset, tasks_dir, self.cfg.scenario.model_dump(mode="json"), self.cfg.seed)
        return taskset

    def digests(self, taskset: TaskSet) -> dict:
        out = {split: [task_digest(t) for t in tasks] for split, tasks in taskset.splits()}
        for split, values in out.items():
            logger.debug(f"{split} task digests: {values}")
        return out

    # 2. Training
    def validator(self, tasks: Sequence[Task], threshold: float) -> Validator:
        return lambda predict: mean_f1(predict, tasks, threshold)

    @property
    def checkpoint_path(self) -> Path:
        return self.out_dir / f"{self.cfg.model}_model.pt"

    def train(self, taskset: TaskSet, searcher: Optional[Searcher] = None) -> tuple[Searcher, float]:
        searcher = searcher or build_searcher(self.cfg)
        if not searcher.learned:
            return searcher, 0.0
        if not taskset.train and searcher.name != "supervised":
            raise ConfigurationError("No training tasks to fit on")
        start = time.perf_counter()
        searcher.fit(taskset.train, taskset.valid, self.validator(taskset.valid, searcher.threshold))
        seconds = time.perf_counter() - start
        logger.info(f"🚀 Trained {searcher.name} in {seconds:.1f}s")
        if searcher.model is not None:
            in_dim = taskset.train[0].feature_dim
            save_checkpoint(self.checkpoint_path, searcher.name, searcher.model,
                            self.cfg.model_dump(mode="json"), self.hash, in_dim)
        return searcher, seconds

    def restore(self) -> Searcher:
        """Searcher rebuilt from the checkpoint written by `train`."""
        searcher = build_searcher(self.cfg)
        if not searcher.learned or searcher.name == "supervised":
            return searcher
        payload = load_checkpoint(self.checkpoint_path)
        if payload["model"] != searcher.name:
            raise ConfigurationError(f"Checkpoint holds '{payload['model']}', config asks for '{searcher.name}'")
        if payload["config_hash"] != self.hash:
            logger.warning("Checkpoint was trained under a different configuration hash")
        searcher.build(int(payload["in_dim"]))
        searcher.model.load_state_dict(payload["state"])
        return searcher

    # 3. Evaluation
    def evaluate(self, searcher: Searcher, tasks: Sequence[Task]) -> tuple[pd.DataFrame, pd.DataFrame, float]:
        rows, timing = [], []
        start = time.perf_counter()
        try:
            for task in tqdm(tasks, desc=f"eval {searcher.name}", disable=not settings.SHOW_PROGRESS):
                t0 = time.perf_counter()
                probs = searcher.predict(task)
                per_query_ms = 1000.0 * (time.perf_counter() - t0) / max(1, len(task.queryset_queries))
                for i, q in enumerate(task.queryset_queries):
                    pred = predict_community(probs[i], int(q), searcher.threshold)
                    m = compute_metrics(pred, task.queryset_membership[i])
                    rows.append({"task_id": task.task_id, "query_id": int(q), **m.as_dict()})
                    timing.append({"task_id": task.task_id, "query_id": int(q), "predict_ms": per_query_ms})
        except Exception:
            if rows:
                partial = self.out_dir / f"{self.stem}.partial.csv"
                write_csv(partial, pd.DataFrame(rows), self._header())
                logger.error(f"Evaluation failed; {len(rows)} partial rows flushed to {partial}")
            raise
        return (pd.DataFrame(rows, columns=["task_id", "query_id", *METRIC_COLUMNS]),
                pd.DataFrame(timing, columns=["task_id", "query_id", "predict_ms"]),
                time.perf_counter() - start)

    def _header(self) -> str:
        return f"config_hash={self.hash} seed={self.cfg.seed}"

    def write(self, table: ResultsTable, timing: pd.DataFrame) -> ResultsTable:
        paths = {
            "results": self.out_dir / f"{self.stem}.csv",
            "timing": self.out_dir / f"{self.stem}_timing.csv",
            "summary": self.out_dir / f"{self.stem}_summary.json",
        }
        write_csv(paths["results"], table.rows, self._header())
        write_csv(paths["timing"], timing)
        write_json(paths["summary"], table.summary())
        table.paths = {k: str(v) for k, v in paths.items()}
        return table

    def run(self, taskset: Optional[TaskSet] = None, searcher: Optional[Searcher] = None,
            train: bool = True) -> ResultsTable:
        cfg = self.cfg
        with run_log(self.out_dir):
            logger.info(f"Running {cfg.model} on {cfg.scenario.scenario.value} "
                        f"{cfg.scenario.shots}-shot (config {self.hash[:12]}, seed {cfg.seed})")
            taskset = self.build_tasks() if taskset is None else taskset
            digests = self.digests(taskset)
            if train:
                searcher, train_seconds = self.train(taskset, searcher)
            else:
                searcher, train_seconds = (self.restore() if searcher is None else searcher), 0.0
            if searcher.uses_queryset_labels:
                logger.warning(f"{searcher.name} builds test prototypes from sampled queryset labels")

            rows, timing, test_seconds = self.evaluate(searcher, taskset.test)
            table = ResultsTable(
                model=cfg.model, scenario=cfg.scenario.scenario.value, shots=cfg.scenario.shots, rows=rows,
                train_seconds=train_seconds, test_seconds=test_seconds, config_hash=self.hash, seed=cfg.seed,
                task_digests=digests, uses_queryset_labels=searcher.uses_queryset_labels,
            )
            self.write(table, timing)
            means = table.means
            logger.info(f"✅ {cfg.model}: F1={means['f1']:.4f} Pre={means['pre']:.4f} "
                        f"Rec={means['rec']:.4f} Acc={means['acc']:.4f} over {len(rows)} queries")
            return table


def run_experiment(cfg: ExperimentConfig) -> ResultsTable:
    return ExperimentRunner(cfg).run()
