import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from src.config import CombineMode, ExperimentConfig, LayerKind
from src.exceptions import ConfigurationError, InputError
from src.logging_config import setup_logger
from src.modules.tasks import Task, TaskSet, relabel_support
from src.services.evaluation import METRIC_COLUMNS, ExperimentRunner
from src.utils.serialization import write_csv

logger = setup_logger(__name__)

# (positive %, negative %) pairs from 2%/10% to 20%/100%
DEFAULT_RATIO_POINTS = ((2, 10), (5, 25), (10, 50), (15, 75), (20, 100))
NEGATIVE_POOL = 50


def ratio_counts(task: Task, pos_pct: float, neg_pct: float) -> tuple[int, int]:
    """
    Positives: pos_pct of the support queries' mean community size in the
    task graph (query excluded). Negatives: neg_pct of a 50-node pool. Both
    floored at 1.
    """
    available = float(np.mean(task.support_membership.sum(axis=1) - 1))
    pos = max(1, int(round(pos_pct / 100.0 * available)))
    neg = max(1, int(round(neg_pct / 100.0 * NEGATIVE_POOL)))
    return pos, neg


def relabel_taskset(taskset: TaskSet, pos_pct: float, neg_pct: float, seed: int) -> TaskSet:
    rng = np.random.default_rng(seed)

    def relabel(tasks):
        return [relabel_support(t, *ratio_counts(t, pos_pct, neg_pct), rng) for t in tasks]

    return TaskSet(relabel(taskset.train), relabel(taskset.valid), relabel(taskset.test))


def _cell(cfg: ExperimentConfig, out_dir: Path, **updates) -> ExperimentConfig:
    return cfg.model_copy(update={"output_dir": out_dir, **updates})


def _row(table) -> dict:
    return {**table.means, "train_seconds": table.train_seconds, "test_seconds": table.test_seconds}


def ratio_sweep(cfg: ExperimentConfig, points: Sequence[tuple[float, float]] = DEFAULT_RATIO_POINTS,
                models: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mean F1 per (model, ratio point); support labels redrawn at every point, models retrained."""
    points = [tuple(p) for p in points]
    if points != sorted(points):
        raise InputError(f"Ratio points must be ordered, got {points}")
    models = list(models or [cfg.model])
    out_dir = Path(cfg.output_dir)
    taskset = ExperimentRunner(cfg).build_tasks()

    rows = []
    for i, (pos_pct, neg_pct) in enumerate(points):
        if pos_pct <= 0:
            logger.warning(f"Skipping ratio point {pos_pct}%/{neg_pct}%: it yields no positive samples")
            continue
        relabelled = relabel_taskset(taskset, pos_pct, neg_pct, cfg.scenario.rng_seed + i)
        for model in models:
            cell = _cell(cfg, out_dir / f"ratio_{pos_pct}_{neg_pct}", model=model)
            table = ExperimentRunner(cell).run(taskset=relabelled)
            rows.append({"model": model, "pos_pct": pos_pct, "neg_pct": neg_pct, **_row(table)})
            logger.info(f"Ratio {pos_pct}%/{neg_pct}% {model}: F1={table.means['f1']:.4f}")

    df = pd.DataFrame(rows, columns=["model", "pos_pct", "neg_pct", *METRIC_COLUMNS,
                                     "train_seconds", "test_seconds"])
    write_csv(out_dir / "ratio_sweep.csv", df.drop(columns=["train_seconds", "test_seconds"]))
    return df


def ablation_grid(cfg: ExperimentConfig, encoders: Iterable[LayerKind] = tuple(LayerKind),
                  combines: Iterable[CombineMode] = tuple(CombineMode)) -> pd.DataFrame:
    """
    Two one-dimensional sweeps over the same tasks and seed: encoder layer
    with average pooling, then the commutative operation with a GAT encoder.
    """
    if not cfg.model.startswith("cgnp-"):
        raise ConfigurationError(f"Ablation needs a CGNP model, got '{cfg.model}'")
    out_dir = Path(cfg.output_dir)
    taskset = ExperimentRunner(cfg).build_tasks()

    cells = [("encoder", LayerKind(e), CombineMode.AVERAGE) for e in encoders]
    cells += [("combine", LayerKind.GAT, CombineMode(c)) for c in combines]
    rows = []
    for sweep, kind, combine in cells:
        cgnp = cfg.cgnp.model_copy(update={"gnn_kind": kind, "combine": combine})
        cell = _cell(cfg, out_dir / f"{sweep}_{kind.value}_{combine.value}", cgnp=cgnp)
        table = ExperimentRunner(cell).run(taskset=taskset)
        rows.append({"sweep": sweep, "encoder": kind.value, "combine": combine.value, **_row(table)})
        logger.info(f"Ablation {sweep}: {kind.value}/{combine.value} F1={table.means['f1']:.4f}")

    df = pd.DataFrame(rows, columns=["sweep", "encoder", "combine", *METRIC_COLUMNS,
                                     "train_seconds", "test_seconds"])
    write_csv(out_dir / "ablation.csv", df.drop(columns=["train_seconds", "test_seconds"]))
    return df


def _summaries(paths: Iterable) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(p.rglob("*_summary.json")))
        elif p.exists():
            found.append(p)
        else:
            raise InputError(f"No such results path: {p}")
    return found


def report(paths: Iterable, out: Optional[Path] = None) -> pd.DataFrame:
    """Comparison table (model x scenario x shots) from run summaries."""
    rows = []
    for path in _summaries(paths):
        with open(path, "r", encoding="utf-8") as f:
            s = json.load(f)
        timing = s.get("timing", {})
        rows.append({
            "model": s["model"], "scenario": s["scenario"], "shots": s["shots"],
            **{k: s["means"][k] for k in METRIC_COLUMNS},
            "train_seconds": timing.get("train_seconds", 0.0),
            "test_seconds": timing.get("test_seconds", 0.0),
        })
    df = pd.DataFrame(rows, columns=["model", "scenario", "shots", *METRIC_COLUMNS,
                                     "train_seconds", "test_seconds"])
    df = df.sort_values(["scenario", "shots", "model"], kind="stable").reset_index(drop=True)
    if out is not None:
        write_csv(out, df)
    return df
