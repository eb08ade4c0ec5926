import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch

from src.exceptions import InputError
from src.logging_config import setup_logger
from src.modules.graph import build_graph
from src.modules.tasks import QueryLabels, Task, TaskSet

logger = setup_logger(__name__)

MANIFEST = "manifest.json"
FLOAT_FORMAT = "%.6f"


def _ragged(rows) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    flat = np.array([v for r in rows for v in r], dtype=np.int64)
    return flat, lengths


def _unragged(flat: np.ndarray, lengths: np.ndarray) -> list[tuple[int, ...]]:
    out, start = [], 0
    for n in lengths.tolist():
        out.append(tuple(int(v) for v in flat[start:start + n]))
        start += n
    return out


def task_arrays(task: Task) -> dict[str, np.ndarray]:
    """Canonical array form of a task (what gets written and hashed)."""
    g = task.graph
    pos, pos_len = _ragged([s.positives for s in task.support])
    neg, neg_len = _ragged([s.negatives for s in task.support])
    arrays = {
        "node_count": np.array([g.n], dtype=np.int64),
        "edges": np.asarray(g.edges, dtype=np.int64).reshape(-1, 2),
        "node_labels": np.array([str(x) for x in (g.node_labels or range(g.n))]),
        "features": np.ascontiguousarray(task.base_features, dtype="<f8"),
        "support_queries": np.array(task.support_queries, dtype=np.int64),
        "support_pos": pos, "support_pos_len": pos_len,
        "support_neg": neg, "support_neg_len": neg_len,
        "support_membership": task.support_membership.astype(bool),
        "queryset_queries": np.asarray(task.queryset_queries, dtype=np.int64),
        "queryset_membership": task.queryset_membership.astype(bool),
        "label_counts": np.array([task.pos_per_query, task.neg_per_query], dtype=np.int64),
    }
    if g.attributes is not None:
        arrays["attributes"] = np.asarray(g.attributes, dtype=np.uint8)
    return arrays


def task_digest(task: Task) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(task_arrays(task).items()):
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def task_from_arrays(arrays, task_id: str, source: str) -> Task:
    n = int(arrays["node_count"][0])
    labels = [str(x) for x in arrays["node_labels"].tolist()]
    if all(x.lstrip("-").isdigit() for x in labels):
        labels = [int(x) for x in labels]
    graph = build_graph(arrays["edges"].tolist(), n, arrays["attributes"] if "attributes" in arrays else None,
                        node_labels=labels)
    pos = _unragged(arrays["support_pos"], arrays["support_pos_len"])
    neg = _unragged(arrays["support_neg"], arrays["support_neg_len"])
    support = tuple(
        QueryLabels(int(q), p, ng) for q, p, ng in zip(arrays["support_queries"].tolist(), pos, neg)
    )
    counts = arrays["label_counts"].tolist()
    return Task(
        graph=graph,
        support=support,
        support_membership=np.asarray(arrays["support_membership"], dtype=bool),
        queryset_queries=np.asarray(arrays["queryset_queries"], dtype=np.int64),
        queryset_membership=np.asarray(arrays["queryset_membership"], dtype=bool),
        base_features=np.asarray(arrays["features"], dtype=np.float64),
        pos_per_query=int(counts[0]),
        neg_per_query=int(counts[1]),
        task_id=task_id,
        source=source,
    )


def save_taskset(taskset: TaskSet, directory, scenario: Optional[dict] = None, seed: Optional[int] = None) -> dict:
    """One .npz per task under <dir>/<split>/ plus a manifest with per-task digests."""
    directory = Path(directory)
    manifest = {"scenario": scenario or {}, "seed": seed, "splits": {}}
    for split, tasks in taskset.splits():
        (directory / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for task in tasks:
            rel = f"{split}/{task.task_id}.npz"
            np.savez_compressed(directory / rel, **task_arrays(task))
            entries.append({"file": rel, "task_id": task.task_id, "source": task.source,
                            "digest": task_digest(task)})
        manifest["splits"][split] = entries
    with open(directory / MANIFEST, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"💾 Saved {len(taskset)} tasks to {directory}")
    return manifest


def load_taskset(directory) -> tuple[TaskSet, dict]:
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise InputError(f"No task manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)

    splits = {}
    for split in ("train", "valid", "test"):
        tasks = []
        for entry in manifest["splits"].get(split, []):
            with np.load(directory / entry["file"], allow_pickle=False) as data:
                task = task_from_arrays(dict(data), entry["task_id"], entry.get("source", ""))
            if task_digest(task) != entry["digest"]:
                raise InputError(f"Digest mismatch for {entry['file']}: task file changed since it was written")
            tasks.append(task)
        splits[split] = tasks
    logger.info(f"Loaded task set from {directory}: "
                f"{len(splits['train'])}/{len(splits['valid'])}/{len(splits['test'])}")
    return TaskSet(splits["train"], splits["valid"], splits["test"]), manifest


def save_checkpoint(path, model_name: str, model: torch.nn.Module, config: dict, cfg_hash: str,
                    in_dim: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "model": model_name,
        "state": model.state_dict(),
        "config": config,
        "config_hash": cfg_hash,
        "in_dim": in_dim,
    }, path)
    logger.info(f"💾 Saved {model_name} checkpoint to {path}")


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InputError(f"Checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=True)


def write_csv(path, df: pd.DataFrame, header: Optional[str] = None) -> None:
    """CSV with a fixed float format and an optional leading '# ...' line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if header:
            f.write(f"# {header}\n")
        df.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
