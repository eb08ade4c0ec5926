import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from src.config import CgnpConfig, CombineMode, DecoderKind, settings
from src.exceptions import InputError, ShapeError
from src.logging_config import setup_logger
from src.modules.base import BestState, Searcher, Validator, features_of
from src.modules.graph import Graph
from src.modules.layers import GNN, MLP, bce_query_loss, edge_tensor, glorot_, make_optimizer, stack_specs
from src.modules.tasks import QueryLabels, Task, queryset_labels

logger = setup_logger(__name__)


class CGNP(nn.Module):
    """
    Conditional graph neural process: a shared GNN encoder turns every
    support pair into a view, a commutative operation folds the views into
    one context matrix, and a decoder scores each node against the query row.
    """

    def __init__(self, feature_dim: int, cfg: CgnpConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.feature_dim = feature_dim
        h = cfg.hidden_dim
        self.encoder = GNN(stack_specs(cfg.gnn_kind, feature_dim + 1, h, cfg.num_layers, cfg.dropout))

        self.w1 = self.w2 = None
        if cfg.combine is CombineMode.ATTENTION:
            self.w1 = nn.Linear(h, cfg.attention_dim, bias=False)
            self.w2 = nn.Linear(h, cfg.attention_dim, bias=False)

        self.decoder = None
        if cfg.decoder is DecoderKind.MLP:
            self.decoder = MLP([h, cfg.mlp_hidden, h])
        elif cfg.decoder is DecoderKind.GNN:
            self.decoder = GNN(stack_specs(cfg.gnn_kind, h, h, cfg.decoder_layers, cfg.dropout))
        glorot_(self, seed)
        self.history: list[float] = []

    @property
    def combine_mode(self) -> CombineMode:
        return self.cfg.combine


def view_input(base_features: torch.Tensor, q: int, labels: QueryLabels) -> torch.Tensor:
    """h0(v) = [1 if v in l_q+ or v == q else 0 | features(v)]; negatives stay 0."""
    ident = torch.zeros(base_features.size(0), 1, dtype=base_features.dtype)
    if labels.positives:
        ident[list(labels.positives), 0] = 1.0
    ident[q, 0] = 1.0
    return torch.cat([ident, base_features], dim=1)


def encode_view(model: CGNP, g: Graph, base_features: torch.Tensor, q: int,
                labels: QueryLabels) -> torch.Tensor:
    if not 0 <= q < g.n:
        raise InputError(f"Query node {q} is not in the task graph (n={g.n})")
    return model.encoder(view_input(base_features, q, labels), edge_tensor(g))


def combine_views(views: Sequence[torch.Tensor], mode: CombineMode, model: Optional[CGNP] = None) -> torch.Tensor:
    if not views:
        raise InputError("Cannot combine an empty list of views")
    shape = views[0].shape
    if any(v.shape != shape for v in views):
        raise ShapeError("All views must share one shape")
    stacked = torch.stack(list(views))  # |S| x n x d
    mode = CombineMode(mode)
    if mode is CombineMode.SUM:
        return stacked.sum(0)
    if mode is CombineMode.AVERAGE:
        return stacked.mean(0)

    if model is None or model.w1 is None:
        raise InputError("Attention combine needs a model with attention projections")
    per_node = stacked.transpose(0, 1)  # n x |S| x d
    return (attention_weights(model, views) @ per_node).mean(1)


def attention_weights(model: CGNP, views: Sequence[torch.Tensor]) -> torch.Tensor:
    """Per-node |S| x |S| attention matrices, n x |S| x |S|."""
    per_node = torch.stack(list(views)).transpose(0, 1)
    h1, h2 = model.w1(per_node), model.w2(per_node)
    return torch.softmax(h1 @ h2.transpose(1, 2) / math.sqrt(h1.size(-1)), dim=-1)


def context(model: CGNP, task: Task) -> torch.Tensor:
    x = features_of(task, model)
    views = [encode_view(model, task.graph, x, s.query, s) for s in task.support]
    return combine_views(views, model.combine_mode, model)


def transform(model: CGNP, g: Graph, h: torch.Tensor) -> torch.Tensor:
    if model.decoder is None:
        return h
    if isinstance(model.decoder, GNN):
        return model.decoder(h, edge_tensor(g))
    return model.decoder(h)


def decode_logits(model: CGNP, g: Graph, h: torch.Tensor, q: int) -> torch.Tensor:
    """s(v) = <Z[q], Z[v]> for every v, Z the decoder transform of H."""
    if not 0 <= q < g.n:
        raise InputError(f"Query node {q} is not in the task graph (n={g.n})")
    z = transform(model, g, h)
    return z @ z[q]


def decode(model: CGNP, g: Graph, h: torch.Tensor, q: int) -> torch.Tensor:
    """p(v) = sigmoid(s(v))."""
    return torch.sigmoid(decode_logits(model, g, h, q))


def episode_loss(model: CGNP, task: Task, query_labels: Optional[Sequence[QueryLabels]] = None,
                 rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """BCE of the sampled queryset labels conditioned on the support set."""
    if not task.support or not len(task.queryset_queries):
        raise InputError(f"Task {task.task_id} needs a support set and a queryset")
    if query_labels is None:
        query_labels = queryset_labels(task, rng or np.random.default_rng(0))
    z = transform(model, task.graph, context(model, task))
    loss = z.new_zeros(())
    for labels in query_labels:
        loss = loss + bce_query_loss(z @ z[labels.query], labels)
    return loss


def predict_task(model: CGNP, task: Task, queries: Optional[Sequence[int]] = None) -> np.ndarray:
    """Probabilities for every queryset query in one pass, |Q| x n."""
    queries = task.queryset_queries if queries is None else queries
    idx = torch.as_tensor(np.asarray(queries, dtype=np.int64))
    model.eval()
    with torch.no_grad():
        z = transform(model, task.graph, context(model, task))
        return torch.sigmoid(z[idx] @ z.T).cpu().numpy()


def meta_train(train_tasks: Sequence[Task], cfg: CgnpConfig, seed: int = 0,
               validate: Optional[Validator] = None, feature_dim: Optional[int] = None) -> CGNP:
    """
    Episodic training: every epoch shuffles the tasks and takes one Adam
    step per task on its episode loss. With a validator, the parameters
    with the best validation F1 are returned.
    """
    if not train_tasks and feature_dim is None:
        raise InputError("meta_train needs training tasks (or an explicit feature_dim)")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = CGNP(feature_dim or train_tasks[0].feature_dim, cfg, seed)
    optimizer = make_optimizer(model.parameters(), cfg.lr)
    best = BestState(validate, cfg.valid_every, cfg.epochs)

    for epoch in tqdm(range(cfg.epochs), desc="cgnp", disable=not settings.SHOW_PROGRESS):
        model.train()
        losses = []
        for i in rng.permutation(len(train_tasks)):
            task = train_tasks[i]
            labels = queryset_labels(task, rng)
            optimizer.zero_grad()
            loss = episode_loss(model, task, labels)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        model.history.append(float(np.mean(losses)) if losses else 0.0)
        logger.debug(f"Epoch {epoch + 1}: mean episode loss {model.history[-1]:.4f}")
        best.step(epoch, model, lambda t: predict_task(model, t))

    best.restore(model)
    model.eval()
    return model


def meta_test(model: CGNP, task: Task, q: int) -> np.ndarray:
    """Adaptation-free prediction for one query: the whole support set conditions the context."""
    if q in task.support_queries:
        raise InputError(f"Query {q} is a support query of task {task.task_id}")
    if not 0 <= q < task.graph.n:
        raise InputError(f"Query node {q} is not in the task graph (n={task.graph.n})")
    model.eval()
    with torch.no_grad():
        return decode(model, task.graph, context(model, task), q).cpu().numpy()


def predict_community(p: np.ndarray, q: int, threshold: float = 0.5) -> set:
    if not 0.0 < threshold < 1.0:
        raise InputError(f"threshold must lie in (0, 1), got {threshold}")
    return set(np.flatnonzero(np.asarray(p) >= threshold).tolist()) | {int(q)}


class CgnpSearcher(Searcher):
    def __init__(self, cfg: CgnpConfig, seed: int = 0):
        super().__init__(cfg.threshold, seed)
        self.cfg = cfg
        self.name = f"cgnp-{cfg.decoder.value}"

    def build(self, in_dim: int) -> None:
        self.model = CGNP(in_dim, self.cfg, self.seed)

    def fit(self, train, valid=(), validate=None):
        self.model = meta_train(train, self.cfg, self.seed, validate if valid else None)
        self.history = self.model.history
        return self

    def predict(self, task: Task) -> np.ndarray:
        return predict_task(self.model, task)
