import copy
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.func import functional_call
from tqdm import tqdm

from src.config import BaselineConfig, settings
from src.exceptions import UnsupportedQueryError
from src.logging_config import setup_logger
from src.modules.base import BestState, Searcher, features_of
from src.modules.graph import Graph
from src.modules.layers import GNN, adam_step, bce_query_loss, edge_tensor, glorot_, make_optimizer, stack_specs
from src.modules.tasks import QueryLabels, Task, queryset_labels

logger = setup_logger(__name__)

Params = dict[str, torch.Tensor]


class QueryGNN(nn.Module):
    """GNN over [I_q | features] where I_q marks the query node only."""

    def __init__(self, feature_dim: int, cfg: BaselineConfig, out_dim: int = 1, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.gnn = GNN(stack_specs(cfg.gnn_kind, feature_dim + 1, cfg.hidden_dim, cfg.num_layers,
                                   cfg.dropout, out_dim=out_dim))
        glorot_(self, seed)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        return self.gnn(x, edge_index)

    def final_layer(self) -> nn.Module:
        return self.gnn.layers[-1]


def query_input(features: torch.Tensor, q: int) -> torch.Tensor:
    ident = torch.zeros(features.size(0), 1, dtype=features.dtype)
    ident[q, 0] = 1.0
    return torch.cat([ident, features], dim=1)


def query_outputs(model: nn.Module, g: Graph, features: torch.Tensor, q: int,
                  params: Optional[Params] = None) -> torch.Tensor:
    x = query_input(features, q)
    if params is None:
        return model(x, edge_tensor(g))
    return functional_call(model, params, (x, edge_tensor(g)))


def query_logits(model, g, features, q, params=None) -> torch.Tensor:
    return query_outputs(model, g, features, q, params).squeeze(-1)


def query_scores(model, g, features, q, params=None) -> torch.Tensor:
    return torch.sigmoid(query_logits(model, g, features, q, params))


def labels_loss(model: nn.Module, task: Task, labels: Sequence[QueryLabels],
                params: Optional[Params] = None) -> torch.Tensor:
    x = features_of(task, model)
    loss = x.new_zeros(())
    for lab in labels:
        loss = loss + bce_query_loss(query_logits(model, task.graph, x, lab.query, params), lab)
    return loss


def _score_queryset(model, task: Task, params: Optional[Params] = None) -> np.ndarray:
    model.eval()
    x = features_of(task, model)
    with torch.no_grad():
        rows = [query_scores(model, task.graph, x, int(q), params) for q in task.queryset_queries]
    return torch.stack(rows).cpu().numpy()


def _detached(model: nn.Module) -> Params:
    return {k: p.detach().clone().requires_grad_() for k, p in model.named_parameters()}


def inner_adapt(params: Params, loss_fn: Callable[[Params], torch.Tensor], lr: float, steps: int,
                create_graph: bool = False) -> Params:
    """`steps` plain gradient steps; with create_graph the result stays differentiable in `params`."""
    for _ in range(steps):
        grads = torch.autograd.grad(loss_fn(params), list(params.values()),
                                    create_graph=create_graph, allow_unused=True)
        params = {
            k: (p if g is None else p - lr * g)
            for (k, p), g in zip(params.items(), grads)
        }
        if not create_graph:
            params = {k: p.detach().requires_grad_() for k, p in params.items()}
    return params


def maml_meta_gradient(model: nn.Module, support_loss_fn: Callable[[Params], torch.Tensor],
                       query_loss_fn: Callable[[Params], torch.Tensor], inner_lr: float,
                       inner_steps: int, first_order: bool = True) -> list[torch.Tensor]:
    """
    Gradient of the query loss after inner adaptation, aligned with
    model.parameters(). First-order evaluates it at the adapted point and
    ignores the Jacobian of the inner steps.
    """
    names = [k for k, _ in model.named_parameters()]
    if first_order:
        adapted = inner_adapt(_detached(model), support_loss_fn, inner_lr, inner_steps)
        wrt = [adapted[k] for k in names]
        loss = query_loss_fn(adapted)
    else:
        start = dict(model.named_parameters())
        adapted = inner_adapt(start, support_loss_fn, inner_lr, inner_steps, create_graph=True)
        wrt = [start[k] for k in names]
        loss = query_loss_fn(adapted)
    grads = torch.autograd.grad(loss, wrt, allow_unused=True)
    return [torch.zeros_like(w) if g is None else g for w, g in zip(wrt, grads)]


def reptile_update(theta: Params, adapted: Sequence[Params], beta: float) -> Params:
    """theta + beta * mean_i(theta_i - theta)"""
    with torch.no_grad():
        return {
            k: p + beta * torch.stack([a[k] - p for a in adapted]).mean(0)
            for k, p in theta.items()
        }


def prototypes(embeddings: torch.Tensor, positives, negatives) -> tuple[torch.Tensor, torch.Tensor]:
    pos = torch.as_tensor(list(positives), dtype=torch.long)
    neg = torch.as_tensor(list(negatives), dtype=torch.long)
    return embeddings[pos].mean(0), embeddings[neg].mean(0)


def gpn_logits(embeddings: torch.Tensor, c_pos: torch.Tensor, c_neg: torch.Tensor) -> torch.Tensor:
    """d(v, c-) - d(v, c+), the log-odds of the two-way softmax over negated distances."""
    def dist(c):
        return ((embeddings - c) ** 2).sum(-1).clamp(min=1e-12).sqrt()
    return dist(c_neg) - dist(c_pos)


def gpn_probabilities(embeddings: torch.Tensor, c_pos: torch.Tensor, c_neg: torch.Tensor) -> torch.Tensor:
    """Softmax over negated Euclidean distances; positive-class column, shape n."""
    return torch.sigmoid(gpn_logits(embeddings, c_pos, c_neg))


class _LearnedBaseline(Searcher):
    out_dim = 1

    def __init__(self, cfg: BaselineConfig, seed: int = 0):
        super().__init__(cfg.threshold, seed)
        self.cfg = cfg

    def build(self, in_dim: int) -> None:
        self.model = QueryGNN(in_dim, self.cfg, self.out_dim, self.seed)

    def _epochs(self, name: str):
        return tqdm(range(self.cfg.epochs), desc=name, disable=not settings.SHOW_PROGRESS)

    def _start(self, train: Sequence[Task]) -> np.random.Generator:
        torch.manual_seed(self.seed)
        self.build(train[0].feature_dim)
        self.history = []
        return np.random.default_rng(self.seed)


class SupervisedSearcher(_LearnedBaseline):
    """A fresh GNN per test task, trained from scratch on that task's support labels."""
    name = "supervised"

    def predict(self, task: Task) -> np.ndarray:
        torch.manual_seed(self.seed)
        self.build(task.feature_dim)
        model = self.model
        optimizer = make_optimizer(model.parameters(), self.cfg.lr)
        model.train()
        for _ in range(self.cfg.epochs):
            optimizer.zero_grad()
            loss = labels_loss(model, task, task.support)
            loss.backward()
            optimizer.step()
        return _score_queryset(model, task)


class FeatTransSearcher(_LearnedBaseline):
    """Pretrain on all training labels; adapt only the final layer by one gradient step."""
    name = "feattrans"

    def fit(self, train, valid=(), validate=None):
        rng = self._start(train)
        model = self.model
        optimizer = make_optimizer(model.parameters(), self.cfg.lr)
        best = BestState(validate if valid else None, self.cfg.valid_every, self.cfg.epochs)
        for epoch in self._epochs(self.name):
            model.train()
            losses = []
            for i in rng.permutation(len(train)):
                task = train[i]
                optimizer.zero_grad()
                loss = labels_loss(model, task, list(task.support) + queryset_labels(task, rng))
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
            self.history.append(float(np.mean(losses)))
            best.step(epoch, model, self.predict)
        best.restore(model)
        return self

    def adapt(self, task: Task) -> QueryGNN:
        adapted = copy.deepcopy(self.model)
        adapted.eval()
        final = list(adapted.final_layer().parameters())
        grads = torch.autograd.grad(labels_loss(adapted, task, task.support), final, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(final, grads):
                if g is not None:
                    p -= self.cfg.finetune_lr * g
        return adapted

    def predict(self, task: Task) -> np.ndarray:
        return _score_queryset(self.adapt(task), task)


class MamlSearcher(_LearnedBaseline):
    name = "maml"

    def _meta_step(self, task: Task, rng: np.random.Generator, optimizer) -> float:
        query_labels = queryset_labels(task, rng)
        grads = maml_meta_gradient(
            self.model,
            lambda p: labels_loss(self.model, task, task.support, p),
            lambda p: labels_loss(self.model, task, query_labels, p),
            self.cfg.inner_lr, self.cfg.inner_steps_train, self.cfg.first_order,
        )
        adam_step(list(self.model.parameters()), grads, optimizer)
        with torch.no_grad():
            return labels_loss(self.model, task, query_labels).item()

    def fit(self, train, valid=(), validate=None):
        rng = self._start(train)
        optimizer = make_optimizer(self.model.parameters(), self.cfg.outer_lr)
        best = BestState(validate if valid else None, self.cfg.valid_every, self.cfg.epochs)
        for epoch in self._epochs(self.name):
            self.model.train()
            losses = [self._meta_step(train[i], rng, optimizer) for i in rng.permutation(len(train))]
            self.history.append(float(np.mean(losses)))
            best.step(epoch, self.model, self.predict)
        best.restore(self.model)
        return self

    def adapt(self, task: Task) -> Params:
        self.model.eval()
        return inner_adapt(
            _detached(self.model),
            lambda p: labels_loss(self.model, task, task.support, p),
            self.cfg.inner_lr, self.cfg.inner_steps_test,
        )

    def predict(self, task: Task) -> np.ndarray:
        return _score_queryset(self.model, task, self.adapt(task))


class ReptileSearcher(MamlSearcher):
    """Inner loop on all task labels, outer step along the mean parameter difference."""
    name = "reptile"

    def fit(self, train, valid=(), validate=None):
        rng = self._start(train)
        best = BestState(validate if valid else None, self.cfg.valid_every, self.cfg.epochs)
        for epoch in self._epochs(self.name):
            self.model.train()
            losses = []
            for i in rng.permutation(len(train)):
                task = train[i]
                labels = list(task.support) + queryset_labels(task, rng)
                theta = {k: p.detach() for k, p in self.model.named_parameters()}
                adapted = inner_adapt(_detached(self.model), lambda p: labels_loss(self.model, task, labels, p),
                                      self.cfg.inner_lr, self.cfg.inner_steps_train)
                self.model.load_state_dict(reptile_update(theta, [adapted], self.cfg.outer_lr), strict=False)
                with torch.no_grad():
                    losses.append(labels_loss(self.model, task, labels).item())
            self.history.append(float(np.mean(losses)))
            best.step(epoch, self.model, self.predict)
        best.restore(self.model)
        return self


class GpnSearcher(_LearnedBaseline):
    """
    Prototype classifier per query: mean embeddings of its positive and
    negative labels, softmax over negated distances. Test queries get
    sampled queryset labels to form prototypes.
    """
    name = "gpn"
    uses_queryset_labels = True

    @property
    def out_dim(self) -> int:
        return self.cfg.hidden_dim

    def query_logits(self, task: Task, x: torch.Tensor, labels: QueryLabels,
                     proto_pos: Sequence[int], proto_neg: Sequence[int]) -> torch.Tensor:
        if not proto_pos or not proto_neg:
            raise UnsupportedQueryError(
                f"GPN needs positive and negative labels for query {labels.query} of task {task.task_id}"
            )
        emb = query_outputs(self.model, task.graph, x, labels.query)
        return gpn_logits(emb, *prototypes(emb, proto_pos, proto_neg))

    def query_probabilities(self, task, x, labels, proto_pos, proto_neg) -> torch.Tensor:
        return torch.sigmoid(self.query_logits(task, x, labels, proto_pos, proto_neg))

    def _split(self, labels: QueryLabels, rng: np.random.Generator):
        pos = list(rng.permutation(labels.positives)) if labels.positives else []
        neg = list(rng.permutation(labels.negatives)) if labels.negatives else []
        kp, kn = self.cfg.gpn_proto_pos, self.cfg.gpn_proto_neg
        rest = QueryLabels(labels.query, tuple(int(v) for v in pos[kp:]), tuple(int(v) for v in neg[kn:]))
        return [int(v) for v in pos[:kp]], [int(v) for v in neg[:kn]], rest

    def fit(self, train, valid=(), validate=None):
        rng = self._start(train)
        model = self.model
        optimizer = make_optimizer(model.parameters(), self.cfg.lr)
        best = BestState(validate if valid else None, self.cfg.valid_every, self.cfg.epochs)
        for epoch in self._epochs(self.name):
            model.train()
            losses = []
            for i in rng.permutation(len(train)):
                task = train[i]
                x = features_of(task, model)
                optimizer.zero_grad()
                loss = x.new_zeros(())
                for labels in list(task.support) + queryset_labels(task, rng):
                    proto_pos, proto_neg, rest = self._split(labels, rng)
                    if not rest.size or not proto_pos or not proto_neg:
                        continue
                    loss = loss + bce_query_loss(self.query_logits(task, x, labels, proto_pos, proto_neg), rest)
                if loss.requires_grad:
                    loss.backward()
                    optimizer.step()
                losses.append(loss.item())
            self.history.append(float(np.mean(losses)))
            best.step(epoch, model, self.predict)
        best.restore(model)
        return self

    def predict(self, task: Task) -> np.ndarray:
        logger.debug(f"GPN reads sampled queryset labels of {task.task_id} to build prototypes")
        rng = np.random.default_rng(self.seed)
        granted = queryset_labels(task, rng, self.cfg.gpn_proto_pos, self.cfg.gpn_proto_neg)
        self.model.eval()
        x = features_of(task, self.model)
        with torch.no_grad():
            rows = [self.query_probabilities(task, x, lab, lab.positives, lab.negatives) for lab in granted]
        return torch.stack(rows).cpu().numpy()


def supervised_gnn(task: Task, cfg: BaselineConfig, seed: int = 0) -> np.ndarray:
    return SupervisedSearcher(cfg, seed).predict(task)


def feattrans(train_tasks: Sequence[Task], task: Task, cfg: BaselineConfig, seed: int = 0) -> np.ndarray:
    return FeatTransSearcher(cfg, seed).fit(train_tasks).predict(task)


def maml(train_tasks: Sequence[Task], task: Task, cfg: BaselineConfig, seed: int = 0) -> np.ndarray:
    return MamlSearcher(cfg, seed).fit(train_tasks).predict(task)


def reptile(train_tasks: Sequence[Task], task: Task, cfg: BaselineConfig, seed: int = 0) -> np.ndarray:
    return ReptileSearcher(cfg, seed).fit(train_tasks).predict(task)


def gpn(train_tasks: Sequence[Task], task: Task, cfg: BaselineConfig, seed: int = 0) -> np.ndarray:
    return GpnSearcher(cfg, seed).fit(train_tasks).predict(task)
