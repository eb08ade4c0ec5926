from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from src.config import LayerKind
from src.exceptions import InputError, ShapeError
from src.logging_config import setup_logger
from src.modules.graph import Graph

logger = setup_logger(__name__)

@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    dropout_p: float = 0.2
    activation: str = "relu"  # relu | identity

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError(f"Layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InputError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


def stack_specs(kind: LayerKind, in_dim: int, hidden_dim: int, num_layers: int,
                dropout: float = 0.2, out_dim: int | None = None) -> list[LayerSpec]:
    """K layers in_dim -> hidden ... -> out_dim (hidden by default); identity on the last."""
    out_dim = hidden_dim if out_dim is None else out_dim
    dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [out_dim]
    return [
        LayerSpec(LayerKind(kind), dims[i], dims[i + 1], dropout,
                  "identity" if i == num_layers - 1 else "relu")
        for i in range(num_layers)
    ]


def edge_tensor(g: Graph) -> torch.Tensor:
    return torch.from_numpy(g.edge_index)


def _with_self_loops(edge_index: torch.Tensor, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    loops = torch.arange(n, dtype=torch.long)
    return torch.cat([edge_index[0], loops]), torch.cat([edge_index[1], loops])


class GCNLayer(nn.Module):
    """Linear transform then D^-1/2 (A + I) D^-1/2 propagation."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        n = x.size(0)
        src, dst = _with_self_loops(edge_index, n)
        deg = torch.zeros(n, dtype=x.dtype).index_add(0, dst, torch.ones_like(dst, dtype=x.dtype))
        norm = deg[src].rsqrt() * deg[dst].rsqrt()
        h = x @ self.linear.weight.T
        out = torch.zeros(n, h.size(1), dtype=x.dtype).index_add(0, dst, h[src] * norm.unsqueeze(1))
        return out + self.linear.bias


class GATLayer(nn.Module):
    """Single-head additive attention over N(v) and v itself."""

    def __init__(self, in_dim: int, out_dim: int, negative_slope: float = 0.2):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(1, out_dim))
        self.att_dst = nn.Parameter(torch.empty(1, out_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.negative_slope = negative_slope

    def attention(self, x: torch.Tensor, edge_index: torch.Tensor):
        """(src, dst, alpha, h): per-edge coefficients, normalised over each dst."""
        n = x.size(0)
        src, dst = _with_self_loops(edge_index, n)
        h = self.linear(x)
        scores = F.leaky_relu(
            (h * self.att_src).sum(-1)[src] + (h * self.att_dst).sum(-1)[dst], self.negative_slope
        )
        peak = torch.full((n,), float("-inf"), dtype=x.dtype).scatter_reduce(
            0, dst, scores.detach(), reduce="amax", include_self=True
        )
        w = torch.exp(scores - peak[dst])
        denom = torch.zeros(n, dtype=x.dtype).index_add(0, dst, w)
        return src, dst, w / denom[dst], h

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        src, dst, alpha, h = self.attention(x, edge_index)
        out = torch.zeros_like(h).index_add(0, dst, h[src] * alpha.unsqueeze(1))
        return out + self.bias


class SAGELayer(nn.Module):
    """Mean aggregator with separate self and neighbour weights."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.self_linear = nn.Linear(in_dim, out_dim)
        self.neigh_linear = nn.Linear(in_dim, out_dim, bias=False)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        n = x.size(0)
        src, dst = edge_index[0], edge_index[1]
        agg = torch.zeros_like(x).index_add(0, dst, x[src])
        deg = torch.zeros(n, dtype=x.dtype).index_add(0, dst, torch.ones_like(dst, dtype=x.dtype))
        agg = agg / deg.clamp(min=1).unsqueeze(1)
        return self.self_linear(x) + self.neigh_linear(agg)


LAYERS = {LayerKind.GCN: GCNLayer, LayerKind.GAT: GATLayer, LayerKind.SAGE: SAGELayer}


def glorot_(module: nn.Module, seed: int | None = None) -> nn.Module:
    """Glorot-uniform weights, zero biases; seeded without touching the global RNG."""
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                nn.init.xavier_uniform_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:
                nn.init.xavier_uniform_(p.view(1, -1))
    return module


class GNN(nn.Module):
    def __init__(self, specs: Sequence[LayerSpec]):
        super().__init__()
        if not specs:
            raise ShapeError("A GNN needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"Layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.specs = list(specs)
        self.layers = nn.ModuleList(LAYERS[LayerKind(s.kind)](s.in_dim, s.out_dim) for s in specs)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        for spec, layer in zip(self.specs, self.layers):
            x = F.dropout(x, spec.dropout_p, self.training)
            x = layer(x, edge_index)
            if spec.activation == "relu":
                x = F.relu(x)
        return x


class MLP(nn.Module):
    """Affine layers with ReLU between them."""

    def __init__(self, dims: Sequence[int], bias: bool = True):
        super().__init__()
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ShapeError(f"Invalid MLP dims {list(dims)}")
        self.dims = list(dims)
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=bias) for a, b in zip(dims, dims[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def gnn_forward(model: GNN, g: Graph, h0: torch.Tensor, training: bool = False) -> torch.Tensor:
    if h0.dim() != 2 or h0.size(0) != g.n:
        raise ShapeError(f"Expected a {g.n} x {model.in_dim} feature matrix, got {tuple(h0.shape)}")
    if h0.size(1) != model.in_dim:
        raise ShapeError(f"Feature width {h0.size(1)} does not match first layer in_dim {model.in_dim}")
    model.train(training)
    return model(h0, edge_tensor(g))


def mlp_forward(model: MLP, x: torch.Tensor) -> torch.Tensor:
    if x.size(-1) != model.dims[0]:
        raise ShapeError(f"MLP expects width {model.dims[0]}, got {x.size(-1)}")
    return model(x)


def bce_query_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """-sum log sigmoid(s(v+)) - sum log sigmoid(-s(v-)), evaluated in log space from raw logits."""
    pos = torch.as_tensor(labels.positives, dtype=torch.long)
    neg = torch.as_tensor(labels.negatives, dtype=torch.long)
    if pos.numel() == 0 and neg.numel() == 0:
        raise InputError(f"Query {labels.query} has neither positive nor negative labels")
    return -F.logsigmoid(logits[pos]).sum() - F.logsigmoid(-logits[neg]).sum()


def make_optimizer(params: Iterable[torch.Tensor], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              optimizer: torch.optim.Optimizer) -> None:
    """Apply externally computed gradients through an Adam optimizer."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, grad in zip(params, grads):
        if grad is not None and grad.shape != p.shape:
            raise ShapeError(f"Gradient shape {tuple(grad.shape)} does not match parameter {tuple(p.shape)}")
        p.grad = None if grad is None else grad.detach().clone()
    optimizer.step()


def gradient_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                   n_coords: int = 20, h: float = 1e-5, seed: int = 0) -> float:
    """
    Max relative error between autograd and central differences on randomly
    chosen coordinates. `fn` must be deterministic (dropout off); use float64.
    """
    params = list(params)
    analytic = torch.autograd.grad(fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    worst = 0.0
    with torch.no_grad():
        for _ in range(n_coords):
            which = int(rng.choice(len(params), p=sizes / sizes.sum()))
            idx = int(rng.integers(sizes[which]))
            flat = params[which].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            f_plus = fn().item()
            flat[idx] = orig - h
            f_minus = fn().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[which].reshape(-1)[idx].item()
            worst = max(worst, abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6))
    return worst
