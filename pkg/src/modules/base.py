import copy
from abc import ABC, abstractmethod
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from src.logging_config import setup_logger

logger = setup_logger(__name__)

# validate(predict) -> mean F1 of `predict` over the validation tasks
Validator = Callable[[Callable], float]


def features_of(task, model: Optional[nn.Module] = None) -> torch.Tensor:
    """Task features as model input: columns with magnitudes above 1 (core numbers) are scaled into [-1, 1]."""
    dtype = next(model.parameters()).dtype if model is not None else torch.get_default_dtype()
    x = np.asarray(task.base_features, dtype=np.float64)
    scale = np.maximum(np.abs(x).max(axis=0, initial=0.0), 1.0)
    return torch.as_tensor(x / scale, dtype=dtype)


class Searcher(ABC):
    """
    Common surface of every community-search model: `fit` on training tasks
    (no-op for algorithmic methods) and `predict` membership probabilities
    for every queryset query of a test task, shape |Q| x n.
    """
    name: str = "searcher"
    learned: bool = True
    # set when predict reads queryset ground truth (prototype methods)
    uses_queryset_labels: bool = False

    def __init__(self, threshold: float = 0.5, seed: int = 0):
        self.threshold = threshold
        self.seed = seed
        self.model: Optional[nn.Module] = None
        self.history: list[float] = []

    def build(self, in_dim: int) -> None:
        """Create the (untrained) model for a feature width."""

    def fit(self, train: Sequence, valid: Sequence = (), validate: Optional[Validator] = None) -> "Searcher":
        return self

    @abstractmethod
    def predict(self, task) -> np.ndarray:
        ...


class BestState:
    """Keeps the parameters with the best validation score seen so far."""

    def __init__(self, validate: Optional[Validator], every: int, epochs: int):
        self.validate = validate
        self.every = max(1, every)
        self.epochs = epochs
        self.best_score = float("-inf")
        self.best_epoch = -1
        self._state = None

    def step(self, epoch: int, model: nn.Module, predict: Callable) -> Optional[float]:
        if self.validate is None:
            return None
        if (epoch + 1) % self.every and epoch != self.epochs - 1:
            return None
        score = self.validate(predict)
        model.train()
        if score > self.best_score:
            self.best_score, self.best_epoch = score, epoch
            self._state = copy.deepcopy(model.state_dict())
        logger.info(f"Epoch {epoch + 1}: validation F1 {score:.4f} (best {self.best_score:.4f})")
        return score

    def restore(self, model: nn.Module) -> None:
        if self._state is not None:
            model.load_state_dict(self._state)
            logger.info(f"Restored parameters from epoch {self.best_epoch + 1}")
