"""SGD with momentum and weight decay, and the multi-step learning-rate schedule."""
from dataclasses import dataclass, field, replace
from logging import getLogger
from typing import Dict, List, Sequence, Tuple

import numpy as np

from qdistill.core.nn import Model
from qdistill.exceptions import ConfigurationError

logger = getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimizer, schedule and freezing settings for one training run.

    The defaults keep the shape of a 200-epoch schedule with milestones
    {70, 100, 150} and freezing at 150, scaled down by 0.3.
    """

    epochs: int = 60
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: List[int] = field(default_factory=lambda: [21, 30, 45])
    lr_gamma: float = 0.2
    dropout_p: float = 0.5
    freeze_epoch: int = 45
    seed: int = 0
    batch_size: int = 64
    imbalanced_sampling: bool = True

    def __post_init__(self):
        self.milestones = [int(m) for m in self.milestones]
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigurationError(f"milestones must be strictly increasing, got {self.milestones}")
        if not 0 < self.lr_gamma <= 1:
            raise ConfigurationError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if not 0 <= self.dropout_p < 1:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")

    def scaled(self, epochs: int) -> "TrainConfig":
        """Copy with the schedule (milestones, freeze epoch) stretched to a new epoch count."""
        if self.epochs == 0 or epochs == self.epochs:
            return replace(self, epochs=epochs)
        ratio = epochs / self.epochs
        milestones = sorted({max(1, int(round(m * ratio))) for m in self.milestones})
        return replace(self, epochs=epochs, milestones=milestones,
                       freeze_epoch=int(round(self.freeze_epoch * ratio)))


def multistep_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """base_lr * gamma ** (number of milestones <= epoch)."""
    if any(b < a for a, b in zip(milestones, milestones[1:])):
        raise ConfigurationError(f"milestones must be sorted, got {list(milestones)}")
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * gamma ** passed


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """v <- momentum * v + (grad + weight_decay * param); param <- param - lr * v."""
    param = np.asarray(param)
    dtype = param.dtype
    velocity = momentum * np.asarray(velocity, dtype=np.float64) + (grad + weight_decay * param.astype(np.float64))
    updated = param.astype(np.float64) - lr * velocity
    return updated.astype(dtype), velocity.astype(dtype)


class SGD:
    """Momentum SGD over every parameter of a Model."""

    def __init__(self, model: Model, momentum: float = 0.9, weight_decay: float = 0.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[Tuple[int, str], np.ndarray] = {
            (index, name): np.zeros_like(value) for index, name, value in model.named_parameters()
        }

    def step(self, grads: List[Dict[str, np.ndarray]], lr: float) -> None:
        for index, name, value in list(self.model.named_parameters()):
            grad = grads[index].get(name)
            if grad is None:
                continue
            key = (index, name)
            new_value, self.velocity[key] = sgd_step(
                value, grad, self.velocity[key], lr, self.momentum, self.weight_decay
            )
            self.model.layers[index].params[name] = new_value.astype(value.dtype)
