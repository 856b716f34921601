"""Knowledge-distillation loss and quantized knowledge distillation.

The loss mixes a hard-label term and a temperature-softened teacher term:

    L = alpha * CE(one_hot(y), softmax(z_s)) + beta * T^2 * CE(softmax(z_t / T), softmax(z_s / T))

with alpha = 1 - beta. With literal_eq1 the hard term also uses the
softened student distribution.
"""
from dataclasses import dataclass, field
from logging import getLogger
from typing import Optional

import numpy as np

from qdistill.core import tensor as T
from qdistill.core.data import DatasetSplit
from qdistill.core.int8_infer import QuantizedModel
from qdistill.core.nn import Model, cross_entropy, one_hot
from qdistill.core.optim import TrainConfig
from qdistill.core.qat import convert_to_int8, prepare_qat
from qdistill.exceptions import ConfigurationError, NumericError, ShapeError

logger = getLogger(__name__)


@dataclass
class KDConfig:
    beta: float = 0.9
    temperature: float = 3.0
    literal_eq1: bool = False
    alpha: float = field(init=False)

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ConfigurationError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        self.alpha = 1.0 - self.beta


def soft_labels(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise softmax of logits / T in float64."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("soft labels received non-finite logits")
    return T.softmax(logits / temperature)


def _check_shapes(teacher_logits, student_logits, labels, cfg: KDConfig) -> None:
    if student_logits.ndim != 2:
        raise ShapeError(f"student logits must be (N, C), got {student_logits.shape}")
    if cfg.beta > 0:
        if teacher_logits is None:
            raise ConfigurationError("teacher logits are required when beta > 0")
        if teacher_logits.shape != student_logits.shape:
            raise ShapeError(
                f"teacher logits {teacher_logits.shape} do not match student logits {student_logits.shape}"
            )
    if len(labels) != student_logits.shape[0]:
        raise ShapeError(f"{len(labels)} labels for {student_logits.shape[0]} logit rows")


def kd_loss(teacher_logits: Optional[np.ndarray], student_logits: np.ndarray, labels: np.ndarray, cfg: KDConfig) -> float:
    """Batch-mean distillation loss; teacher logits are constants."""
    _check_shapes(teacher_logits, student_logits, labels, cfg)
    num_classes = student_logits.shape[1]
    hard_temperature = cfg.temperature if cfg.literal_eq1 else 1.0
    loss = cfg.alpha * cross_entropy(one_hot(labels, num_classes), soft_labels(student_logits, hard_temperature))
    if cfg.beta > 0:
        t2 = cfg.temperature ** 2
        soft = cross_entropy(soft_labels(teacher_logits, cfg.temperature), soft_labels(student_logits, cfg.temperature))
        loss = loss + cfg.beta * t2 * soft
    return float(loss)


def kd_loss_grad(teacher_logits: Optional[np.ndarray], student_logits: np.ndarray, labels: np.ndarray, cfg: KDConfig) -> np.ndarray:
    """dL/dz_s for kd_loss, already divided by the batch size."""
    _check_shapes(teacher_logits, student_logits, labels, cfg)
    n, num_classes = student_logits.shape
    target = one_hot(labels, num_classes)
    if cfg.literal_eq1:
        grad = cfg.alpha / cfg.temperature * (soft_labels(student_logits, cfg.temperature) - target)
    else:
        grad = cfg.alpha * (soft_labels(student_logits, 1.0) - target)
    if cfg.beta > 0:
        grad = grad + cfg.beta * cfg.temperature * (
            soft_labels(student_logits, cfg.temperature) - soft_labels(teacher_logits, cfg.temperature)
        )
    return grad / n


def quantized_distillation_train(
    teacher: Optional[Model],
    student: Model,
    train_split: DatasetSplit,
    kd_cfg: KDConfig,
    train_cfg: TrainConfig,
    val_split: Optional[DatasetSplit] = None,
    history=None,
) -> QuantizedModel:
    """Distill a float teacher into an 8-bit student.

    The student gets observers and fake quantization and trains on the
    distillation loss with straight-through gradients. Its batch norm stays
    live, folded into the fake-quantized weights, until train_cfg.freeze_epoch
    freezes the statistics and the observers. Only then is batch norm folded
    into constants and the student converted to integers.
    """
    # imported here: training imports this module for the loss
    from qdistill.core.training import train

    if teacher is not None and teacher.num_classes != student.num_classes:
        raise ConfigurationError(
            f"teacher predicts {teacher.num_classes} classes, student {student.num_classes}"
        )
    if teacher is None and kd_cfg.beta > 0:
        raise ConfigurationError("a teacher is required when beta > 0")
    qat_student = prepare_qat(student)
    logger.info(
        f"quantized distillation: alpha={kd_cfg.alpha:g} beta={kd_cfg.beta:g} T={kd_cfg.temperature:g} "
        f"epochs={train_cfg.epochs}"
    )
    records = train(qat_student, train_split, train_cfg, val_split=val_split, teacher=teacher, kd_cfg=kd_cfg,
                    phase="qat-distill")
    if history is not None:
        history.extend(records)
    return convert_to_int8(qat_student)
