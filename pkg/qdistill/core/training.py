"""Epoch loop shared by plain, distilled and quantization-aware training."""
from dataclasses import asdict, dataclass
from logging import getLogger
from typing import List, Optional

import numpy as np

from qdistill.core.data import DatasetSplit, augment_batch, imbalanced_sampler, sequential_batches
from qdistill.core.distill import KDConfig, kd_loss, kd_loss_grad
from qdistill.core.metrics import mean_per_class_accuracy
from qdistill.core.nn import Model, backward, forward, predict_logits
from qdistill.core.optim import SGD, TrainConfig, multistep_lr
from qdistill.exceptions import ConfigurationError, NumericError

logger = getLogger(__name__)

PLAIN = KDConfig(beta=0.0, temperature=1.0)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    lr: float
    loss: float
    val_mpca: Optional[float]

    def to_dict(self):
        return asdict(self)


def evaluate_model(model: Model, split: DatasetSplit, batch_size: int = 256) -> float:
    """Mean per-class accuracy of a float model on the center crops of a split."""
    logits = predict_logits(model, augment_batch(split.images, train=False), batch_size)
    return mean_per_class_accuracy(logits.argmax(axis=1), split.labels, split.num_classes)


def train(
    model: Model,
    train_split: DatasetSplit,
    train_cfg: TrainConfig,
    val_split: Optional[DatasetSplit] = None,
    teacher: Optional[Model] = None,
    kd_cfg: Optional[KDConfig] = None,
    phase: str = "train",
) -> List[EpochRecord]:
    """Train model in place with momentum SGD and the multi-step schedule.

    With a teacher and kd_cfg the loss is the distillation loss computed on
    the same augmented crops the student sees; otherwise it is plain cross
    entropy. At train_cfg.freeze_epoch batch-norm statistics and any QAT
    observers stop updating.
    """
    kd_cfg = kd_cfg or PLAIN
    if kd_cfg.beta > 0 and teacher is None:
        raise ConfigurationError("distillation with beta > 0 needs a teacher")
    if teacher is not None and teacher.num_classes != model.num_classes:
        raise ConfigurationError(f"teacher predicts {teacher.num_classes} classes, student {model.num_classes}")
    use_teacher = teacher is not None and kd_cfg.beta > 0

    rng = np.random.default_rng(train_cfg.seed)
    optimizer = SGD(model, momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    records: List[EpochRecord] = []
    for epoch in range(train_cfg.epochs):
        if epoch == train_cfg.freeze_epoch:
            model.freeze_batchnorm()
            if model.qat is not None:
                model.qat.freeze()
            logger.info(f"phase={phase} epoch={epoch} frozen batch-norm statistics and observers")
        lr = multistep_lr(train_cfg.lr, epoch, train_cfg.milestones, train_cfg.lr_gamma)
        if train_cfg.imbalanced_sampling:
            batches = imbalanced_sampler(train_split.class_counts, train_cfg.batch_size, rng,
                                         labels=train_split.labels)
        else:
            batches = sequential_batches(len(train_split), train_cfg.batch_size, rng)

        total_loss, seen = 0.0, 0
        for indices in batches:
            images = augment_batch(train_split.images[indices], rng, train=True)
            labels = train_split.labels[indices]
            teacher_logits = predict_logits(teacher, images) if use_teacher else None
            logits, cache = forward(model, images, "train", rng)
            loss = kd_loss(teacher_logits, logits, labels, kd_cfg)
            if not np.isfinite(loss):
                raise NumericError(f"phase={phase} epoch={epoch}: loss diverged")
            grads = backward(model, cache, kd_loss_grad(teacher_logits, logits, labels, kd_cfg))
            optimizer.step(grads, lr)
            total_loss += loss * len(indices)
            seen += len(indices)

        val_mpca = evaluate_model(model, val_split) if val_split is not None else None
        record = EpochRecord(phase, epoch, lr, total_loss / max(seen, 1), val_mpca)
        records.append(record)
        logger.info(
            f"phase={phase} epoch={epoch} lr={lr:.6g} loss={record.loss:.6f} "
            f"val_mpca={'nan' if val_mpca is None else f'{val_mpca:.4f}'}"
        )
    return records
