"""
Training loop: label-smoothed cross-entropy, cosine schedule with linear
warmup, AdamW with decoupled weight decay, per-epoch evaluation.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from models.schemas import OptimConfig, ScheduleConfig, TrainConfig, TrainReportRow
from services import checkpoint_service, data_service, export_service
from services.data_service import Dataset
from services.errors import ConfigError, ContractError, DimensionError, TrainingDivergedError
from services.model_service import VisionModel, model_forward
from services.tensor_service import (
    Tape,
    Tensor,
    backward,
    constant,
    log_softmax_rows,
    mul,
    reshape,
    scale,
    sum_all,
)

logger = logging.getLogger(__name__)


# ── Loss ─────────────────────────────────────────────────────────────────────

def smooth_targets(targets: np.ndarray, eps: float) -> np.ndarray:
    """t' = (1−ε)·t + ε/(K−1)·(1−t); rows that summed to 1 still do."""
    k = targets.shape[-1]
    if eps == 0:
        return targets
    if k < 2:
        raise ConfigError(f"label smoothing needs at least 2 classes, got {k}")
    return (1.0 - eps) * targets + eps / (k - 1) * (1.0 - targets)


def label_smoothed_cross_entropy(logits: Tensor, targets: np.ndarray, eps: float) -> Tensor:
    if not 0 <= eps < 1:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {eps}")
    if logits.ndim == 1:
        logits = reshape(logits, (1, logits.shape[0]))
    targets = np.atleast_2d(targets)
    if logits.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    smoothed = constant(smooth_targets(targets, eps))
    return scale(sum_all(mul(smoothed, log_softmax_rows(logits))), -1.0 / logits.shape[0])


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return label_smoothed_cross_entropy(logits, targets, 0.0)


# ── Schedule ─────────────────────────────────────────────────────────────────

def cosine_warmup_lr(step: int, schedule: ScheduleConfig) -> float:
    """Linear warmup from 0, then half-cosine decay to 0; clamped past the end."""
    warmup = schedule.warmup_epochs * schedule.steps_per_epoch
    total = schedule.total_epochs * schedule.steps_per_epoch
    if step < warmup:
        return schedule.base_lr * step / warmup
    progress = min(1.0, max(0.0, (step - warmup) / max(1, total - warmup)))
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class CosineWarmupSchedule:
    config: ScheduleConfig

    def __call__(self, step: int) -> float:
        return cosine_warmup_lr(step, self.config)

    @property
    def total_steps(self) -> int:
        return self.config.total_epochs * self.config.steps_per_epoch


# ── Optimiser ────────────────────────────────────────────────────────────────

@dataclass
class OptimState:
    config: OptimConfig = field(default_factory=OptimConfig)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(model: VisionModel, state: OptimState, lr: float) -> None:
    """One update of every parameter from its accumulated `.grad`."""
    cfg = state.config
    t = state.step + 1
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    for param in model.params:
        grad = param.grad
        if grad is None:
            raise ContractError(f"parameter '{param.name}' has no gradient")
        if grad.shape != param.shape:
            raise ContractError(f"gradient for '{param.name}' is {grad.shape}, parameter is {param.shape}")
        m = state.m.get(param.name, np.zeros(param.shape))
        v = state.v.get(param.name, np.zeros(param.shape))
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        state.m[param.name], state.v[param.name] = m, v
        values = param.tensor.values
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
        model.params.replace(param.name, values - lr * cfg.weight_decay * values - lr * update)
    state.step = t


# ── Loops ────────────────────────────────────────────────────────────────────

def train_epoch(model: VisionModel, dataset: Dataset, cfg: TrainConfig, state: OptimState,
                schedule: CosineWarmupSchedule, rng: np.random.Generator, epoch: int = 0) -> tuple[float, float]:
    """Returns (mean training loss, last learning rate used)."""
    total, seen, lr = 0.0, 0, schedule(state.step)
    for index, batch_idx in enumerate(data_service.iterate_batches(len(dataset), cfg.batch_size, rng)):
        batch = data_service.make_batch(dataset, batch_idx)
        images = batch.images
        if cfg.augment:
            images = data_service.random_crop_flip(images, cfg.crop_pad, rng)
            batch = batch.model_copy(update={"images": images})
        if cfg.mixup_alpha > 0:
            batch = data_service.mixup_batch(batch, cfg.mixup_alpha, rng)

        lr = schedule(state.step)
        model.params.zero_grad()
        with Tape():
            logits = model_forward(data_service.normalize(batch.images, model.stats), model)
            loss = label_smoothed_cross_entropy(logits, batch.targets, cfg.label_smoothing)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, batch {index}, lr {lr:.3e}")
        backward(loss)
        adamw_step(model, state, lr)
        logger.debug("epoch %d batch %d loss %.6f lr %.3e", epoch, index, value, lr)
        total += value * batch.size
        seen += batch.size
    return total / seen, lr


def evaluate(model: VisionModel, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Plain cross-entropy and accuracy over the whole set (no augmentation)."""
    loss_sum, correct = 0.0, 0
    for batch_idx in data_service.iterate_batches(len(dataset), batch_size, shuffle=False):
        images = data_service.normalize(dataset.images(batch_idx), model.stats)
        logits = model_forward(images, model)
        targets = data_service.one_hot(dataset.labels[batch_idx], dataset.num_classes)
        loss_sum += cross_entropy(logits, targets).item() * len(batch_idx)
        correct += int((logits.values.argmax(axis=-1) == dataset.labels[batch_idx]).sum())
    return loss_sum / len(dataset), correct / len(dataset)


def fit(model: VisionModel, train: Dataset, test: Dataset, cfg: TrainConfig,
        checkpoint_path: str | Path | None = None, report_path: str | Path | None = None,
        data_info: dict[str, str] | None = None) -> list[TrainReportRow]:
    """
    Train for cfg.epochs, evaluating after each epoch. The report CSV is
    rewritten after every epoch; the checkpoint is written once at the end.
    """
    if train.num_classes != model.cfg.num_classes:
        raise ConfigError(f"dataset has {train.num_classes} classes, model expects {model.cfg.num_classes}")
    if model.stats is None:
        model.stats = data_service.channel_stats(train)
    steps = math.ceil(len(train) / cfg.batch_size)
    schedule = CosineWarmupSchedule(cfg.schedule(steps))
    state = OptimState(cfg.optim())
    rng = np.random.default_rng([cfg.seed, 1])
    logger.info("training %d epochs on %d samples (%d steps/epoch), evaluating on %d",
                cfg.epochs, len(train), steps, len(test))

    rows: list[TrainReportRow] = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        train_loss, lr = train_epoch(model, train, cfg, state, schedule, rng, epoch)
        eval_loss, eval_acc = evaluate(model, test, cfg.eval_batch_size)
        row = TrainReportRow(epoch=epoch + 1, train_loss=train_loss, eval_loss=eval_loss,
                             eval_acc=eval_acc, lr=lr, seconds=time.perf_counter() - started)
        rows.append(row)
        logger.info("epoch %d/%d train_loss %.4f eval_loss %.4f eval_acc %.4f lr %.2e (%.1fs)",
                    row.epoch, cfg.epochs, train_loss, eval_loss, eval_acc, lr, row.seconds)
        if report_path is not None:
            export_service.write_train_report(report_path, rows)

    if checkpoint_path is not None:
        checkpoint_service.save_checkpoint(checkpoint_path, model, data_info)
    return rows
