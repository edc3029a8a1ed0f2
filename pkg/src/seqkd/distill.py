"""Temperature-based distillation of a frozen teacher into a small student."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, TextIO

import numpy as np

from . import tensorcore as tc
from .corpus import SplitDataset
from .errors import ConfigurationError, ParameterError
from .model import ModelConfig, Params, logits_at
from .tensorcore import Tensor
from .train import TrainConfig, TrainHistory, fit, masked_positions, mlm_loss, validation_metric


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 1.5
    rho: float = 0.35
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 5
    seed: int = 0
    selection_metric: str = "NDCG@10"
    clip_norm: float | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        _check_alpha(self.alpha)
        _check_temperature(self.temperature)
        self.train_config()  # validates the optimiser fields

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, batch_size=self.batch_size, max_epochs=self.max_epochs,
            patience=self.patience, rho=self.rho, seed=self.seed,
            selection_metric=self.selection_metric, clip_norm=self.clip_norm,
            eval_batch_size=self.eval_batch_size,
        )

    def with_(self, **changes) -> "DistillConfig":
        return replace(self, **changes)


def _check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return float(alpha)


def _check_temperature(temperature: float) -> float:
    if not temperature > 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return float(temperature)


def soft_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    """Cross-entropy of the tempered student against the tempered teacher.

    Rows are positions (already restricted to masked slots); the teacher side
    is a constant.
    """
    temperature = _check_temperature(temperature)
    z_t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    targets = tc.softmax_rows(Tensor(z_t), temperature).data
    return tc.soft_cross_entropy(student_logits, targets, temperature)


def hard_loss(student_logits, labels) -> Tensor:
    return mlm_loss(student_logits, labels)


def combined_loss(student_logits, teacher_logits, labels, alpha: float, temperature: float) -> Tensor:
    """``alpha * hard + (1 - alpha) * T**2 * soft``.

    Zero-weighted terms are skipped, so ``alpha == 1`` never touches the
    teacher logits or the temperature.
    """
    alpha = _check_alpha(alpha)
    temperature = _check_temperature(temperature)
    if alpha == 1.0:
        return hard_loss(student_logits, labels)
    soft = tc.scale(soft_loss(student_logits, teacher_logits, temperature),
                    (1.0 - alpha) * temperature * temperature)
    if alpha == 0.0:
        return soft
    return tc.add(tc.scale(hard_loss(student_logits, labels), alpha), soft)


def distill_batch_loss(
    teacher_params: Params, teacher_config: ModelConfig, student_config: ModelConfig,
    alpha: float, temperature: float,
):
    def loss_fn(params, inputs, labels, rng):
        rows, targets = masked_positions(labels)
        teacher_logits = None
        if alpha < 1.0:
            # frozen teacher, eval mode, nothing recorded
            teacher_logits = _teacher_logits(teacher_params, teacher_config, inputs, rows)
        z_s = logits_at(inputs, rows, params, student_config, train_mode=True, rng=rng)
        return combined_loss(z_s, teacher_logits, targets, alpha, temperature)

    return loss_fn


def _teacher_logits(params, config, inputs, rows) -> np.ndarray:
    with tc.no_grad():
        return logits_at(inputs, rows, params, config, train_mode=False).data


def distill(
    teacher: tuple[Params, ModelConfig],
    student_init: tuple[Params, ModelConfig],
    dataset: SplitDataset,
    config: DistillConfig,
    metric_fn: Callable[[Params], float] | None = None,
    log_stream: TextIO | None = None,
    checkpoint_path: str | None = None,
) -> tuple[Params, TrainHistory]:
    """Train the student on mixed hard/soft targets; same loop as stage one."""
    teacher_params, teacher_config = teacher
    student_params, student_config = student_init
    if teacher_config.vocab_size != student_config.vocab_size:
        raise ConfigurationError(
            f"teacher vocab {teacher_config.vocab_size} != student vocab {student_config.vocab_size}"
        )
    if teacher_config.max_len != student_config.max_len:
        raise ConfigurationError(
            f"teacher max_len {teacher_config.max_len} != student max_len {student_config.max_len}"
        )
    if student_config.vocab_size != dataset.vocab_size:
        raise ConfigurationError(
            f"model vocab {student_config.vocab_size} != dataset vocab {dataset.vocab_size}"
        )
    tcfg = config.train_config()
    if metric_fn is None:
        metric_fn = validation_metric(
            student_config, dataset, tcfg.selection_metric, tcfg.eval_batch_size
        )
    loss_fn = distill_batch_loss(
        teacher_params, teacher_config, student_config, config.alpha, config.temperature
    )
    ck = (student_config, checkpoint_path) if checkpoint_path else None
    return fit(
        student_params, student_config.vocab_size, dataset, tcfg, loss_fn, metric_fn, log_stream, ck
    )
