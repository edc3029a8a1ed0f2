"""Masked-item training with Adam and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, TextIO

import numpy as np

from . import tensorcore as tc
from .corpus import SplitDataset
from .errors import ContractError, ParameterError, TrainingError
from .masking import IGNORE, mask_batch
from .model import ModelConfig, Params, copy_params, logits_at, save_checkpoint
from .tensorcore import GradTape, Tensor

log = logging.getLogger(__name__)

_ORDER_STREAM = 0x0D3E
_DROPOUT_STREAM = 0x0D50


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 150
    patience: int = 5
    rho: float = 0.55
    seed: int = 0
    selection_metric: str = "NDCG@10"
    clip_norm: float | None = None
    eval_batch_size: int = 512

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.patience < 1:
            raise ParameterError(f"patience must be >= 1, got {self.patience}")
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ParameterError("batch_size and max_epochs must be >= 1")
        if not 0 < self.rho < 1:
            raise ParameterError(f"rho must lie in (0, 1), got {self.rho}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ParameterError(f"clip_norm must be positive, got {self.clip_norm}")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Params, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig
) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    if config.clip_norm is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if norm > config.clip_norm:
            factor = config.clip_norm / norm
            grads = {k: g * factor for k, g in grads.items()}
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def mlm_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over every masked position in the batch (pooled)."""
    loss, count = tc.cross_entropy_masked(logits, labels, IGNORE)
    if count == 0:
        raise ContractError("mlm_loss: batch has no masked positions")
    return loss


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    loss: float
    metric: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = -math.inf
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def metrics(self) -> list[float]:
        return [r.metric for r in self.records]

    def to_json(self) -> dict:
        return {
            "epochs": [vars(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "stopped_early": self.stopped_early,
        }


# batch_loss(params, inputs, labels, rng) -> scalar Tensor
BatchLoss = Callable[[Params, np.ndarray, np.ndarray, np.random.Generator], Tensor]


def masked_positions(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of masked positions and their target tokens."""
    flat = labels.reshape(-1)
    rows = np.flatnonzero(flat != IGNORE)
    return rows, flat[rows]


def mlm_batch_loss(config: ModelConfig) -> BatchLoss:
    def loss_fn(params, inputs, labels, rng):
        rows, targets = masked_positions(labels)
        logits = logits_at(inputs, rows, params, config, train_mode=True, rng=rng)
        return mlm_loss(logits, targets)

    return loss_fn


def validation_metric(config: ModelConfig, dataset: SplitDataset, metric: str, batch_size: int):
    from .evaluate import evaluate

    k = _metric_k(metric)

    def metric_fn(params: Params) -> float:
        report = evaluate(params, config, dataset, "val", ks=(k,), batch_size=batch_size)
        return report.metrics[metric]

    return metric_fn


def _metric_k(metric: str) -> int:
    name, _, k = metric.partition("@")
    if name not in ("HR", "NDCG") or not k.isdigit():
        raise ParameterError(f"selection_metric must look like NDCG@10 or HR@5, got {metric!r}")
    return int(k)


def fit(
    params: Params,
    vocab_size: int,
    dataset: SplitDataset,
    config: TrainConfig,
    batch_loss: BatchLoss,
    metric_fn: Callable[[Params], float],
    log_stream: TextIO | None = None,
    checkpoint: tuple[ModelConfig, str] | None = None,
) -> tuple[Params, TrainHistory]:
    """Generic epoch loop: re-mask, shuffle, optimise, validate, early-stop.

    ``params`` is updated in place; the returned params are a copy taken at
    the best validation epoch (strict improvement, zero tolerance).
    """
    if dataset.num_users < 1:
        raise ContractError("training needs at least one user")
    state = AdamState()
    history = TrainHistory()
    best = copy_params(params)
    bad_epochs = 0
    users = np.arange(dataset.num_users)
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        order = tc.make_rng(config.seed, _ORDER_STREAM, epoch).permutation(users)
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = mask_batch(dataset.train[idx], config.rho, config.seed, epoch, idx, vocab_size)
            rng = tc.make_rng(config.seed, _DROPOUT_STREAM, epoch, start)
            with GradTape() as tape:
                loss = batch_loss(params, batch.inputs, batch.labels, rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            grads = tape.backward(loss).for_params(params)
            try:
                adam_step(params, grads, state, config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from None
            losses.append(value)
            step += 1
        epoch_loss = float(np.mean(losses))
        metric = float(metric_fn(params))
        history.records.append(EpochRecord(epoch, step, epoch_loss, metric))
        line = f"{epoch},{step},{epoch_loss:.6f},{metric:.6f}"
        log.info("epoch,step,loss,metric = %s", line)
        if log_stream is not None:
            log_stream.write(line + "\n")
            log_stream.flush()
        if metric > history.best_metric:
            history.best_metric = metric
            history.best_epoch = epoch
            best = copy_params(params)
            bad_epochs = 0
            if checkpoint is not None:
                save_checkpoint(best, checkpoint[0], checkpoint[1])
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                history.stopped_early = True
                break
    return best, history


def train(
    model_init: tuple[Params, ModelConfig],
    dataset: SplitDataset,
    config: TrainConfig,
    metric_fn: Callable[[Params], float] | None = None,
    log_stream: TextIO | None = None,
    checkpoint_path: str | None = None,
) -> tuple[Params, TrainHistory]:
    """Stage-one masked-item training of ``model_init`` on ``dataset``."""
    params, model_config = model_init
    if model_config.vocab_size != dataset.vocab_size:
        raise ParameterError(
            f"model vocab {model_config.vocab_size} != dataset vocab {dataset.vocab_size}"
        )
    if metric_fn is None:
        metric_fn = validation_metric(
            model_config, dataset, config.selection_metric, config.eval_batch_size
        )
    ck = (model_config, checkpoint_path) if checkpoint_path else None
    return fit(
        params, model_config.vocab_size, dataset, config, mlm_batch_loss(model_config),
        metric_fn, log_stream, ck,
    )
