"""Experiment protocols: one-axis sweeps and random-mapping stability runs.

A grid cell is one full pipeline run (optional teacher training, training or
distillation, evaluation). Grid ``mean``/``std`` are taken over cells; the
standard deviation uses the population (1/N) formula.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from .corpus import Interaction, SplitDataset, build_sequences, make_token_map, split_leave_one_out
from .distill import DistillConfig, distill
from .errors import ParameterError
from .evaluate import DEFAULT_KS, RankingReport, evaluate, population_std
from .model import INIT_MODES, ModelConfig, Params, init_params
from .train import TrainConfig, TrainHistory, train

log = logging.getLogger(__name__)

AXES = ("rho", "alpha", "temperature", "mapping_seed", "init_mode")
STAGES = ("train", "distill")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to go from a prepared dataset to a ranking report.

    ``model`` is the network being produced (the student when ``stage`` is
    ``distill``); its vocab size and max length are taken from the dataset.
    ``init_mode`` applies to the stage-one model: ``model`` itself for
    ``stage="train"``, the in-pipeline teacher for ``stage="distill"``.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage: str = "train"
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_model: ModelConfig | None = None
    teacher_train: TrainConfig | None = None
    init_mode: str = "scratch_all"
    init_checkpoint: str | None = None
    init_seed: int = 0
    split: str = "test"
    ks: tuple[int, ...] = DEFAULT_KS

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ParameterError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.init_mode not in INIT_MODES:
            raise ParameterError(f"unknown init mode {self.init_mode!r}")


@dataclass
class PipelineResult:
    report: RankingReport
    params: Params
    config: ModelConfig
    history: TrainHistory
    teacher: tuple[Params, ModelConfig] | None = None


def _fit_config(config: ModelConfig, dataset: SplitDataset) -> ModelConfig:
    return replace(config, vocab_size=dataset.vocab_size, max_len=dataset.max_len)


def train_stage_one(dataset: SplitDataset, model: ModelConfig, tcfg: TrainConfig,
                    init_mode: str, checkpoint: str | None, seed: int):
    config = _fit_config(model, dataset)
    params = init_params(config, seed, init_mode, checkpoint)
    params, history = train((params, config), dataset, tcfg)
    return params, config, history


def run_pipeline(
    dataset: SplitDataset, cfg: PipelineConfig, teacher: tuple[Params, ModelConfig] | None = None
) -> PipelineResult:
    if cfg.stage == "train":
        params, config, history = train_stage_one(
            dataset, cfg.model, cfg.train, cfg.init_mode, cfg.init_checkpoint, cfg.init_seed
        )
    else:
        if teacher is None:
            if cfg.teacher_model is None:
                raise ParameterError("distill stage needs a teacher or a teacher_model config")
            t_params, t_config, _ = train_stage_one(
                dataset, cfg.teacher_model, cfg.teacher_train or cfg.train,
                cfg.init_mode, cfg.init_checkpoint, cfg.init_seed,
            )
            teacher = (t_params, t_config)
        config = _fit_config(cfg.model, dataset)
        student = init_params(config, cfg.init_seed)
        params, history = distill(teacher, (student, config), dataset, cfg.distill)
    report = evaluate(params, config, dataset, cfg.split, cfg.ks)
    return PipelineResult(report, params, config, history, teacher)


@dataclass
class ExperimentGrid:
    axis: str
    values: list
    cells: list[RankingReport]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.mean and self.cells:
            names = list(self.cells[0].metrics)
            for name in names:
                vals = [c.metrics[name] for c in self.cells]
                self.mean[name] = float(sum(vals) / len(vals))
                self.std[name] = population_std(vals)

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "values": list(self.values),
            "cells": [c.to_json() for c in self.cells],
            "mean": self.mean,
            "std": self.std,
            "std_formula": "population",
        }


def apply_axis(cfg: PipelineConfig, axis: str, value: Any) -> PipelineConfig:
    """``cfg`` with one sweep axis set to ``value`` (mapping_seed is data-side)."""
    if axis == "rho":
        if cfg.stage == "train":
            return replace(cfg, train=replace(cfg.train, rho=float(value)))
        return replace(cfg, distill=replace(cfg.distill, rho=float(value)))
    if axis in ("alpha", "temperature"):
        if cfg.stage != "distill":
            raise ParameterError(f"axis {axis!r} needs stage='distill'")
        return replace(cfg, distill=replace(cfg.distill, **{axis: float(value)}))
    if axis == "init_mode":
        return replace(cfg, init_mode=str(value))
    if axis == "mapping_seed":
        return cfg
    raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def sweep(
    axis: str, values: Sequence, base_config: PipelineConfig, dataset: SplitDataset,
    teacher: tuple[Params, ModelConfig] | None = None,
) -> ExperimentGrid:
    """One pipeline run per value of ``axis``, everything else held fixed.

    A supplied ``teacher`` is shared by every cell, except on the
    ``mapping_seed`` axis where token IDs change and each cell trains its own.
    """
    if axis not in AXES:
        raise ParameterError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if not values:
        raise ParameterError("sweep needs at least one value")
    cells = []
    for value in values:
        cfg = apply_axis(base_config, axis, value)
        data, cell_teacher = dataset, teacher
        if axis == "mapping_seed":
            data, cell_teacher = dataset.remap(int(value)), None
        log.info("sweep %s=%s", axis, value)
        cells.append(run_pipeline(data, cfg, cell_teacher).report)
    return ExperimentGrid(axis, list(values), cells)


def stability_experiment(
    dataset_raw: Mapping[str, Sequence[str]] | Sequence[Interaction] | SplitDataset,
    seeds: Sequence[int],
    pipeline_config: PipelineConfig,
    n: int = 50,
) -> ExperimentGrid:
    """Repeat the whole pipeline under differently seeded item->token maps."""
    if len(seeds) < 2:
        raise ParameterError("stability experiment needs at least two seeds")
    if isinstance(dataset_raw, SplitDataset):
        return sweep("mapping_seed", list(seeds), pipeline_config, dataset_raw)
    if isinstance(dataset_raw, Mapping):
        sequences = {u: list(s) for u, s in dataset_raw.items()}
    else:
        sequences = build_sequences(dataset_raw)
    items = {i for s in sequences.values() if len(s) >= 3 for i in s}
    cells = []
    for seed in seeds:
        data = split_leave_one_out(sequences, n, make_token_map(items, seed))
        log.info("stability mapping seed %s", seed)
        cells.append(run_pipeline(data, pipeline_config).report)
    return ExperimentGrid("mapping_seed", list(seeds), cells)
