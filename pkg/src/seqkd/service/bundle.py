"""Read-only model bundle, top-K recommendation and the latency benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..corpus import TokenMap, load_token_map
from ..errors import ParameterError, RequestError
from ..evaluate import model_score_fn, ranked_candidates
from ..masking import test_time_mask
from ..model import ModelConfig, Params, load_checkpoint
from ..tensorcore import Tensor


@dataclass(frozen=True)
class ServingBundle:
    params: Params
    config: ModelConfig
    token_map: TokenMap
    label: str = "model"

    def __post_init__(self):
        if self.config.vocab_size != self.token_map.vocab_size:
            raise ParameterError(
                f"model vocab {self.config.vocab_size} != token map vocab {self.token_map.vocab_size}"
            )
        frozen = {}
        for name, t in self.params.items():
            data = np.array(t.data, copy=True)
            data.flags.writeable = False
            frozen[name] = Tensor(data, requires_grad=False, name=name)
        object.__setattr__(self, "params", frozen)
        object.__setattr__(self, "_score", model_score_fn(frozen, self.config))

    @property
    def max_len(self) -> int:
        return self.config.max_len

    @property
    def num_items(self) -> int:
        return self.token_map.num_items

    @classmethod
    def load(cls, checkpoint: str | Path, tokenmap: str | Path, label: str | None = None):
        params, config = load_checkpoint(checkpoint)
        return cls(params, config, load_token_map(tokenmap), label or Path(checkpoint).stem)

    def scores(self, tokens: Sequence[int]) -> np.ndarray:
        inputs = test_time_mask(tokens, self.max_len)[None, :]
        return self._score(inputs)[0]


@dataclass
class Recommendation:
    items: list[str]
    scores: list[float]
    dropped_unknown: int
    clamped: bool


def recommend(bundle: ServingBundle, history: Iterable, k: int) -> Recommendation:
    """Top-``k`` next items for ``history`` (oldest first).

    Unknown item IDs are dropped and counted; ``k`` above the number of items
    is clamped and flagged.
    """
    if k < 1:
        raise RequestError(f"k must be >= 1, got {k}")
    tm = bundle.token_map
    tokens, dropped = [], 0
    for item in history:
        tok = tm.get(item)
        if tok is None:
            dropped += 1
        else:
            tokens.append(tok)
    if not tokens:
        raise RequestError("history has no known items")
    clamped = k > bundle.num_items
    k = min(k, bundle.num_items)
    scores = bundle.scores(tokens)
    top = ranked_candidates(scores)[:k]
    return Recommendation(tm.decode(top), [float(scores[t]) for t in top], dropped, clamped)


@dataclass
class LatencyReport:
    label: str
    requests: int
    p50_us: float
    p95_us: float
    p99_us: float

    def to_json(self) -> dict:
        return vars(self).copy()


def latency_report(label: str, samples_ns: Sequence[int]) -> LatencyReport:
    us = np.asarray(samples_ns, dtype=np.float64) / 1e3
    p50, p95, p99 = np.percentile(us, [50, 95, 99])
    return LatencyReport(label, int(us.size), float(p50), float(p95), float(p99))


def valid_trace(trace: Iterable[Sequence], token_map: TokenMap) -> list[list]:
    """Histories with at least one known item; the rest cannot be served."""
    return [list(h) for h in trace if any(item in token_map for item in h)]


def replay(call: Callable[[list], object], trace: Sequence[list], warmup: int) -> list[int]:
    """Time ``call`` serially over ``trace``; the first ``warmup`` calls are not kept."""
    samples = []
    for i, history in enumerate(trace):
        t0 = time.perf_counter_ns()
        call(history)
        dt = time.perf_counter_ns() - t0
        if i >= warmup:
            samples.append(dt)
    return samples


@dataclass
class BenchResult:
    teacher: LatencyReport
    student: LatencyReport
    ratio: float  # student p50 / teacher p50

    def to_json(self) -> dict:
        return {"teacher": self.teacher.to_json(), "student": self.student.to_json(),
                "student_over_teacher_p50": self.ratio}


def bench(teacher: ServingBundle, student: ServingBundle, request_trace: Sequence[Sequence],
          warmup: int = 10, k: int = 10) -> BenchResult:
    """Replay one trace against both bundles, single requests in series."""
    if teacher.token_map.items != student.token_map.items:
        raise ParameterError("teacher and student bundles use different token maps")
    if warmup < 0:
        raise ParameterError(f"warmup must be >= 0, got {warmup}")
    trace = valid_trace(request_trace, teacher.token_map)
    if len(trace) <= warmup:
        raise ParameterError(f"trace has {len(trace)} valid requests, need more than warmup={warmup}")
    reports = []
    for bundle in (teacher, student):
        samples = replay(lambda h, b=bundle: recommend(b, h, k), trace, warmup)
        reports.append(latency_report(bundle.label, samples))
    return BenchResult(reports[0], reports[1], reports[1].p50_us / reports[0].p50_us)
