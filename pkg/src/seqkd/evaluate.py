"""Leave-one-out ranking evaluation with HR@K and NDCG@K.

Candidates are every real item token (PAD and MASK excluded); nothing is
sampled and previously seen items are not filtered. Scores are ranked in
descending order with ties going to the smaller token ID.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorcore as tc
from .corpus import NUM_RESERVED, SplitDataset
from .errors import ContractError, ParameterError
from .masking import test_time_mask
from .model import ModelConfig, Params, logits_at

DEFAULT_KS = (5, 10)
CANDIDATE_POLICIES = ("all_items",)

ScoreFn = Callable[[np.ndarray], np.ndarray]  # [B, n] inputs -> [B, V] scores


def rank_of_target(scores, target: int, candidate_policy: str = "all_items") -> int:
    """1-based rank of ``target`` among all item tokens by descending score."""
    if candidate_policy not in CANDIDATE_POLICIES:
        raise ParameterError(f"unknown candidate policy {candidate_policy!r}")
    scores = np.asarray(scores, dtype=np.float64)
    if not NUM_RESERVED <= target < scores.shape[-1]:
        raise ContractError(f"target {target} is not a candidate item token")
    return int(batch_ranks(scores[None, :], np.asarray([target]))[0])


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_target` over rows of ``scores``."""
    cand = scores[:, NUM_RESERVED:]
    tokens = np.arange(NUM_RESERVED, scores.shape[1])
    t = scores[np.arange(len(targets)), targets][:, None]
    better = (cand > t) | ((cand == t) & (tokens[None, :] < targets[:, None]))
    return 1 + better.sum(axis=1)


def ranked_candidates(scores: np.ndarray) -> np.ndarray:
    """Item tokens ordered best-first under the same rule as :func:`rank_of_target`."""
    scores = np.asarray(scores, dtype=np.float64)
    tokens = np.arange(NUM_RESERVED, scores.shape[-1])
    order = np.lexsort((tokens, -scores[NUM_RESERVED:]))
    return tokens[order]


def _check_k(k: int) -> None:
    if k < 1:
        raise ParameterError(f"K must be >= 1, got {k}")


def hr_at_k(rank, k: int):
    _check_k(k)
    if np.any(np.asarray(rank) < 1):
        raise ContractError("rank must be >= 1")
    return (np.asarray(rank) <= k).astype(np.float64) if np.ndim(rank) else float(rank <= k)


def ndcg_at_k(rank, k: int):
    _check_k(k)
    r = np.asarray(rank, dtype=np.float64)
    if np.any(r < 1):
        raise ContractError("rank must be >= 1")
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return out if np.ndim(rank) else float(out)


@dataclass
class RankingReport:
    split: str
    ks: tuple[int, ...]
    metrics: dict[str, float]
    users: int
    config_digest: str = ""
    ranks: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "Ks": list(self.ks),
            "metrics": self.metrics,
            "users": self.users,
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RankingReport":
        return cls(obj["split"], tuple(obj["Ks"]), dict(obj["metrics"]), int(obj["users"]),
                   obj.get("config_digest", ""))


def report_from_ranks(ranks: np.ndarray, split: str, ks: Sequence[int], digest: str = "",
                      keep_ranks: bool = False) -> RankingReport:
    metrics = {}
    for k in ks:
        # fixed-order float64 reduction
        metrics[f"HR@{k}"] = float(np.sum(hr_at_k(ranks, k)) / len(ranks)) if len(ranks) else 0.0
        metrics[f"NDCG@{k}"] = float(np.sum(ndcg_at_k(ranks, k)) / len(ranks)) if len(ranks) else 0.0
    return RankingReport(split, tuple(ks), metrics, int(len(ranks)), digest,
                         ranks if keep_ranks else None)


def query_inputs(dataset: SplitDataset, split: str, n: int | None = None) -> np.ndarray:
    """Append-MASK query rows for every user (``[U, n]``)."""
    n = n or dataset.max_len
    return np.stack([test_time_mask(dataset.history(u, split), n) for u in range(dataset.num_users)])


def model_score_fn(params: Params, config: ModelConfig) -> ScoreFn:
    """Scores at the final (MASK) position, eval mode."""
    def score(inputs: np.ndarray) -> np.ndarray:
        B, n = inputs.shape
        with tc.no_grad():
            return logits_at(inputs, np.arange(B) * n + (n - 1), params, config).data

    return score


def evaluate_scores(
    score_fn: ScoreFn, dataset: SplitDataset, split: str = "test", ks: Sequence[int] = DEFAULT_KS,
    batch_size: int = 512, n: int | None = None, digest: str = "", keep_ranks: bool = False,
) -> RankingReport:
    for k in ks:
        _check_k(k)
    inputs = query_inputs(dataset, split, n)
    targets = dataset.targets(split)
    ranks = np.empty(len(targets), dtype=np.int64)
    for lo in range(0, len(targets), batch_size):
        hi = lo + batch_size
        ranks[lo:hi] = batch_ranks(score_fn(inputs[lo:hi]), targets[lo:hi])
    return report_from_ranks(ranks, split, ks, digest, keep_ranks)


def config_digest(config: ModelConfig, extra: dict | None = None) -> str:
    blob = json.dumps({"model": config.to_json(), **(extra or {})}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate(
    params: Params, config: ModelConfig, dataset: SplitDataset, split: str = "test",
    ks: Sequence[int] = DEFAULT_KS, batch_size: int = 512, keep_ranks: bool = False,
) -> RankingReport:
    """Rank each user's held-out item from an append-MASK query.

    For the test split the validation item is part of the history.
    """
    if config.vocab_size != dataset.vocab_size:
        raise ParameterError(f"model vocab {config.vocab_size} != dataset vocab {dataset.vocab_size}")
    digest = config_digest(config, {"split": split, "users": dataset.num_users})
    return evaluate_scores(model_score_fn(params, config), dataset, split, ks, batch_size,
                           n=config.max_len, digest=digest, keep_ranks=keep_ranks)


def population_std(values: Sequence[float]) -> float:
    """Standard deviation with the 1/N (population) normaliser."""
    v = np.asarray(values, dtype=np.float64)
    if not v.size:
        return 0.0
    d = v - v[0]  # shifting first keeps identical inputs at exactly 0
    return float(math.sqrt(np.mean((d - d.mean()) ** 2)))
