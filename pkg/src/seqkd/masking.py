"""Cloze-style masking for training and the append-MASK query for inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import MASK, NUM_RESERVED, PAD, pad_left
from .errors import ContractError, ParameterError
from .tensorcore import make_rng

IGNORE = -1

# shares of selected positions replaced by MASK / a random item / kept
MASK_SHARE = 0.8
RANDOM_SHARE = 0.1

# stream tag so masking draws never collide with other consumers of a seed
_MASK_STREAM = 0x3A5C


@dataclass
class MaskedBatch:
    inputs: np.ndarray  # [B, n] token ids after corruption
    labels: np.ndarray  # [B, n] original token at selected positions, IGNORE elsewhere

    def __post_init__(self):
        if self.inputs.shape != self.labels.shape:
            raise ContractError(f"inputs {self.inputs.shape} vs labels {self.labels.shape}")

    @property
    def num_targets(self) -> int:
        return int((self.labels != IGNORE).sum())


def mask_sequence(
    tokens: Sequence[int], rho: float, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt one token sequence for masked-item training.

    Every non-PAD position is selected with probability ``rho``; a selected
    position becomes MASK with probability 0.8, a uniformly drawn item token
    with probability 0.1 (possibly the original), and is left as is otherwise.
    At least one position is always selected.
    """
    if not 0.0 < rho < 1.0:
        raise ParameterError(f"rho must lie in (0, 1), got {rho}")
    if vocab_size <= NUM_RESERVED:
        raise ParameterError(f"vocab_size {vocab_size} leaves no item tokens")
    tokens = np.asarray(tokens, dtype=np.int64)
    real = np.flatnonzero(tokens != PAD)
    if real.size == 0:
        raise ContractError("cannot mask an all-PAD sequence")
    n = tokens.size
    select_u = rng.random(n)
    action_u = rng.random(n)
    replacements = rng.integers(NUM_RESERVED, vocab_size, size=n)
    selected = np.zeros(n, dtype=bool)
    selected[real] = select_u[real] < rho
    if not selected.any():
        selected[real[rng.integers(real.size)]] = True

    inputs = tokens.copy()
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[selected] = tokens[selected]
    to_mask = selected & (action_u < MASK_SHARE)
    to_random = selected & (action_u >= MASK_SHARE) & (action_u < MASK_SHARE + RANDOM_SHARE)
    inputs[to_mask] = MASK
    inputs[to_random] = replacements[to_random]
    return inputs, labels


def mask_batch(
    rows: np.ndarray, rho: float, seed: int, epoch: int, user_ids: Sequence[int], vocab_size: int
) -> MaskedBatch:
    """Mask each row with its own ``(seed, epoch, user)`` stream."""
    inputs = np.empty_like(rows)
    labels = np.empty_like(rows)
    for i, (row, uid) in enumerate(zip(rows, user_ids)):
        rng = make_rng(seed, _MASK_STREAM, epoch, int(uid))
        inputs[i], labels[i] = mask_sequence(row, rho, rng, vocab_size)
    return MaskedBatch(inputs, labels)


def test_time_mask(tokens: Sequence[int], n: int) -> np.ndarray:
    """Last ``n - 1`` history tokens (left-padded) followed by MASK."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("test_time_mask needs a nonempty history")
    if n < 2:
        raise ParameterError(f"max_len must be >= 2 for append-MASK queries, got {n}")
    return np.asarray(pad_left(tokens, n - 1) + [MASK], dtype=np.int64)


test_time_mask.__test__ = False  # keep pytest from collecting it by name
