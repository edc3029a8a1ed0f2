"""Synthetic interaction logs for tests and desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .corpus import Interaction
from .tensorcore import make_rng


def markov_transitions(num_items: int, branching: int = 4, noise: float = 0.1,
                       seed: int = 0) -> np.ndarray:
    """Row-stochastic ``[num_items, num_items]`` first-order transition matrix.

    Each item has ``branching`` preferred successors with geometrically
    decaying weights; ``noise`` of the mass is spread uniformly.
    """
    rng = make_rng(seed, 0x4D4B)
    weights = 0.5 ** np.arange(branching)
    weights /= weights.sum()
    P = np.full((num_items, num_items), noise / num_items)
    for i in range(num_items):
        succ = rng.choice(num_items, size=branching, replace=False)
        P[i, succ] += (1.0 - noise) * weights
    return P


def markov_sequences(num_users: int, num_items: int, min_len: int = 8, max_len: int = 20,
                     branching: int = 4, noise: float = 0.1, seed: int = 0) -> dict[str, list[str]]:
    """Per-user item-ID walks through a random first-order Markov chain."""
    P = markov_transitions(num_items, branching, noise, seed)
    cdf = np.cumsum(P, axis=1)
    rng = make_rng(seed, 0x5E0)
    out = {}
    for u in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        state = int(rng.integers(num_items))
        walk = [state]
        for _ in range(length - 1):
            state = min(int(np.searchsorted(cdf[state], rng.random(), side="right")), num_items - 1)
            walk.append(state)
        out[f"u{u}"] = [f"i{s}" for s in walk]
    return out


def sequences_to_interactions(sequences: dict[str, list[str]]) -> list[Interaction]:
    out = []
    for user, items in sequences.items():
        out.extend(Interaction(user, item, 1000 + t) for t, item in enumerate(items))
    return out


def cyclic_sequences(num_sequences: int, num_items: int, length: int, seed: int = 0) -> dict[str, list[str]]:
    """Deterministic walks along one fixed random permutation cycle.

    Every item has exactly one successor, so a model with enough capacity can
    reconstruct masked positions from their neighbours with near-zero loss.
    """
    rng = make_rng(seed, 0xC1C)
    succ = rng.permutation(num_items)
    out = {}
    for s in range(num_sequences):
        state = int(rng.integers(num_items))
        walk = []
        for _ in range(length):
            walk.append(f"i{state}")
            state = int(succ[state])
        out[f"u{s}"] = walk
    return out
