"""Interaction-log ingestion, filtering, leave-one-out splitting and token mapping.

Item and user identifiers are kept as stripped strings throughout; numeric
looking IDs are never reinterpreted, so ``"007"`` and ``"7"`` are distinct.
"""

from __future__ import annotations

import json
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, LoadError, ParameterError
from .tensorcore import make_rng

log = logging.getLogger(__name__)

PAD = 0
MASK = 1
NUM_RESERVED = 2

FORMATS = ("ml-1m", "tsv")
DATASET_MAGIC = b"SRDS1"


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


def _normalize_id(raw) -> str:
    return str(raw).strip()


def _parse_line(line: str, fmt: str, lineno: int) -> Interaction:
    if fmt == "ml-1m":
        parts = line.split("::")
        if len(parts) != 4:
            raise DataError(f"line {lineno}: expected user::item::rating::timestamp, got {line!r}")
        user, item, _rating, ts = parts
    else:
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"line {lineno}: expected user<TAB>item<TAB>timestamp, got {line!r}")
        user, item, ts = parts
    user, item = _normalize_id(user), _normalize_id(item)
    if not user or not item:
        raise DataError(f"line {lineno}: empty user or item id")
    try:
        timestamp = int(ts.strip())
    except ValueError:
        raise DataError(f"line {lineno}: timestamp {ts.strip()!r} is not an integer") from None
    if timestamp < 0:
        raise DataError(f"line {lineno}: negative timestamp {timestamp}")
    return Interaction(user, item, timestamp)


def load_interactions(path: str | Path, fmt: str) -> list[Interaction]:
    """Parse an interaction log. Ratings, if present, are discarded.

    Blank lines are skipped; any other malformed line raises
    :class:`DataError` with its 1-based line number.
    """
    if fmt not in FORMATS:
        raise ParameterError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            out.append(_parse_line(line, fmt, lineno))
    return out


def filter_min_count(interactions: Sequence[Interaction], min_count: int = 5) -> list[Interaction]:
    """Drop users and items with fewer than ``min_count`` interactions.

    Repeated until no further removal happens, since dropping an item can push
    a user under the threshold and vice versa.
    """
    if min_count < 1:
        raise ParameterError(f"min_count must be >= 1, got {min_count}")
    current = list(interactions)
    while True:
        users = Counter(x.user_id for x in current)
        items = Counter(x.item_id for x in current)
        kept = [x for x in current if users[x.user_id] >= min_count and items[x.item_id] >= min_count]
        if len(kept) == len(current):
            return kept
        current = kept


def build_sequences(interactions: Iterable[Interaction]) -> dict[str, list[str]]:
    """Per-user item lists in ascending timestamp order (stable on ties).

    Users appear in order of first occurrence.
    """
    events: dict[str, list[tuple[int, str]]] = defaultdict(list)
    for x in interactions:
        events[x.user_id].append((x.timestamp, x.item_id))
    return {u: [item for _, item in sorted(evs, key=lambda e: e[0])] for u, evs in events.items()}


@dataclass(frozen=True)
class TokenMap:
    """Seeded random bijection between item IDs and token IDs 2..V-1."""

    seed: int
    items: tuple[str, ...]  # items[token - NUM_RESERVED] is the item for that token
    _index: Mapping[str, int] = field(default=None, repr=False, compare=False, hash=False)

    def __post_init__(self):
        index = {item: tok for tok, item in enumerate(self.items, start=NUM_RESERVED)}
        if len(index) != len(self.items):
            raise DataError("token map items are not unique")
        object.__setattr__(self, "_index", index)

    @property
    def vocab_size(self) -> int:
        return len(self.items) + NUM_RESERVED

    @property
    def num_items(self) -> int:
        return len(self.items)

    def token(self, item: str) -> int:
        return self._index[item]

    def get(self, item, default=None):
        return self._index.get(_normalize_id(item), default)

    def item(self, token: int) -> str:
        if token < NUM_RESERVED or token >= self.vocab_size:
            raise ContractError(f"token {token} is not an item token")
        return self.items[token - NUM_RESERVED]

    def encode(self, items: Iterable[str]) -> list[int]:
        return [self._index[i] for i in items]

    def decode(self, tokens: Iterable[int]) -> list[str]:
        return [self.item(int(t)) for t in tokens]

    def __contains__(self, item) -> bool:
        return _normalize_id(item) in self._index

    def to_json(self) -> dict:
        return {"seed": self.seed, "items": list(self.items)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "TokenMap":
        return cls(int(obj["seed"]), tuple(str(i) for i in obj["items"]))


def make_token_map(item_set: Iterable[str], seed: int) -> TokenMap:
    """Randomly assign each distinct item a token in ``[2, len(items) + 2)``.

    The assignment depends only on ``seed`` and the sorted item set.
    """
    items = sorted({_normalize_id(i) for i in item_set})
    if not items:
        raise ContractError("cannot build a token map from an empty item set")
    order = make_rng(seed, 0x7A0).permutation(len(items))
    return TokenMap(int(seed), tuple(items[i] for i in order))


@dataclass
class SplitDataset:
    """Leave-one-out split in token space.

    ``train`` holds each user's training prefix, truncated to the most recent
    ``max_len`` items and left-padded with PAD to exactly ``max_len``.
    """

    train: np.ndarray  # [U, max_len] int64
    val: np.ndarray  # [U]
    test: np.ndarray  # [U]
    token_map: TokenMap
    max_len: int
    users: tuple[str, ...]
    excluded: int = 0
    provenance: dict = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.users)

    @property
    def vocab_size(self) -> int:
        return self.token_map.vocab_size

    def history(self, user_index: int, split: str) -> list[int]:
        """Unpadded token history preceding the held-out ``split`` target."""
        row = self.train[user_index]
        hist = [int(t) for t in row if t != PAD]
        if split == "test":
            hist.append(int(self.val[user_index]))
        elif split != "val":
            raise ParameterError(f"split must be 'val' or 'test', got {split!r}")
        return hist

    def targets(self, split: str) -> np.ndarray:
        if split == "val":
            return self.val
        if split == "test":
            return self.test
        raise ParameterError(f"split must be 'val' or 'test', got {split!r}")

    def item_sequences(self) -> dict[str, list[str]]:
        """Invert the token map; truncated prefixes stay truncated."""
        tm = self.token_map
        out = {}
        for u, user in enumerate(self.users):
            toks = [int(t) for t in self.train[u] if t != PAD] + [int(self.val[u]), int(self.test[u])]
            out[user] = tm.decode(toks)
        return out

    def remap(self, seed: int) -> "SplitDataset":
        """Same split under a token map drawn with a different seed."""
        new_map = make_token_map(self.token_map.items, seed)
        lut = np.zeros(self.vocab_size, dtype=np.int64)
        lut[PAD], lut[MASK] = PAD, MASK
        for tok, item in enumerate(self.token_map.items, start=NUM_RESERVED):
            lut[tok] = new_map.token(item)
        prov = dict(self.provenance, seed=seed)
        return SplitDataset(
            lut[self.train], lut[self.val], lut[self.test], new_map, self.max_len,
            self.users, self.excluded, prov,
        )


def pad_left(tokens: Sequence[int], n: int) -> list[int]:
    tokens = list(tokens)[-n:]
    return [PAD] * (n - len(tokens)) + tokens


def split_leave_one_out(
    sequences: Mapping[str, Sequence[str]], n: int = 50, token_map: TokenMap | None = None,
    seed: int = 0,
) -> SplitDataset:
    """Hold out each user's last item as test and second-to-last as validation.

    Users with fewer than three items are excluded (counted in
    ``SplitDataset.excluded``). When ``token_map`` is omitted one is drawn
    from the surviving items with ``seed``.
    """
    if n < 1:
        raise ParameterError(f"max_len must be >= 1, got {n}")
    kept = {u: list(s) for u, s in sequences.items() if len(s) >= 3}
    excluded = len(sequences) - len(kept)
    if excluded:
        log.warning("excluded %d users with fewer than 3 interactions", excluded)
    if not kept:
        raise DataError("no user has the 3 interactions a leave-one-out split needs")
    if token_map is None:
        token_map = make_token_map({i for s in kept.values() for i in s}, seed)
    users = tuple(kept)
    train = np.zeros((len(users), n), dtype=np.int64)
    val = np.zeros(len(users), dtype=np.int64)
    test = np.zeros(len(users), dtype=np.int64)
    for u, user in enumerate(users):
        toks = token_map.encode(kept[user])
        train[u] = pad_left(toks[:-2], n)
        val[u] = toks[-2]
        test[u] = toks[-1]
    return SplitDataset(train, val, test, token_map, n, users, excluded)


def prepare_dataset(
    path: str | Path, fmt: str, min_count: int = 5, seed: int = 0, n: int = 50
) -> SplitDataset:
    """load -> filter -> sequences -> token map -> split, in one call."""
    interactions = filter_min_count(load_interactions(path, fmt), min_count)
    data = split_leave_one_out(build_sequences(interactions), n=n, seed=seed)
    data.provenance = {
        "format": fmt,
        "source": Path(path).name,
        "min_count": min_count,
        "seed": seed,
        "interactions": len(interactions),
    }
    return data


# ---------------------------------------------------------------------------
# binary artifact
# ---------------------------------------------------------------------------


def save_dataset(data: SplitDataset, path: str | Path) -> None:
    """Write ``SRDS1`` + u32 header length + JSON header + int32 token rows.

    Each user contributes ``max_len + 2`` little-endian int32 values: the
    padded training view, then the validation and test targets.
    """
    header = {
        "format_version": 1,
        "vocab_size": data.vocab_size,
        "n": data.max_len,
        "seed": data.token_map.seed,
        "users": data.num_users,
        "excluded": data.excluded,
        "provenance": data.provenance,
        "user_ids": list(data.users),
        "token_map": data.token_map.to_json(),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    rows = np.concatenate([data.train, data.val[:, None], data.test[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rows.astype("<i4").tobytes())


def _read_header(raw: bytes, magic: bytes, what: str) -> tuple[dict, int]:
    if raw[: len(magic)] != magic:
        raise LoadError(f"{what}: bad magic {raw[:len(magic)]!r}")
    start = len(magic) + 4
    if len(raw) < start:
        raise LoadError(f"{what}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[len(magic):start])
    if len(raw) < start + hlen:
        raise LoadError(f"{what}: truncated header")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"{what}: unreadable header ({exc})") from None
    return header, start + hlen


def load_dataset(path: str | Path) -> SplitDataset:
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw, DATASET_MAGIC, "dataset")
    n, users = int(header["n"]), int(header["users"])
    expected = users * (n + 2) * 4
    if len(raw) - offset != expected:
        raise LoadError(f"dataset: expected {expected} payload bytes, found {len(raw) - offset}")
    rows = np.frombuffer(raw, dtype="<i4", offset=offset).reshape(users, n + 2).astype(np.int64)
    tm = TokenMap.from_json(header["token_map"])
    if tm.vocab_size != header["vocab_size"]:
        raise LoadError("dataset: vocab_size disagrees with token map")
    return SplitDataset(
        rows[:, :n].copy(), rows[:, n].copy(), rows[:, n + 1].copy(), tm, n,
        tuple(header["user_ids"]), int(header.get("excluded", 0)), header.get("provenance", {}),
    )


def save_token_map(tm: TokenMap, path: str | Path) -> None:
    Path(path).write_text(json.dumps(tm.to_json(), ensure_ascii=False), encoding="utf-8")


def load_token_map(path: str | Path) -> TokenMap:
    """Read a token map from JSON or from a prepared ``SRDS1`` dataset."""
    raw = Path(path).read_bytes()
    if raw.startswith(DATASET_MAGIC):
        header, _ = _read_header(raw, DATASET_MAGIC, "dataset")
        return TokenMap.from_json(header["token_map"])
    try:
        return TokenMap.from_json(json.loads(raw.decode("utf-8")))
    except (ValueError, KeyError) as exc:
        raise LoadError(f"token map {path}: {exc}") from None
