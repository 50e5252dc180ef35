"""Interaction-log ingestion, k-core filtering, leave-one-out split and batching."""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

DATASET_FORMAT = "hymoerec-dataset"
DATASET_VERSION = 1


class DataError(Exception):
    """Raised for unreadable, malformed or empty input data."""


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int
    order: int = 0  # position in the source file, breaks timestamp ties


@dataclass
class SequenceSet:
    """Chronological dense-id sequences, one per user, with both id maps."""

    users: list[str]                # dense user index -> original id
    items: list[str]                # dense item id - 1 -> original id
    sequences: list[list[int]]

    @property
    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.users)}

    @property
    def item_index(self) -> dict[str, int]:
        return {it: i + 1 for i, it in enumerate(self.items)}

    @property
    def n_items(self) -> int:
        return len(self.items)


@dataclass
class DatasetSplit:
    users: list[str]
    items: list[str]
    train: list[list[int]]
    valid: list[int]
    test: list[int]
    excluded: int = 0

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_users(self) -> int:
        return len(self.users)

    def full_sequence(self, u: int) -> list[int]:
        return self.train[u] + [self.valid[u], self.test[u]]

    def summary(self) -> dict:
        n_inter = sum(len(s) + 2 for s in self.train)
        density = n_inter / (self.n_users * self.n_items) if self.n_users and self.n_items else 0.0
        return {"users": self.n_users, "items": self.n_items,
                "interactions": n_inter, "density": density}


@dataclass
class Batch:
    items: np.ndarray                 # (B, L) left-padded item ids
    targets: np.ndarray               # (B,)
    lengths: np.ndarray               # (B,) real tokens per row
    users: np.ndarray                 # (B,) dense user indices
    position_targets: np.ndarray | None = field(default=None)  # (B, L), 0 = no target


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def parse_interactions(path: str | Path, fmt: str = "movielens-dat",
                       max_malformed: int = 0) -> list[Interaction]:
    """Read ``user::item::rating::timestamp`` lines or a ``user,item,timestamp`` CSV.

    More than ``max_malformed`` bad rows raises, naming the first bad line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="latin-1")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    if fmt == "movielens-dat":
        rows, bad = _parse_dat(text)
    elif fmt == "csv":
        rows, bad = _parse_csv(text, path)
    else:
        raise DataError(f"unknown format {fmt!r} (expected movielens-dat or csv)")
    if bad:
        log.warning("%s: %d malformed row(s), first at line %d", path, len(bad), bad[0])
        if len(bad) > max_malformed:
            raise DataError(f"{path}: malformed row at line {bad[0]} ({len(bad)} malformed in total)")
    if not rows:
        raise DataError(f"{path}: empty dataset")
    return rows


def _parse_dat(text: str) -> tuple[list[Interaction], list[int]]:
    rows, bad = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.strip().split("::")
        try:
            if len(parts) != 4 or not parts[0] or not parts[1]:
                raise ValueError
            float(parts[2])
            rows.append(Interaction(parts[0], parts[1], int(parts[3]), len(rows)))
        except ValueError:
            bad.append(lineno)
    return rows, bad


def _parse_csv(text: str, path: Path) -> tuple[list[Interaction], list[int]]:
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None:
        return [], []
    cols = [h.strip().lower() for h in header]
    missing = {"user", "item", "timestamp"} - set(cols)
    if missing:
        raise DataError(f"{path}: csv header lacks column(s) {sorted(missing)}")
    iu, ii, it = cols.index("user"), cols.index("item"), cols.index("timestamp")
    rows, bad = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not f.strip() for f in rec):
            continue
        try:
            if len(rec) != len(cols):
                raise ValueError
            user, item = rec[iu].strip(), rec[ii].strip()
            if not user or not item:
                raise ValueError
            rows.append(Interaction(user, item, int(rec[it]), len(rows)))
        except ValueError:
            bad.append(lineno)
    return rows, bad


# ---------------------------------------------------------------------------
# filtering and id assignment
# ---------------------------------------------------------------------------

def kcore_filter(interactions: Sequence[Interaction], min_user: int, min_item: int) -> list[Interaction]:
    """Repeatedly drop users/items below their minimum count until nothing changes."""
    kept = list(interactions)
    while True:
        users = Counter(x.user for x in kept)
        items = Counter(x.item for x in kept)
        nxt = [x for x in kept if users[x.user] >= min_user and items[x.item] >= min_item]
        if len(nxt) == len(kept):
            return kept
        kept = nxt


def build_sequences(interactions: Sequence[Interaction], min_user: int = 5,
                    min_item: int = 5) -> SequenceSet:
    """Filter, order each user's history by (timestamp, file order) and assign dense ids.

    Users are numbered in lexicographic order of their original id; items get
    ids 1.. in order of first appearance when walking those users' histories.
    """
    if not interactions:
        raise DataError("no interactions to build sequences from")
    kept = kcore_filter(interactions, min_user, min_item)
    if not kept:
        raise DataError(f"all interactions removed by filtering (min_user={min_user}, min_item={min_item})")
    per_user: dict[str, list[Interaction]] = {}
    for x in kept:
        per_user.setdefault(x.user, []).append(x)
    users = sorted(per_user)
    item_ids: dict[str, int] = {}
    sequences = []
    for u in users:
        history = sorted(per_user[u], key=lambda x: (x.timestamp, x.order))
        seq = []
        for x in history:
            if x.item not in item_ids:
                item_ids[x.item] = len(item_ids) + 1
            seq.append(item_ids[x.item])
        sequences.append(seq)
    items = sorted(item_ids, key=item_ids.__getitem__)
    return SequenceSet(users, items, sequences)


def split_leave_one_out(seqs: SequenceSet) -> DatasetSplit:
    """Last item -> test, second to last -> validation, the rest -> training input."""
    users, train, valid, test = [], [], [], []
    excluded = 0
    for u, seq in zip(seqs.users, seqs.sequences):
        if len(seq) < 3:
            excluded += 1
            continue
        users.append(u)
        train.append(list(seq[:-2]))
        valid.append(seq[-2])
        test.append(seq[-1])
    if excluded:
        log.warning("leave-one-out: excluded %d user(s) with fewer than 3 interactions", excluded)
    return DatasetSplit(users, list(seqs.items), train, valid, test, excluded)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pad_left(seqs: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the most recent ``max_len`` ids of each sequence, left-padded with 0."""
    out = np.zeros((len(seqs), max_len), dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = list(s)[-max_len:]
        lengths[r] = len(s)
        if s:
            out[r, max_len - len(s):] = s
    return out, lengths


def training_examples(split: DatasetSplit) -> list[int]:
    """Users whose training part has at least one (input, next item) pair."""
    return [u for u, s in enumerate(split.train) if len(s) >= 2]


def make_train_batch(split: DatasetSplit, users: Sequence[int], max_len: int) -> Batch:
    inputs = [split.train[u][:-1] for u in users]
    nexts = [split.train[u][1:] for u in users]
    items, lengths = pad_left(inputs, max_len)
    pos_targets, _ = pad_left(nexts, max_len)
    targets = np.array([split.train[u][-1] for u in users], dtype=np.int64)
    return Batch(items, targets, lengths, np.asarray(users, dtype=np.int64), pos_targets)


def batch_iter(split: DatasetSplit, max_len: int, batch_size: int, seed: int,
               epoch: int) -> Iterator[Batch]:
    """Shuffled training batches; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    users = np.asarray(training_examples(split), dtype=np.int64)
    order = users[np.random.default_rng([seed, epoch]).permutation(len(users))]
    for start in range(0, len(order), batch_size):
        yield make_train_batch(split, order[start:start + batch_size].tolist(), max_len)


def eval_batches(split: DatasetSplit, phase: str, max_len: int,
                 batch_size: int = 256) -> Iterator[Batch]:
    """Batches in user order; ``valid`` predicts from train, ``test`` from train + valid."""
    if phase not in ("valid", "test"):
        raise ValueError(f"phase must be 'valid' or 'test', got {phase!r}")
    for start in range(0, split.n_users, batch_size):
        users = list(range(start, min(start + batch_size, split.n_users)))
        if phase == "valid":
            inputs = [split.train[u] for u in users]
            targets = [split.valid[u] for u in users]
        else:
            inputs = [split.train[u] + [split.valid[u]] for u in users]
            targets = [split.test[u] for u in users]
        items, lengths = pad_left(inputs, max_len)
        yield Batch(items, np.asarray(targets, dtype=np.int64), lengths,
                    np.asarray(users, dtype=np.int64))


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------

def save_dataset(path: str | Path, split: DatasetSplit, meta: dict | None = None) -> None:
    """Write the preprocessed dataset as one JSON document.

    Layout: ``format``, ``version``, ``split`` ("leave-one-out": last two ids
    of each sequence are the validation and test targets), ``users`` and
    ``items`` (original ids; item dense id = list index + 1), ``sequences``
    (full chronological dense-id lists), ``summary`` and free-form ``meta``.
    """
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "split": "leave-one-out",
        "users": split.users,
        "items": split.items,
        "sequences": [split.full_sequence(u) for u in range(split.n_users)],
        "summary": split.summary(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def load_dataset(path: str | Path) -> DatasetSplit:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a dataset file ({exc.msg})") from None
    if doc.get("format") != DATASET_FORMAT:
        raise DataError(f"{path}: not a {DATASET_FORMAT} file")
    if doc.get("version") != DATASET_VERSION:
        raise DataError(f"{path}: dataset version {doc.get('version')} != {DATASET_VERSION}")
    seqs = SequenceSet(list(doc["users"]), list(doc["items"]), [list(s) for s in doc["sequences"]])
    return split_leave_one_out(seqs)


def synthetic_memorization(n_users: int = 32, n_items: int = 50, min_len: int = 8,
                           max_len: int = 16, seed: int = 0) -> DatasetSplit:
    """Sequences that walk one fixed random cycle through the catalog.

    The next item is a function of the current one, so held-out targets are
    predictable from transitions seen in other users' training data.
    """
    rng = np.random.default_rng(seed)
    cycle = rng.permutation(n_items) + 1
    succ = np.empty(n_items + 1, dtype=np.int64)
    succ[cycle] = np.roll(cycle, -1)
    users, seqs = [], []
    for u in range(n_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(1, n_items + 1))
        seq = [cur]
        for _ in range(length - 1):
            cur = int(succ[cur])
            seq.append(cur)
        users.append(f"u{u:03d}")
        seqs.append(seq)
    items = [str(i) for i in range(1, n_items + 1)]
    return split_leave_one_out(SequenceSet(users, items, seqs))
