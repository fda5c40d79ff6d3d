"""Interaction ingestion, ID mapping, splitting and adjacency normalization."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _blob
from .errors import EmptyDatasetError, ParseError, RangeError, SchemaError
from .linalg import SparseMatrix

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = {"train": TRAIN, "valid": VALID, "test": TEST}

_TRIPLET = np.dtype([("u", "<u4"), ("v", "<u4"), ("split", "u1")])


@dataclass(frozen=True)
class RawInteraction:
    user_key: str
    item_key: str
    rating: float
    timestamp: Optional[int] = None

    def __post_init__(self):
        if not self.user_key or not self.item_key:
            raise ValueError("user_key and item_key must be non-empty")
        if not math.isfinite(self.rating):
            raise ValueError(f"rating must be finite, got {self.rating!r}")


def parse_ml100k(path) -> list[RawInteraction]:
    """Read a MovieLens-100k ``u.data`` file (user, item, rating, timestamp; tab-separated)."""
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", path, lineno)
            user, item, rating, ts = parts
            try:
                out.append(RawInteraction(user, item, float(rating), int(ts)))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
    if not out:
        raise EmptyDatasetError(f"{path}: no interactions")
    return out


def parse_csv(
    path,
    columns: Sequence[str] = ("user_id", "item_id", "rating"),
    delimiter: str = ",",
) -> list[RawInteraction]:
    """Read a delimited file with a header row.

    ``columns`` names the user, item and rating columns, optionally followed by
    a timestamp column. A missing rating column name (``None``) means every
    row counts as rating 1.
    """
    path = Path(path)
    cols = list(columns)
    if len(cols) < 2:
        raise SchemaError("columns must name at least the user and item columns")
    while len(cols) < 4:
        cols.append(None)
    user_col, item_col, rating_col, ts_col = cols[:4]
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in (user_col, item_col, rating_col, ts_col) if c is not None and c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}; header is {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rating = float(row[rating_col]) if rating_col else 1.0
            except (TypeError, ValueError) as exc:
                raise ParseError(f"non-numeric rating {row[rating_col]!r}", path, lineno) from exc
            ts = None
            if ts_col:
                try:
                    ts = int(float(row[ts_col]))
                except (TypeError, ValueError) as exc:
                    raise ParseError(f"bad timestamp {row[ts_col]!r}", path, lineno) from exc
            try:
                out.append(RawInteraction(row[user_col] or "", row[item_col] or "", rating, ts))
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
    if not out:
        raise EmptyDatasetError(f"{path}: no interactions")
    return out


def subsample_users(interactions: Sequence[RawInteraction], n_users: int, seed: int = 0) -> list[RawInteraction]:
    """Keep the interactions of ``n_users`` users drawn uniformly without replacement."""
    users = list(dict.fromkeys(x.user_key for x in interactions))
    if n_users < 0 or n_users > len(users):
        raise RangeError(f"cannot sample {n_users} users out of {len(users)}")
    rng = np.random.default_rng(seed)
    picked = {users[i] for i in rng.choice(len(users), size=n_users, replace=False)}
    return [x for x in interactions if x.user_key in picked]


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Implicit-feedback matrix with dense IDs and a per-entry split tag.

    ``users``/``items``/``split`` are parallel arrays; ``user_keys[i]`` is the
    raw key of dense user ``i`` (likewise items).
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    split: np.ndarray
    user_keys: tuple
    item_keys: tuple
    seed: int = 0
    meta: Optional[dict] = None

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_users, self.num_items)

    def pairs(self, split="train") -> tuple[np.ndarray, np.ndarray]:
        tag = SPLIT_NAMES[split] if isinstance(split, str) else split
        sel = self.split == tag
        return self.users[sel], self.items[sel]

    def csr(self, split="train") -> SparseMatrix:
        u, v = self.pairs(split)
        return SparseMatrix.from_coo(self.num_users, self.num_items, u, v, np.ones(len(u)))

    def user_items(self, split="train") -> list[np.ndarray]:
        """Sorted item indices per user for one split."""
        m = self.csr(split)
        return [m.indices[m.indptr[i] : m.indptr[i + 1]] for i in range(self.num_users)]

    def split_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self._triplets().tobytes())
        return h.hexdigest()[:16]

    def _triplets(self) -> np.ndarray:
        rec = np.empty(len(self.users), dtype=_TRIPLET)
        rec["u"] = self.users
        rec["v"] = self.items
        rec["split"] = self.split
        return rec

    def header(self) -> dict:
        return {
            "format": "interaction-matrix/1",
            "num_users": self.num_users,
            "num_items": self.num_items,
            "count": int(len(self.users)),
            "seed": self.seed,
            "user_map": list(self.user_keys),
            "item_map": list(self.item_keys),
            "meta": self.meta or {},
        }

    def to_bytes(self) -> bytes:
        return _blob.dumps(self.header(), self._triplets().tobytes())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "InteractionMatrix":
        try:
            header, payload = _blob.loads(buf)
            if header.get("format") != "interaction-matrix/1":
                raise ValueError(f"unexpected format {header.get('format')!r}")
            rec = np.frombuffer(payload, dtype=_TRIPLET)
            if len(rec) != header["count"]:
                raise ValueError(f"payload holds {len(rec)} entries, header says {header['count']}")
            m, n = header["num_users"], header["num_items"]
            users = rec["u"].astype(np.int64)
            items = rec["v"].astype(np.int64)
            split = rec["split"].astype(np.int8)
            if len(users) and (users.max() >= m or items.max() >= n or split.max() > TEST):
                raise ValueError("entry out of range")
        except (ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"corrupt interaction matrix: {exc}") from exc
        return cls(
            m, n, users, items, split,
            tuple(header["user_map"]), tuple(header["item_map"]),
            header["seed"], header.get("meta") or None,
        )

    @classmethod
    def load(cls, path) -> "InteractionMatrix":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except ParseError as exc:
            raise ParseError(str(exc), path) from exc


def _allocate(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``n`` items; ties go to the earlier split."""
    raw = [n * r for r in ratios]
    counts = [math.floor(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    if n and counts[0] == 0:
        donor = max(range(1, len(counts)), key=lambda i: counts[i])
        counts[donor] -= 1
        counts[0] += 1
    return counts


def build_matrix(
    interactions: Iterable[RawInteraction],
    rating_threshold: float = 0.0,
    split_ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionMatrix:
    """Binarize, ID-map and split interactions.

    Each user's interactions are shuffled with a seeded generator and cut by
    largest-remainder rounding of ``split_ratios``. Repeated (user, item)
    pairs keep their first occurrence. Users and items without any train
    entry are dropped, together with their valid/test entries.
    """
    ratios = tuple(float(r) for r in split_ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise RangeError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    interactions = list(interactions)
    if not interactions:
        raise EmptyDatasetError("no interactions")
    kept = [x for x in interactions if x.rating >= rating_threshold]
    if not kept:
        raise EmptyDatasetError(f"no interaction has rating >= {rating_threshold}")

    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    seen = set()
    per_user: dict[int, list[int]] = {}
    for x in kept:
        u = user_ids.setdefault(x.user_key, len(user_ids))
        v = item_ids.setdefault(x.item_key, len(item_ids))
        if (u, v) in seen:
            continue
        seen.add((u, v))
        per_user.setdefault(u, []).append(v)

    rng = np.random.default_rng(seed)
    us, vs, tags = [], [], []
    for u in range(len(user_ids)):
        items = np.asarray(per_user[u], dtype=np.int64)
        order = rng.permutation(len(items))
        n_tr, n_va, _ = _allocate(len(items), ratios)
        tag = np.full(len(items), TEST, dtype=np.int8)
        tag[order[:n_tr]] = TRAIN
        tag[order[n_tr : n_tr + n_va]] = VALID
        us.append(np.full(len(items), u, dtype=np.int64))
        vs.append(items)
        tags.append(tag)
    users = np.concatenate(us)
    items = np.concatenate(vs)
    split = np.concatenate(tags)

    # drop nodes that never occur in train, then re-index densely in first-seen order
    train_users = np.zeros(len(user_ids), dtype=bool)
    train_items = np.zeros(len(item_ids), dtype=bool)
    train_users[users[split == TRAIN]] = True
    train_items[items[split == TRAIN]] = True
    keep = train_users[users] & train_items[items]
    users, items, split = users[keep], items[keep], split[keep]
    user_remap = np.cumsum(train_users) - 1
    item_remap = np.cumsum(train_items) - 1
    user_keys = tuple(k for k, i in user_ids.items() if train_users[i])
    item_keys = tuple(k for k, i in item_ids.items() if train_items[i])

    meta = {
        "raw_interactions": len(interactions),
        "raw_users": len({x.user_key for x in interactions}),
        "raw_items": len({x.item_key for x in interactions}),
        "rating_threshold": rating_threshold,
        "split_ratios": list(ratios),
    }
    return InteractionMatrix(
        num_users=len(user_keys),
        num_items=len(item_keys),
        users=user_remap[users],
        items=item_remap[items],
        split=split,
        user_keys=user_keys,
        item_keys=item_keys,
        seed=seed,
        meta=meta,
    )


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    matrix: SparseMatrix
    user_degrees: np.ndarray
    item_degrees: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.matrix.indptr, self.matrix.indices, self.matrix.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def normalize(matrix) -> NormalizedAdjacency:
    """Symmetric degree normalization of the train interactions: ``1/sqrt(d_u d_v)`` per entry.

    Accepts an ``InteractionMatrix`` (train split is used) or a binary
    ``SparseMatrix``.
    """
    a = matrix.csr("train") if isinstance(matrix, InteractionMatrix) else matrix
    rows = a.row_coords()
    cols = a.indices
    du = np.bincount(rows, minlength=a.rows).astype(np.float64)
    dv = np.bincount(cols, minlength=a.cols).astype(np.float64)
    if np.any(du[rows] == 0) or np.any(dv[cols] == 0):
        raise AssertionError("zero-degree node attached to an edge")
    values = 1.0 / np.sqrt(du[rows] * dv[cols])
    norm = SparseMatrix(a.rows, a.cols, a.indptr, a.indices, values)
    return NormalizedAdjacency(norm, du, dv)
