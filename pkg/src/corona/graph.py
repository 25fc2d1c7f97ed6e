"""Bipartite user-item interaction graph, hop buckets and subgraph induction."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import IngestionError, UnknownIdError, ValidationError


class Stage(str, Enum):
    PREFERENCE = "preference"
    INTENT = "intent"
    # ablation rules (full graph, fixed-hop neighbourhoods)
    FIXED = "fixed"


def _binary_csr(rows, cols, shape):
    data = np.ones(len(rows), dtype=np.float64)
    mat = sp.csr_matrix((data, (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64))),
                        shape=shape)
    mat.sum_duplicates()
    mat.data[:] = 1.0
    mat.sort_indices()
    return mat


class InteractionGraph:
    """Immutable bipartite graph over dense integer ids.

    External string ids are mapped to internal ids in first-seen order, which is
    also the row order of the user and item feature matrices.
    """

    def __init__(self, user_ids: Sequence[str], item_ids: Sequence[str],
                 edges: Iterable[tuple[int, int]], histories: Sequence[Sequence[tuple[int, int]]],
                 masked_edges: Iterable[tuple[int, int]] = ()):
        self.user_ids = tuple(user_ids)
        self.item_ids = tuple(item_ids)
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        self._item_index = {v: i for i, v in enumerate(self.item_ids)}
        edges = list(edges)
        rows = [u for u, _ in edges]
        cols = [v for _, v in edges]
        shape = (len(self.user_ids), len(self.item_ids))
        self.adjacency = _binary_csr(rows, cols, shape)
        self.adjacency_t = self.adjacency.T.tocsr()
        self.adjacency_t.sort_indices()
        self.histories = tuple(tuple((int(v), int(t)) for v, t in h) for h in histories)
        self.masked_edges = frozenset((int(u), int(v)) for u, v in masked_edges)
        self._hop_cache: dict[int, np.ndarray] = {}
        self._fingerprint = None

    # ---- ids -------------------------------------------------------------
    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def user_index(self, user_id: str) -> int:
        try:
            return self._user_index[str(user_id)]
        except KeyError:
            raise UnknownIdError(f"unknown user id {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._item_index[str(item_id)]
        except KeyError:
            raise UnknownIdError(f"unknown item id {item_id!r}") from None

    def _check_user(self, u: int) -> int:
        u = int(u)
        if not 0 <= u < self.n_users:
            raise UnknownIdError(f"unknown user {u}")
        return u

    def _check_item(self, v: int) -> int:
        v = int(v)
        if not 0 <= v < self.n_items:
            raise UnknownIdError(f"unknown item {v}")
        return v

    # ---- structure ---------------------------------------------------------
    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz)

    def neighbors(self, u: int) -> np.ndarray:
        """Items adjacent to user ``u`` (ascending)."""
        u = self._check_user(u)
        return self.adjacency.indices[self.adjacency.indptr[u]:self.adjacency.indptr[u + 1]]

    def item_neighbors(self, v: int) -> np.ndarray:
        """Users adjacent to item ``v`` (ascending)."""
        v = self._check_item(v)
        return self.adjacency_t.indices[self.adjacency_t.indptr[v]:self.adjacency_t.indptr[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        items = self.neighbors(u)
        pos = np.searchsorted(items, v)
        return bool(pos < items.size and items[pos] == v)

    def history(self, u: int, include_masked: bool = True) -> list[tuple[int, int]]:
        u = self._check_user(u)
        if include_masked:
            return list(self.histories[u])
        return [(v, t) for v, t in self.histories[u] if (u, v) not in self.masked_edges]

    def interaction_counts(self) -> np.ndarray:
        """Per-item count of adjacency edges plus masked edges."""
        counts = np.diff(self.adjacency_t.indptr).astype(np.int64)
        for _, v in self.masked_edges:
            counts[v] += 1
        return counts

    # ---- hop distances -----------------------------------------------------
    def hop_buckets(self, target: int) -> np.ndarray:
        """Bucket (1, 2 or 3) for every user relative to ``target``.

        The target's own entry is 3; distance-to-self has no bucket of its own.
        Cached per target; the graph never changes after construction.
        """
        t = self._check_user(target)
        cached = self._hop_cache.get(t)
        if cached is not None:
            return cached
        n = self.n_users
        buckets = np.full(n, 3, dtype=np.int8)
        one = np.zeros(n, dtype=bool)
        items = self.neighbors(t)
        if items.size:
            one[self.adjacency_t[items].indices] = True
        one[t] = False
        reached = one.copy()
        reached[t] = True
        frontier = np.flatnonzero(one)
        two = np.zeros(n, dtype=bool)
        if frontier.size:
            items2 = np.unique(self.adjacency[frontier].indices)
            two[self.adjacency_t[items2].indices] = True
            two &= ~reached
        buckets[one] = 1
        buckets[two] = 2
        buckets.setflags(write=False)
        self._hop_cache[t] = buckets
        return buckets

    def hop_distance(self, target: int) -> dict[int, int]:
        buckets = self.hop_buckets(target)
        t = int(target)
        return {u: int(b) for u, b in enumerate(buckets) if u != t}

    # ---- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        coo = self.adjacency.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return {
            "users": list(self.user_ids),
            "items": list(self.item_ids),
            "edges": [[int(coo.row[i]), int(coo.col[i])] for i in order],
            "histories": [[list(p) for p in h] for h in self.histories],
            "masked_edges": sorted([list(e) for e in self.masked_edges]),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionGraph":
        return cls(data["users"], data["items"], [tuple(e) for e in data["edges"]],
                   data["histories"], [tuple(e) for e in data["masked_edges"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path) -> "InteractionGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            blob = json.dumps(self.to_dict(), separators=(",", ":"), sort_keys=True)
            self._fingerprint = hashlib.sha256(blob.encode()).hexdigest()
        return self._fingerprint

    def __eq__(self, other):
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self):
        return (f"InteractionGraph(users={self.n_users}, items={self.n_items}, "
                f"edges={self.n_edges}, masked={len(self.masked_edges)})")


def build_graph(interactions: Iterable[tuple], mask: Iterable[tuple] = ()) -> InteractionGraph:
    """Build a graph from ``(user, item, timestamp)`` records.

    Duplicate pairs collapse to one edge and keep their latest timestamp.
    Pairs in ``mask`` stay in the histories but are left out of the adjacency.
    """
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    latest: dict[tuple[int, int], int] = {}
    for n, rec in enumerate(interactions, start=1):
        try:
            u_raw, v_raw, ts_raw = rec
            ts = int(ts_raw)
        except (TypeError, ValueError):
            raise IngestionError(f"malformed interaction record {rec!r}", line=n) from None
        u_ext, v_ext = str(u_raw), str(v_raw)
        if not u_ext or not v_ext:
            raise IngestionError(f"empty id in record {rec!r}", line=n)
        u = users.setdefault(u_ext, len(users))
        v = items.setdefault(v_ext, len(items))
        prev = latest.get((u, v))
        if prev is None or ts > prev:
            latest[(u, v)] = ts

    masked = set()
    for pair in mask:
        u_ext, v_ext = str(pair[0]), str(pair[1])
        key = (users.get(u_ext), items.get(v_ext))
        if key not in latest:
            raise ValidationError(f"mask pair ({u_ext}, {v_ext}) is not an interaction")
        masked.add(key)

    histories: list[list[tuple[int, int]]] = [[] for _ in users]
    for (u, v), ts in latest.items():
        histories[u].append((v, ts))
    for h in histories:
        h.sort(key=lambda p: (p[1], p[0]))
    edges = [e for e in latest if e not in masked]
    return InteractionGraph(list(users), list(items), edges, histories, masked)


@dataclass(frozen=True)
class Subgraph:
    """Users, their items and the parent adjacency restricted to both."""

    users: np.ndarray
    items: np.ndarray
    adjacency: sp.csr_matrix
    stage: Stage
    target: int | None = None
    fingerprint: str = field(default="", compare=False)

    @property
    def user_set(self) -> frozenset[int]:
        return frozenset(int(u) for u in self.users)

    @property
    def item_set(self) -> frozenset[int]:
        return frozenset(int(v) for v in self.items)

    @property
    def degenerate(self) -> bool:
        return self.items.size == 0

    def __len__(self):
        return self.users.size + self.items.size


def _subgraph(graph: InteractionGraph, users: np.ndarray, items: np.ndarray, stage, target):
    block = graph.adjacency[users][:, items].tocsr()
    block.sort_indices()
    digest = hashlib.sha1(users.tobytes() + b"|" + items.tobytes()).hexdigest()[:16]
    return Subgraph(users, items, block, Stage(stage), None if target is None else int(target), digest)


def induce_subgraph(graph: InteractionGraph, user_set: Iterable[int], stage=Stage.PREFERENCE,
                    target: int | None = None) -> Subgraph:
    """Subgraph over ``user_set`` plus every item adjacent to any of them."""
    users = np.unique(np.fromiter((int(u) for u in user_set), dtype=np.int64))
    if users.size == 0:
        raise ValidationError("cannot induce a subgraph from an empty user set")
    if users[0] < 0 or users[-1] >= graph.n_users:
        raise UnknownIdError("user set contains ids outside the graph")
    if target is not None and int(target) not in set(users.tolist()):
        raise ValidationError(f"target {target} missing from user set")
    items = np.unique(graph.adjacency[users].indices).astype(np.int64)
    return _subgraph(graph, users, items, stage, target)


def full_subgraph(graph: InteractionGraph, target: int | None = None) -> Subgraph:
    """Every user and every item, including items with no adjacency edge."""
    return _subgraph(graph, np.arange(graph.n_users, dtype=np.int64),
                     np.arange(graph.n_items, dtype=np.int64), Stage.FIXED, target)


# ---- text formats ----------------------------------------------------------

def read_interactions(path) -> list[tuple[str, str, int]]:
    """Parse ``user<TAB>item<TAB>unix_timestamp`` lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise IngestionError(f"expected 3 tab-separated fields, got {line!r}", path, n)
            try:
                ts = int(parts[2])
            except ValueError:
                raise IngestionError(f"bad timestamp {parts[2]!r}", path, n) from None
            out.append((parts[0], parts[1], ts))
    return out


def read_mask(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise IngestionError(f"expected 2 tab-separated fields, got {line!r}", path, n)
            out.append((parts[0], parts[1]))
    return out


def write_interactions(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v, t in records:
            fh.write(f"{u}\t{v}\t{int(t)}\n")


def write_mask(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, v in pairs:
            fh.write(f"{u}\t{v}\n")
