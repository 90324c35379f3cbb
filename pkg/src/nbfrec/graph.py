"""Bipartite interaction graphs: ingestion, inverse arcs, masking and splits.

Node ids: users occupy ``[0, num_users)``, items occupy
``[num_users, num_users + num_items)``.  Arc ``k < E`` runs user -> item
(direction flag +1); arc ``E + k`` is its inverse item -> user (flag -1).
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

CACHE_MAGIC = b"NBFG"
CACHE_VERSION = 1


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class EdgeRecord:
    user: int
    item: int
    features: tuple[float, ...]


@dataclass(frozen=True)
class Schema:
    user_col: str
    item_col: str
    feature_cols: tuple[str, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse ``"user,item[,feat...]"``."""
        cols = [c.strip() for c in text.split(",") if c.strip()]
        if len(cols) < 2:
            raise DataError(f"schema needs at least user and item columns: {text!r}")
        return cls(cols[0], cols[1], tuple(cols[2:]))


@dataclass(frozen=True)
class ArcIndex:
    """Directed arcs after inverse augmentation, with an in-arc CSR index."""

    src: np.ndarray
    dst: np.ndarray
    edge_id: np.ndarray
    flag: np.ndarray
    indptr: np.ndarray  # (num_nodes + 1,)
    order: np.ndarray  # arc ids grouped by target node, storage order within a node

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    def in_arcs(self, v: int) -> np.ndarray:
        return self.order[self.indptr[v] : self.indptr[v + 1]]


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    num_users: int
    num_items: int
    users: np.ndarray  # (E,) int64 user index
    items: np.ndarray  # (E,) int64 item index (not offset)
    features: np.ndarray  # (E, d_raw) float64
    feature_names: tuple[str, ...] = ()
    user_labels: tuple[str, ...] = ()
    item_labels: tuple[str, ...] = ()
    duplicates_dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(len(users), -1)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "features", np.ascontiguousarray(feats))
        if not (len(users) == len(items) == feats.shape[0]):
            raise DataError("users, items and features disagree on edge count")
        if len(users):
            if users.min() < 0 or users.max() >= self.num_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= self.num_items:
                raise DataError("item index out of range")
            keys = users * self.num_items + items
            if len(np.unique(keys)) != len(keys):
                raise DataError("duplicate (user, item) pair in edge list")
        if self.feature_names and len(self.feature_names) != feats.shape[1]:
            raise DataError("feature_names length differs from d_raw")

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return len(self.users)

    @property
    def d_raw(self) -> int:
        return self.features.shape[1]

    def edge(self, e: int) -> EdgeRecord:
        return EdgeRecord(int(self.users[e]), int(self.items[e]), tuple(self.features[e].tolist()))

    @property
    def edges(self) -> list[EdgeRecord]:
        return [self.edge(e) for e in range(self.num_edges)]

    def item_node(self, item):
        return np.asarray(item) + self.num_users

    @cached_property
    def arcs(self) -> ArcIndex:
        return with_inverse_arcs(self)

    def arc_features(self) -> np.ndarray:
        """Raw features of every arc with the direction flag appended: (2E, d_raw + 1)."""
        a = self.arcs
        return np.concatenate([self.features[a.edge_id], a.flag[:, None].astype(np.float64)], axis=1)

    @cached_property
    def edge_keys(self) -> np.ndarray:
        return self.users * self.num_items + self.items

    def same_as(self, other: "InteractionGraph") -> bool:
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.features, other.features)
            and self.feature_names == other.feature_names
            and self.user_labels == other.user_labels
            and self.item_labels == other.item_labels
        )

    def __repr__(self):
        return (
            f"InteractionGraph(users={self.num_users}, items={self.num_items}, "
            f"edges={self.num_edges}, d_raw={self.d_raw})"
        )


def with_inverse_arcs(g: InteractionGraph) -> ArcIndex:
    E = g.num_edges
    item_nodes = g.items + g.num_users
    src = np.concatenate([g.users, item_nodes])
    dst = np.concatenate([item_nodes, g.users])
    edge_id = np.concatenate([np.arange(E), np.arange(E)]).astype(np.int64)
    flag = np.concatenate([np.ones(E, dtype=np.int8), -np.ones(E, dtype=np.int8)])
    order = np.argsort(dst, kind="stable").astype(np.int64)
    counts = np.bincount(dst, minlength=g.num_nodes)
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return ArcIndex(src, dst, edge_id, flag, indptr, order)


class GraphView:
    """Read-only view of a graph with some edges (both arcs) hidden.

    Construction only records the masked ids; active arc arrays are built on
    first use.
    """

    def __init__(self, graph: InteractionGraph, masked: np.ndarray | None = None):
        self.graph = graph
        self.masked = np.zeros(0, dtype=np.int64) if masked is None else masked

    def mask(self, edge_ids: Iterable[int]) -> "GraphView":
        extra = _check_edge_ids(self.graph, edge_ids)
        return GraphView(self.graph, np.union1d(self.masked, extra))

    @cached_property
    def active_arcs(self) -> np.ndarray:
        """Unmasked arc ids in CSR (target-grouped) order."""
        a = self.graph.arcs
        if len(self.masked) == 0:
            return a.order
        hidden = np.zeros(self.graph.num_edges, dtype=bool)
        hidden[self.masked] = True
        return a.order[~hidden[a.edge_id[a.order]]]

    def in_arcs(self, v: int) -> np.ndarray:
        arcs = self.graph.arcs.in_arcs(v)
        if len(self.masked) == 0:
            return arcs
        return arcs[~np.isin(self.graph.arcs.edge_id[arcs], self.masked)]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.graph.arcs.dst[self.active_arcs], minlength=self.graph.num_nodes)


def mask_edges(g: InteractionGraph | GraphView, edge_ids: Iterable[int]) -> GraphView:
    view = g if isinstance(g, GraphView) else GraphView(g)
    return view.mask(edge_ids)


def _check_edge_ids(g: InteractionGraph, edge_ids: Iterable[int]) -> np.ndarray:
    if not isinstance(edge_ids, np.ndarray):
        edge_ids = list(edge_ids)
    ids = np.unique(np.asarray(edge_ids, dtype=np.int64))
    if len(ids) and (ids[0] < 0 or ids[-1] >= g.num_edges):
        bad = ids[(ids < 0) | (ids >= g.num_edges)]
        raise KeyError(f"unknown edge id(s): {bad[:5].tolist()}")
    return ids


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.valid, self.test)]
        for name, p in zip(("train", "valid", "test"), parts):
            object.__setattr__(self, name, p)
        allids = np.concatenate(parts)
        if len(np.unique(allids)) != len(allids):
            raise ValueError("split parts overlap")

    def covers(self, num_edges: int) -> bool:
        allids = np.concatenate([self.train, self.valid, self.test])
        return len(allids) == num_edges and np.array_equal(np.sort(allids), np.arange(num_edges))


def split_edges(g: InteractionGraph, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    E = g.num_edges
    n_train = int(round(ratios[0] * E))
    n_valid = int(round(ratios[1] * E))
    n_train = min(n_train, E)
    n_valid = min(n_valid, E - n_train)
    sizes = (n_train, n_valid, E - n_train - n_valid)
    if E >= 3:
        for name, r, s in zip(("train", "valid", "test"), ratios, sizes):
            if r > 0 and s == 0:
                raise ValueError(f"{name} split is empty for ratio {r} and {E} edges")
    perm = np.random.default_rng(seed).permutation(E)
    return DatasetSplit(
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_valid]),
        np.sort(perm[n_train + n_valid :]),
    )


# -- text ingestion ---------------------------------------------------------


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def ingest_interactions(source: IO[str] | str, schema: Schema) -> InteractionGraph:
    """Read a delimited interaction log with a header row.

    User and item ids are re-indexed densely in order of first appearance.
    Repeated (user, item) rows keep the first occurrence; the number dropped
    is reported in ``duplicates_dropped``.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    header_line = source.readline()
    if not header_line.strip():
        raise DataError("empty input")
    delim = _sniff_delimiter(header_line)
    header = next(csv.reader([header_line], delimiter=delim))
    header = [h.strip() for h in header]
    try:
        ucol = header.index(schema.user_col)
        icol = header.index(schema.item_col)
        fcols = [header.index(c) for c in schema.feature_cols]
    except ValueError as exc:
        raise DataError(f"column missing from header {header}: {exc}") from None

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    users, items, feats = [], [], []
    duplicates = 0
    width = len(header)
    for lineno, row in enumerate(csv.reader(source, delimiter=delim), start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DataError(f"line {lineno}: expected {width} fields, got {len(row)}")
        try:
            values = [float(row[c]) for c in fcols]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric feature value") from None
        u = user_index.setdefault(row[ucol].strip(), len(user_index))
        i = item_index.setdefault(row[icol].strip(), len(item_index))
        if (u, i) in seen:
            duplicates += 1
            continue
        seen.add((u, i))
        users.append(u)
        items.append(i)
        feats.append(values)
    if not users:
        raise DataError("no interaction rows")
    return InteractionGraph(
        num_users=len(user_index),
        num_items=len(item_index),
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        features=np.array(feats, dtype=np.float64).reshape(len(users), len(fcols)),
        feature_names=tuple(schema.feature_cols),
        user_labels=tuple(user_index),
        item_labels=tuple(item_index),
        duplicates_dropped=duplicates,
    )


def write_interactions(g: InteractionGraph, out: IO[str], user_col="user", item_col="item") -> Schema:
    """Write ``g`` as comma-delimited text that ``ingest_interactions`` reads back."""
    names = g.feature_names or tuple(f"f{j}" for j in range(g.d_raw))
    ulab = g.user_labels or tuple(str(u) for u in range(g.num_users))
    ilab = g.item_labels or tuple(str(i) for i in range(g.num_items))
    w = csv.writer(out, lineterminator="\n")
    w.writerow([user_col, item_col, *names])
    for e in range(g.num_edges):
        w.writerow([ulab[g.users[e]], ilab[g.items[e]], *(repr(float(x)) for x in g.features[e])])
    return Schema(user_col, item_col, tuple(names))


# -- binary cache -----------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_graph(g: InteractionGraph, path) -> None:
    parts = [
        CACHE_MAGIC,
        struct.pack("<IQQQQ", CACHE_VERSION, g.num_users, g.num_items, g.num_edges, g.d_raw),
        g.users.astype("<i8").tobytes(),
        g.items.astype("<i8").tobytes(),
        g.features.astype("<f8").tobytes(),
        struct.pack("<Q", g.duplicates_dropped),
    ]
    for labels in (g.feature_names, g.user_labels, g.item_labels):
        parts.append(struct.pack("<Q", len(labels)))
        parts.extend(_pack_str(s) for s in labels)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"truncated {self.what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def load_graph(path) -> InteractionGraph:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), "graph cache")
    if r.take(4) != CACHE_MAGIC:
        raise DataError(f"{path}: not a graph cache (bad magic)")
    version, nu, ni, ne, d = r.unpack("<IQQQQ")
    if version != CACHE_VERSION:
        raise DataError(f"{path}: graph cache version {version}, expected {CACHE_VERSION}")
    users = np.frombuffer(r.take(8 * ne), dtype="<i8").astype(np.int64)
    items = np.frombuffer(r.take(8 * ne), dtype="<i8").astype(np.int64)
    feats = np.frombuffer(r.take(8 * ne * d), dtype="<f8").astype(np.float64).reshape(ne, d)
    (dups,) = r.unpack("<Q")
    labels = []
    for _ in range(3):
        (n,) = r.unpack("<Q")
        labels.append(tuple(r.string() for _ in range(n)))
    return InteractionGraph(nu, ni, users, items, feats, *labels, duplicates_dropped=dups)


def is_graph_cache(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(4) == CACHE_MAGIC
    except OSError:
        return False


def graph_stats(g: InteractionGraph) -> dict:
    return {
        "users": g.num_users,
        "items": g.num_items,
        "interactions": g.num_edges,
        "d_raw": g.d_raw,
        "duplicates_dropped": g.duplicates_dropped,
    }


def iter_user_items(g: InteractionGraph, edge_ids: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
    """Group ``edge_ids`` by user: yields (user, item indices) in user order."""
    users = g.users[edge_ids]
    order = np.argsort(users, kind="stable")
    users, ids = users[order], edge_ids[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    for chunk in np.split(np.arange(len(ids)), bounds):
        if len(chunk):
            yield int(users[chunk[0]]), g.items[ids[chunk]]
