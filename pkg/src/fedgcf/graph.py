"""Bipartite user-item interaction graphs and their normalized adjacency.

Users and items live in separate dense index spaces. Edges are stored once,
deduplicated and sorted, with CSR views in both directions for fast neighbor
lookups during sampling and evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "IdMap",
    "InteractionGraph",
    "NormalizedAdjacency",
    "build_graph",
    "normalize",
    "subgraph",
    "merge",
]


class IdMap:
    """Bijection between raw external IDs and dense [0, n) indices."""

    def __init__(self, raw_ids):
        self._from_index = list(raw_ids)
        self._to_index = {raw: idx for idx, raw in enumerate(self._from_index)}
        if len(self._to_index) != len(self._from_index):
            raise ValueError("duplicate raw IDs in IdMap")

    @classmethod
    def identity(cls, n: int) -> "IdMap":
        return cls(range(n))

    def __len__(self) -> int:
        return len(self._from_index)

    def to_index(self, raw) -> int:
        try:
            return self._to_index[raw]
        except KeyError:
            raise KeyError(f"unknown raw ID {raw!r}") from None

    def to_raw(self, index: int):
        if not 0 <= index < len(self._from_index):
            raise IndexError(f"dense index {index} out of range [0, {len(self)})")
        return self._from_index[index]

    def __contains__(self, raw) -> bool:
        return raw in self._to_index

    @property
    def raw_ids(self) -> list:
        return list(self._from_index)


def _csr_arrays(src: np.ndarray, dst: np.ndarray, n_src: int):
    """Sort (src, dst) pairs by src then dst; return (indptr, sorted dst, sorted order)."""
    order = np.lexsort((dst, src))
    s = src[order]
    d = dst[order]
    indptr = np.zeros(n_src + 1, dtype=np.int64)
    np.add.at(indptr, s + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, d, order


@dataclass
class InteractionGraph:
    """Immutable dedup'd bipartite graph with CSR views both ways."""

    num_users: int
    num_items: int
    edges: np.ndarray  # (E, 2) int64, unique rows, sorted by (user, item)
    user_ptr: np.ndarray = field(repr=False, default=None)
    user_items: np.ndarray = field(repr=False, default=None)
    item_ptr: np.ndarray = field(repr=False, default=None)
    item_users: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.edges = np.ascontiguousarray(self.edges, dtype=np.int64)
        if self.edges.size == 0:
            self.edges = self.edges.reshape(0, 2)
        if self.edges.ndim != 2 or self.edges.shape[1] != 2:
            raise ValueError(f"edges must be (E, 2), got {self.edges.shape}")
        if self.num_users < 0 or self.num_items < 0:
            raise ValueError("negative node counts")
        if self.edges.shape[0]:
            if self.edges[:, 0].min() < 0 or self.edges[:, 0].max() >= self.num_users:
                raise ValueError("user index out of range")
            if self.edges[:, 1].min() < 0 or self.edges[:, 1].max() >= self.num_items:
                raise ValueError("item index out of range")
        if self.user_ptr is None:
            self.user_ptr, self.user_items, _ = _csr_arrays(
                self.edges[:, 0], self.edges[:, 1], self.num_users
            )
            self.item_ptr, self.item_users, _ = _csr_arrays(
                self.edges[:, 1], self.edges[:, 0], self.num_items
            )

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    @property
    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    def items_of(self, user: int) -> np.ndarray:
        """Sorted item neighbors of one user."""
        return self.user_items[self.user_ptr[user] : self.user_ptr[user + 1]]

    def users_of(self, item: int) -> np.ndarray:
        """Sorted user neighbors of one item."""
        return self.item_users[self.item_ptr[item] : self.item_ptr[item + 1]]

    def edge_keys(self) -> np.ndarray:
        """Sorted int64 keys user * num_items + item, for O(log E) membership."""
        return self.edges[:, 0] * np.int64(self.num_items) + self.edges[:, 1]

    def has_edges(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        keys = self.edge_keys()
        probe = np.asarray(users, dtype=np.int64) * np.int64(self.num_items) + np.asarray(
            items, dtype=np.int64
        )
        pos = np.searchsorted(keys, probe)
        pos = np.minimum(pos, len(keys) - 1) if len(keys) else pos
        if len(keys) == 0:
            return np.zeros(probe.shape, dtype=bool)
        return keys[pos] == probe


def build_graph(raw_edges, num_users: int | None = None, num_items: int | None = None,
                dedup: bool = True) -> tuple[InteractionGraph, IdMap, IdMap]:
    """Densify raw (user, item) pairs into an InteractionGraph.

    With `num_users`/`num_items` given, IDs are taken as already-dense indices
    and the ID maps are identities (this also covers the empty-edge case, where
    nothing could be inferred). Otherwise raw IDs are mapped to dense indices
    in order of first appearance.

    Returns (graph, user_id_map, item_id_map).
    """
    pairs = list(raw_edges)
    explicit = num_users is not None or num_items is not None
    if explicit and (num_users is None or num_items is None):
        raise ValueError("pass both num_users and num_items or neither")
    for lineno, pair in enumerate(pairs):
        if len(pair) != 2:
            raise ValueError(f"edge {lineno}: expected (user, item), got {pair!r}")

    if explicit:
        edges = np.array(pairs, dtype=np.int64).reshape(len(pairs), 2)
        user_map = IdMap.identity(num_users)
        item_map = IdMap.identity(num_items)
    else:
        users_seen: dict = {}
        items_seen: dict = {}
        u_idx = np.empty(len(pairs), dtype=np.int64)
        i_idx = np.empty(len(pairs), dtype=np.int64)
        for lineno, (ru, ri) in enumerate(pairs):
            for raw in (ru, ri):
                if not isinstance(raw, (int, np.integer, str)) or isinstance(raw, bool):
                    raise ValueError(
                        f"edge {lineno}: malformed ID {raw!r} ({type(raw).__name__})"
                    )
            u_idx[lineno] = users_seen.setdefault(ru, len(users_seen))
            i_idx[lineno] = items_seen.setdefault(ri, len(items_seen))
        edges = np.stack([u_idx, i_idx], axis=1) if pairs else np.zeros((0, 2), np.int64)
        num_users = len(users_seen)
        num_items = len(items_seen)
        user_map = IdMap(users_seen.keys())
        item_map = IdMap(items_seen.keys())

    if edges.shape[0]:
        unique = np.unique(edges, axis=0)
        if not dedup and unique.shape[0] != edges.shape[0]:
            raise ValueError(
                f"duplicate edges present ({edges.shape[0] - unique.shape[0]}) "
                "and dedup is disabled"
            )
        edges = unique
    graph = InteractionGraph(num_users=num_users, num_items=num_items, edges=edges)
    return graph, user_map, item_map


@dataclass
class NormalizedAdjacency:
    """Symmetric-degree-normalized bipartite adjacency, CSR in both directions.

    Edge (u, i) carries weight 1 / sqrt(deg(u) * deg(i)); weights lie in (0, 1].
    `ui` is users x items, `iu` its transpose, both scipy CSR for fast matmul.
    """

    ui: sp.csr_matrix
    iu: sp.csr_matrix

    @property
    def num_users(self) -> int:
        return self.ui.shape[0]

    @property
    def num_items(self) -> int:
        return self.ui.shape[1]


def normalize(graph: InteractionGraph) -> NormalizedAdjacency:
    """Build the symmetric-normalized adjacency for message passing."""
    du = graph.user_degrees
    di = graph.item_degrees
    u = graph.edges[:, 0]
    i = graph.edges[:, 1]
    w = 1.0 / np.sqrt(du[u].astype(np.float64) * di[i].astype(np.float64))
    ui = sp.csr_matrix((w, (u, i)), shape=(graph.num_users, graph.num_items))
    iu = sp.csr_matrix((w, (i, u)), shape=(graph.num_items, graph.num_users))
    return NormalizedAdjacency(ui=ui, iu=iu)


def subgraph(graph: InteractionGraph, users) -> tuple[InteractionGraph, IdMap]:
    """Restrict to a user subset, keeping the full shared item catalog.

    Users are renumbered to [0, len(users)) in ascending original order; item
    indices are untouched so item rows stay aligned across subgraphs.
    Returns (subgraph, user_id_map) where the map's raw IDs are the original
    user indices.
    """
    users = np.unique(np.asarray(users, dtype=np.int64))
    if users.size and (users[0] < 0 or users[-1] >= graph.num_users):
        raise ValueError(
            f"user index out of range [0, {graph.num_users}): {users[users < 0] if users[0] < 0 else users[-1]}"
        )
    lookup = np.full(graph.num_users, -1, dtype=np.int64)
    lookup[users] = np.arange(users.size)
    keep = lookup[graph.edges[:, 0]] >= 0
    edges = graph.edges[keep].copy()
    edges[:, 0] = lookup[edges[:, 0]]
    sub = InteractionGraph(num_users=int(users.size), num_items=graph.num_items, edges=edges)
    return sub, IdMap(users.tolist())


def merge(local: InteractionGraph, selected_edges: np.ndarray,
          num_extra_users: int | None = None) -> InteractionGraph:
    """Append foreign-user edges to a local graph over the same item catalog.

    `selected_edges` is (M, 2) with column 0 holding foreign user IDs (their own
    index space) and column 1 holding shared item indices. Foreign users occupy
    rows after the local users: with `num_extra_users` given, foreign user g maps
    to `local.num_users + g`; otherwise foreign IDs are densified in ascending
    order (row `local.num_users + rank(g)`).
    """
    selected_edges = np.asarray(selected_edges, dtype=np.int64).reshape(-1, 2)
    if selected_edges.shape[0] == 0:
        if num_extra_users:
            pad = InteractionGraph(
                num_users=local.num_users + num_extra_users,
                num_items=local.num_items,
                edges=local.edges.copy(),
            )
            return pad
        return InteractionGraph(
            num_users=local.num_users, num_items=local.num_items, edges=local.edges.copy()
        )
    if selected_edges[:, 1].min() < 0 or selected_edges[:, 1].max() >= local.num_items:
        raise ValueError("selected edge item index outside the shared catalog")
    if selected_edges[:, 0].min() < 0:
        raise ValueError("negative foreign user ID")

    foreign = selected_edges[:, 0]
    if num_extra_users is not None:
        if foreign.max() >= num_extra_users:
            raise ValueError(
                f"foreign user {foreign.max()} outside declared range [0, {num_extra_users})"
            )
        new_users = local.num_users + foreign
        total_users = local.num_users + num_extra_users
    else:
        uniq, inv = np.unique(foreign, return_inverse=True)
        new_users = local.num_users + inv
        total_users = local.num_users + uniq.size

    appended = np.stack([new_users, selected_edges[:, 1]], axis=1)
    edges = np.concatenate([local.edges, appended], axis=0)
    edges = np.unique(edges, axis=0)
    return InteractionGraph(num_users=int(total_users), num_items=local.num_items, edges=edges)


def merged_user_order(selected_edges: np.ndarray) -> np.ndarray:
    """Foreign user IDs in the row order `merge` assigns when densifying."""
    selected_edges = np.asarray(selected_edges, dtype=np.int64).reshape(-1, 2)
    return np.unique(selected_edges[:, 0])
