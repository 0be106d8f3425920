"""Top-K ranking metrics with train-interaction exclusion.

Scores are ranked descending; ties break toward the lower item index (stable
order), so results are reproducible across runs and platforms. Items a user
interacted with during training are excluded from their candidate list before
ranking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import InteractionGraph, normalize
from .model import GcfParams, LayerEmbeddings, propagate, score_all

__all__ = [
    "RankedList",
    "rank_items",
    "precision_at_k",
    "recall_at_k",
    "ndcg_at_k",
    "evaluate",
]


@dataclass
class RankedList:
    """Top-K recommendation slate for one user."""

    user: int
    items: np.ndarray   # (K,) item indices, best first
    scores: np.ndarray  # (K,) matching scores, non-increasing


def rank_items(scores: np.ndarray, k: int, exclude: np.ndarray | None = None) -> RankedList:
    """Top-k items by score with `exclude` removed; ties break on item index.

    `scores` is the full catalog row for one user.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be 1-D, got shape {scores.shape}")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    work = scores.copy()
    if exclude is not None and len(exclude):
        work[np.asarray(exclude, dtype=np.int64)] = -np.inf
    n_valid = int(np.isfinite(work).sum())
    k_eff = min(k, n_valid)
    # descending by score, ascending by index on ties; stable kind keeps index order
    order = np.argsort(-work, kind="stable")[:k_eff]
    return RankedList(user=-1, items=order, scores=work[order])


def precision_at_k(ranked: np.ndarray, relevant: np.ndarray, k: int) -> float:
    """Fraction of the top-k slate that is relevant (denominator is k)."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    hits = np.isin(ranked[:k], relevant).sum()
    return float(hits) / k


def recall_at_k(ranked: np.ndarray, relevant: np.ndarray, k: int) -> float:
    """Fraction of relevant items appearing in the top-k slate."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    relevant = np.asarray(relevant)
    if relevant.size == 0:
        raise ValueError("recall undefined for an empty relevant set")
    hits = np.isin(ranked[:k], relevant).sum()
    return float(hits) / relevant.size


def ndcg_at_k(ranked: np.ndarray, relevant: np.ndarray, k: int) -> float:
    """Binary-gain NDCG with log2(position + 1) discount, positions 1-based."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    relevant = np.asarray(relevant)
    if relevant.size == 0:
        raise ValueError("ndcg undefined for an empty relevant set")
    top = np.asarray(ranked[:k])
    gains = np.isin(top, relevant).astype(np.float64)
    discounts = 1.0 / np.log2(np.arange(2, top.size + 2, dtype=np.float64))
    dcg = float(gains @ discounts)
    ideal_hits = min(relevant.size, k)
    idcg = float(np.sum(1.0 / np.log2(np.arange(2, ideal_hits + 2, dtype=np.float64))))
    return dcg / idcg


def evaluate(params: GcfParams, train_graph: InteractionGraph, test_edges: np.ndarray,
             k: int, users: np.ndarray | None = None, layers: LayerEmbeddings | None = None,
             chunk: int = 512) -> dict:
    """Mean P@k / R@k / NDCG@k over users that have held-out edges.

    `test_edges` is (T, 2) in the same index space as `train_graph`. Each
    user's training items are excluded from their candidate ranking. Users
    without test edges are skipped; if none remain this raises, since the
    metrics would be undefined.
    """
    test_edges = np.asarray(test_edges, dtype=np.int64).reshape(-1, 2)
    if layers is None:
        layers = propagate(params, normalize(train_graph))
    if test_edges.shape[0] and test_edges[:, 1].max() >= train_graph.num_items:
        raise ValueError("test item index outside the catalog")

    by_user: dict[int, list[int]] = {}
    for u, i in test_edges:
        by_user.setdefault(int(u), []).append(int(i))
    if users is not None:
        wanted = set(int(u) for u in users)
        by_user = {u: its for u, its in by_user.items() if u in wanted}
    eval_users = np.array(sorted(by_user), dtype=np.int64)
    if eval_users.size == 0:
        raise ValueError("no users with held-out interactions to evaluate")
    if eval_users.max() >= train_graph.num_users:
        raise ValueError("test user index outside the training graph")

    p_sum = r_sum = n_sum = 0.0
    for start in range(0, eval_users.size, chunk):
        block = eval_users[start : start + chunk]
        smat = score_all(layers, block)
        for row, u in enumerate(block):
            ranked = rank_items(smat[row], k, exclude=train_graph.items_of(int(u)))
            rel = np.array(by_user[int(u)], dtype=np.int64)
            p_sum += precision_at_k(ranked.items, rel, k)
            r_sum += recall_at_k(ranked.items, rel, k)
            n_sum += ndcg_at_k(ranked.items, rel, k)
    n = eval_users.size
    return {
        "precision": p_sum / n,
        "recall": r_sum / n,
        "ndcg": n_sum / n,
        "n_users": int(n),
        "n_test_edges": int(test_edges.shape[0]),
    }
