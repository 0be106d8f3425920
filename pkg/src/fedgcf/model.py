"""Graph collaborative filtering model: embedding propagation, losses, training.

The model keeps one embedding table per node side plus per-layer transform
weights. Propagation follows the message rule

    e_u' = leaky_relu(W1 e_u + sum_i w(u,i) * (W1 e_i + W2 (e_i * e_u)) + b)

with w(u, i) = 1 / sqrt(deg(u) deg(i)), and symmetrically for items. Because
e_u factors out of the elementwise product, the neighbor sum collapses to two
sparse matmuls per side, which is what `propagate` computes. The final node
representation is the concatenation of all layer outputs (layer 0 included).

All gradients are derived by hand and certified against central finite
differences in the test suite; no autodiff framework is involved.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import InteractionGraph, NormalizedAdjacency, normalize
from .numerics import FloatArray, leaky_relu, leaky_relu_grad, log_sigmoid, sigmoid
from .optim import make_stepper
from .rng import Rng

__all__ = [
    "GcfParams",
    "LayerEmbeddings",
    "BprTriple",
    "init_params",
    "zeros_like_params",
    "propagate",
    "final_representation",
    "score",
    "score_all",
    "bpr_loss_and_grad",
    "structure_loss_and_grad",
    "sgd_step",
    "train_epoch",
    "sample_negatives",
    "params_to_vector",
    "params_from_vector",
]

LEAKY_SLOPE = 0.2


@dataclass
class GcfParams:
    """All trainable arrays of one model instance (float64)."""

    user_emb: FloatArray          # (P, d)
    item_emb: FloatArray          # (Q, d)
    w1: list[FloatArray]          # L arrays (d, d), self+neighbor transform
    w2: list[FloatArray]          # L arrays (d, d), interaction transform
    bias: list[FloatArray]        # L arrays (d,)

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.w1)

    def arrays(self) -> list[FloatArray]:
        """Fixed-order flat view used by optimizers and aggregation."""
        return [self.user_emb, self.item_emb, *self.w1, *self.w2, *self.bias]

    def copy(self) -> "GcfParams":
        return GcfParams(
            user_emb=self.user_emb.copy(),
            item_emb=self.item_emb.copy(),
            w1=[w.copy() for w in self.w1],
            w2=[w.copy() for w in self.w2],
            bias=[b.copy() for b in self.bias],
        )

    def weight_sq_norm(self) -> float:
        return float(sum(np.sum(np.square(a)) for a in self.arrays()))


@dataclass
class LayerEmbeddings:
    """Per-layer outputs of one propagation pass; index 0 is the raw tables."""

    users: list[FloatArray]   # L+1 arrays (P, d)
    items: list[FloatArray]   # L+1 arrays (Q, d)

    @property
    def num_layers(self) -> int:
        return len(self.users) - 1


@dataclass
class BprTriple:
    """One (user, positive item, negative item) ranking constraint."""

    user: int
    pos_item: int
    neg_item: int


def init_params(num_users: int, num_items: int, dim: int, num_layers: int,
                rng: Rng, emb_scale: float = 0.1) -> GcfParams:
    """Gaussian embedding tables, Xavier-uniform transforms, zero biases."""
    if min(num_users, num_items, dim, num_layers) <= 0:
        raise ValueError("num_users, num_items, dim and num_layers must be positive")
    limit = np.sqrt(6.0 / (2.0 * dim))
    return GcfParams(
        user_emb=rng.normal(0.0, emb_scale, size=(num_users, dim)),
        item_emb=rng.normal(0.0, emb_scale, size=(num_items, dim)),
        w1=[rng.uniform(-limit, limit, size=(dim, dim)) for _ in range(num_layers)],
        w2=[rng.uniform(-limit, limit, size=(dim, dim)) for _ in range(num_layers)],
        bias=[np.zeros(dim) for _ in range(num_layers)],
    )


def zeros_like_params(params: GcfParams) -> GcfParams:
    return GcfParams(
        user_emb=np.zeros_like(params.user_emb),
        item_emb=np.zeros_like(params.item_emb),
        w1=[np.zeros_like(w) for w in params.w1],
        w2=[np.zeros_like(w) for w in params.w2],
        bias=[np.zeros_like(b) for b in params.bias],
    )


def params_to_vector(params: GcfParams) -> FloatArray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def params_from_vector(vec: FloatArray, template: GcfParams) -> GcfParams:
    out = zeros_like_params(template)
    offset = 0
    for a in out.arrays():
        a.flat[:] = vec[offset : offset + a.size]
        offset += a.size
    if offset != vec.size:
        raise ValueError(f"vector length {vec.size} does not match template ({offset})")
    return out


# -- forward ---------------------------------------------------------------


class _ForwardCache:
    """Intermediates kept for the backward pass."""

    def __init__(self):
        self.msg_u: list[FloatArray] = []   # per layer, aggregated item->user messages
        self.msg_v: list[FloatArray] = []
        self.pre_u: list[FloatArray] = []   # per layer, pre-activation
        self.pre_v: list[FloatArray] = []


def _propagate(params: GcfParams, adj: NormalizedAdjacency,
               keep_cache: bool) -> tuple[LayerEmbeddings, _ForwardCache | None]:
    if adj.num_users != params.num_users or adj.num_items != params.num_items:
        raise ValueError(
            f"adjacency shape ({adj.num_users}, {adj.num_items}) does not match params "
            f"({params.num_users}, {params.num_items})"
        )
    cache = _ForwardCache() if keep_cache else None
    u = params.user_emb
    v = params.item_emb
    layers = LayerEmbeddings(users=[u], items=[v])
    for w1, w2, b in zip(params.w1, params.w2, params.bias):
        mu = adj.ui @ v          # (P, d) messages into users
        mv = adj.iu @ u          # (Q, d) messages into items
        zu = (u + mu) @ w1 + (u * mu) @ w2 + b
        zv = (v + mv) @ w1 + (v * mv) @ w2 + b
        if cache is not None:
            cache.msg_u.append(mu)
            cache.msg_v.append(mv)
            cache.pre_u.append(zu)
            cache.pre_v.append(zv)
        u = leaky_relu(zu, LEAKY_SLOPE)
        v = leaky_relu(zv, LEAKY_SLOPE)
        layers.users.append(u)
        layers.items.append(v)
    return layers, cache


def propagate(params: GcfParams, adj: NormalizedAdjacency) -> LayerEmbeddings:
    """Run all propagation layers; returns every layer's output embeddings."""
    layers, _ = _propagate(params, adj, keep_cache=False)
    return layers


def final_representation(layers: LayerEmbeddings) -> tuple[FloatArray, FloatArray]:
    """Concatenate layer outputs: (P, (L+1)d) users and (Q, (L+1)d) items."""
    return np.concatenate(layers.users, axis=1), np.concatenate(layers.items, axis=1)


def score(user_vec: FloatArray, item_vec: FloatArray) -> float:
    """Preference score of one user/item pair of final representations."""
    user_vec = np.asarray(user_vec, dtype=np.float64)
    item_vec = np.asarray(item_vec, dtype=np.float64)
    if user_vec.shape != item_vec.shape:
        raise ValueError(f"shape mismatch: {user_vec.shape} vs {item_vec.shape}")
    return float(user_vec @ item_vec)


def score_all(layers: LayerEmbeddings, users: np.ndarray) -> FloatArray:
    """Score matrix (len(users), Q) against the whole catalog."""
    users = np.asarray(users, dtype=np.int64)
    out = None
    for ul, vl in zip(layers.users, layers.items):
        part = ul[users] @ vl.T
        out = part if out is None else out + part
    return out


# -- backward --------------------------------------------------------------


def _backprop(params: GcfParams, adj: NormalizedAdjacency, layers: LayerEmbeddings,
              cache: _ForwardCache, d_users: list[FloatArray],
              d_items: list[FloatArray]) -> GcfParams:
    """Pull per-layer output gradients back to parameter gradients.

    `d_users[l]` / `d_items[l]` hold the loss gradient wrt layer l's output
    (zeros where a layer does not appear in the loss).
    """
    grads = zeros_like_params(params)
    num_layers = params.num_layers
    gu = d_users[num_layers].copy()
    gv = d_items[num_layers].copy()
    for layer in range(num_layers, 0, -1):
        u_prev = layers.users[layer - 1]
        v_prev = layers.items[layer - 1]
        mu = cache.msg_u[layer - 1]
        mv = cache.msg_v[layer - 1]
        dzu = gu * leaky_relu_grad(cache.pre_u[layer - 1], LEAKY_SLOPE)
        dzv = gv * leaky_relu_grad(cache.pre_v[layer - 1], LEAKY_SLOPE)

        grads.w1[layer - 1] += (u_prev + mu).T @ dzu + (v_prev + mv).T @ dzv
        grads.w2[layer - 1] += (u_prev * mu).T @ dzu + (v_prev * mv).T @ dzv
        grads.bias[layer - 1] += dzu.sum(axis=0) + dzv.sum(axis=0)

        w1t = params.w1[layer - 1].T
        w2t = params.w2[layer - 1].T
        t1u = dzu @ w1t
        t2u = dzu @ w2t
        t1v = dzv @ w1t
        t2v = dzv @ w2t
        d_msg_u = t1u + t2u * u_prev   # gradient wrt the aggregated messages
        d_msg_v = t1v + t2v * v_prev

        gu = t1u + t2u * mu + adj.ui @ d_msg_v + d_users[layer - 1]
        gv = t1v + t2v * mv + adj.iu @ d_msg_u + d_items[layer - 1]
    grads.user_emb += gu
    grads.item_emb += gv
    return grads


# -- ranking loss ----------------------------------------------------------


def _as_triple_arrays(triples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(triples, tuple) and len(triples) == 3:
        u, m, n = (np.asarray(t, dtype=np.int64) for t in triples)
    else:
        seq = list(triples)
        if not seq:
            raise ValueError("empty triple batch")
        u = np.array([t.user for t in seq], dtype=np.int64)
        m = np.array([t.pos_item for t in seq], dtype=np.int64)
        n = np.array([t.neg_item for t in seq], dtype=np.int64)
    if u.size == 0:
        raise ValueError("empty triple batch")
    return u, m, n


def _bpr_layer_grads(layers: LayerEmbeddings, u, m, n,
                     d_users: list[FloatArray], d_items: list[FloatArray],
                     weight: float) -> float:
    """Add pairwise ranking gradients into the per-layer buffers; return loss sum."""
    diffs = [vl[m] - vl[n] for vl in layers.items]
    s = np.zeros(u.shape[0])
    for ul, diff in zip(layers.users, diffs):
        s += np.einsum("bd,bd->b", ul[u], diff)
    loss = float(-log_sigmoid(s).sum())
    coef = weight * (sigmoid(s) - 1.0)
    for layer, (ul, diff) in enumerate(zip(layers.users, diffs)):
        cu = coef[:, None] * diff
        ci = coef[:, None] * ul[u]
        _segment_add(d_users[layer], u, cu)
        _segment_add(d_items[layer], m, ci)
        _segment_add(d_items[layer], n, -ci)
    return loss


def _segment_add(target: FloatArray, idx: np.ndarray, rows: FloatArray) -> None:
    """target[idx[k]] += rows[k] with duplicate indices accumulated."""
    order = np.argsort(idx, kind="stable")
    si = idx[order]
    sr = rows[order]
    starts = np.flatnonzero(np.r_[True, si[1:] != si[:-1]])
    sums = np.add.reduceat(sr, starts, axis=0)
    np.add.at(target, si[starts], sums)


def bpr_loss_and_grad(params: GcfParams, adj: NormalizedAdjacency, triples,
                      reg_lambda: float = 0.0) -> tuple[float, GcfParams]:
    """Pairwise ranking loss (mean over triples) plus L2, with full gradients.

    `triples` is either a sequence of BprTriple or a (users, pos, neg) tuple of
    index arrays. Loss = -mean log sigmoid(s_pos - s_neg) + reg_lambda * ||params||^2.
    """
    u, m, n = _as_triple_arrays(triples)
    if m.max(initial=-1) >= params.num_items or n.max(initial=-1) >= params.num_items:
        raise ValueError("item index out of range")
    if u.max(initial=-1) >= params.num_users:
        raise ValueError("user index out of range")
    layers, cache = _propagate(params, adj, keep_cache=True)
    d_users = [np.zeros_like(a) for a in layers.users]
    d_items = [np.zeros_like(a) for a in layers.items]
    batch = u.shape[0]
    loss = _bpr_layer_grads(layers, u, m, n, d_users, d_items, 1.0 / batch) / batch
    grads = _backprop(params, adj, layers, cache, d_users, d_items)
    if reg_lambda:
        loss += reg_lambda * params.weight_sq_norm()
        for g, p in zip(grads.arrays(), params.arrays()):
            g += 2.0 * reg_lambda * p
    return loss, grads


# -- self-supervised structure loss -----------------------------------------


def default_even_layers(num_layers: int) -> tuple[int, ...]:
    """Even layer indices >= 2 (layer 0 is the anchor, so it is excluded)."""
    return tuple(range(2, num_layers + 1, 2))


def _structure_rows(layers: LayerEmbeddings, batch_users: np.ndarray, tau: float,
                    even_layers) -> tuple[float, dict[int, FloatArray]]:
    b = batch_users.shape[0]
    anchors = layers.users[0][batch_users]
    loss = 0.0
    row_grads: dict[int, FloatArray] = {0: np.zeros_like(anchors)}
    for layer in even_layers:
        cand = layers.users[layer][batch_users]
        logits = (anchors @ cand.T) / tau
        shift = logits.max(axis=1, keepdims=True)
        ex = np.exp(logits - shift)
        den = ex.sum(axis=1, keepdims=True)
        # -log softmax diagonal, numerically stable
        loss += float(np.sum(np.log(den) + shift - np.diag(logits)[:, None]))
        dlogits = ex / den
        dlogits[np.arange(b), np.arange(b)] -= 1.0
        row_grads[0] += (dlogits @ cand) / tau
        row_grads[layer] = (dlogits.T @ anchors) / tau
    return loss, row_grads


def structure_loss_and_grad(layers: LayerEmbeddings, batch_users, tau: float,
                            even_layers=None) -> tuple[float, dict[int, FloatArray]]:
    """Contrastive alignment of layer-0 user rows with their even-layer rows.

    For each anchor user b the positive is the same user's layer-l output and
    the negatives are the other batch users' layer-l outputs (dot-product
    similarity at temperature tau). Returns the summed loss over anchors and,
    per participating layer, the gradient wrt that layer's batch rows.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    batch_users = np.asarray(batch_users, dtype=np.int64)
    if batch_users.ndim != 1 or batch_users.size == 0:
        raise ValueError("batch_users must be a non-empty 1-D index array")
    if np.unique(batch_users).size != batch_users.size:
        raise ValueError("batch_users must be unique")
    if even_layers is None:
        even_layers = default_even_layers(layers.num_layers)
    for layer in even_layers:
        if not 1 <= layer <= layers.num_layers:
            raise ValueError(f"structure-loss layer {layer} out of range")
    return _structure_rows(layers, batch_users, tau, even_layers)


# -- optimizer-facing ops ----------------------------------------------------


def sgd_step(params: GcfParams, grads: GcfParams, lr: float) -> GcfParams:
    """Pure params - lr * grads (returns a new container)."""
    out = params.copy()
    for p, g in zip(out.arrays(), grads.arrays()):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        p -= lr * g
    return out


def sample_negatives(graph: InteractionGraph, users: np.ndarray, rng: Rng,
                     max_tries: int = 100) -> np.ndarray:
    """Uniform negative item per user, rejecting observed interactions.

    Callers must exclude users whose neighborhood covers the whole catalog;
    those cannot have negatives and raise here after `max_tries` rounds.
    """
    users = np.asarray(users, dtype=np.int64)
    keys = graph.edge_keys()
    q = np.int64(graph.num_items)
    out = rng.integers(0, graph.num_items, size=users.shape[0])
    for _ in range(max_tries):
        probe = users * q + out
        pos = np.searchsorted(keys, probe)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        bad = keys[pos] == probe if len(keys) else np.zeros(users.shape[0], bool)
        if not bad.any():
            return out
        out[bad] = rng.integers(0, graph.num_items, size=int(bad.sum()))
    raise RuntimeError(
        "negative sampling did not converge; a user may interact with every item"
    )


def train_epoch(params: GcfParams, graph: InteractionGraph, losses, lr: float,
                reg_lambda: float, tau: float, batch_size: int, rng: Rng,
                adj: NormalizedAdjacency | None = None, stepper=None,
                optimizer: str = "adam", even_layers=None,
                struc_weight: float = 1.0) -> tuple[GcfParams, dict]:
    """One pass over all observed edges in shuffled minibatches.

    `losses` is a subset of {"bpr", "struc"}. Each minibatch draws one uniform
    negative per observed edge, computes the composite loss normalized by the
    batch size, and applies one optimizer step (fresh optimizer state unless a
    `stepper` from a previous epoch is passed in). Users who interact with the
    whole catalog are skipped and counted in the stats.

    Returns (params, stats); `params` is updated in place.
    """
    losses = tuple(losses)
    for name in losses:
        if name not in ("bpr", "struc"):
            raise ValueError(f"unknown loss {name!r}")
    if not losses:
        raise ValueError("losses must name at least one of 'bpr', 'struc'")
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    if graph.num_edges == 0:
        raise ValueError("cannot train on a graph with no edges")
    if adj is None:
        adj = normalize(graph)
    if stepper is None:
        stepper = make_stepper(optimizer, params.arrays())
    if even_layers is None:
        even_layers = default_even_layers(params.num_layers)

    full_users = graph.user_degrees >= graph.num_items  # no negatives exist
    order = rng.permutation(graph.num_edges)
    bpr_sum = 0.0
    struc_sum = 0.0
    n_triples = 0
    n_skipped = 0
    n_batches = 0
    arrays = params.arrays()

    for start in range(0, graph.num_edges, batch_size):
        idx = order[start : start + batch_size]
        u = graph.edges[idx, 0]
        m = graph.edges[idx, 1]
        ok = ~full_users[u]
        n_skipped += int((~ok).sum())
        u, m = u[ok], m[ok]
        if u.size == 0:
            continue
        n = sample_negatives(graph, u, rng)
        batch = u.shape[0]

        layers, cache = _propagate(params, adj, keep_cache=True)
        d_users = [np.zeros_like(a) for a in layers.users]
        d_items = [np.zeros_like(a) for a in layers.items]
        if "bpr" in losses:
            bpr_sum += _bpr_layer_grads(layers, u, m, n, d_users, d_items, 1.0 / batch)
            n_triples += batch
        if "struc" in losses and struc_weight:
            anchors = np.unique(u)
            s_loss, row_grads = _structure_rows(layers, anchors, tau, even_layers)
            struc_sum += s_loss
            w = struc_weight / batch
            for layer, rows in row_grads.items():
                _segment_add(d_users[layer], anchors, w * rows)
        grads = _backprop(params, adj, layers, cache, d_users, d_items)
        if reg_lambda:
            for g, p in zip(grads.arrays(), arrays):
                g += 2.0 * reg_lambda * p
        stepper(arrays, grads.arrays(), lr)
        n_batches += 1

    stats = {
        "mean_bpr": bpr_sum / n_triples if n_triples else float("nan"),
        "mean_struc": struc_sum / n_triples if n_triples else float("nan"),
        "n_triples": n_triples,
        "n_batches": n_batches,
        "n_skipped": n_skipped,
    }
    return params, stats
