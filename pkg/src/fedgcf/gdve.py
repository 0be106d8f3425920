"""Per-client graph data value estimator.

Each client owns one estimator bundle: a graph encoder pre-trained on the
shared global interactions, a valid predictor pre-trained on the client's own
interactions (both frozen afterwards), a trainable probability estimator that
maps (encoder user embedding, encoder item embedding, validity score) per
candidate global edge to a Bernoulli selection probability, and a task
predictor whose held-out performance provides a reinforcement signal.

The training loop alternates: sample a user batch from the global pool, score
and sample a selection mask over those users' observed global edges, train the
task predictor for one epoch on the client graph merged with the selection,
measure recall on the client's validation split against an exponential moving
baseline, and take one reward-weighted log-likelihood ascent step on the
probability estimator. Candidate edges are restricted to observed global
interactions: augmentation can only replay real interactions, never invent
pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate
from .graph import InteractionGraph, merge, normalize
from .model import (
    GcfParams,
    default_even_layers,
    init_params,
    propagate,
    train_epoch,
)
from .numerics import FloatArray, relu, relu_grad, sigmoid
from .optim import make_stepper, sgd_step_arrays
from .rng import Rng

__all__ = [
    "PROB_CLAMP_EPS",
    "ProbEstimatorParams",
    "GdveState",
    "SelectionBatch",
    "init_prob_estimator",
    "zeros_prob_estimator",
    "prob_forward",
    "pretrain_encoder",
    "pretrain_valid_predictor",
    "validity_scores",
    "selection_probabilities",
    "candidate_edges",
    "sample_mask",
    "train_task_predictor",
    "reward",
    "policy_gradient_update",
    "policy_gradient_update_multi",
    "surrogate_loglik_and_grad",
    "run_gdve_training",
    "select_augmentation",
    "make_gdve_state",
    "save_gdve_state",
    "load_gdve_state",
]

PROB_CLAMP_EPS = 1e-6

HIDDEN_1 = 50   # stage-1 width, three layers
HIDDEN_2 = 30   # stage-2 hidden width


@dataclass
class ProbEstimatorParams:
    """Two-stage selection MLP.

    Stage 1: (2d) -> 50 -> 50 -> 50, rectifier units.
    Stage 2: (50 + 1 validity column) -> 30 -> 1 logit, logistic squash,
    output clamped to [eps, 1 - eps] so log-likelihoods stay finite.
    """

    weights: list[FloatArray]
    biases: list[FloatArray]

    @property
    def dim(self) -> int:
        return self.weights[0].shape[0] // 2

    def arrays(self) -> list[FloatArray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "ProbEstimatorParams":
        return ProbEstimatorParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def _layer_shapes(dim: int) -> list[tuple[int, int]]:
    return [
        (2 * dim, HIDDEN_1),
        (HIDDEN_1, HIDDEN_1),
        (HIDDEN_1, HIDDEN_1),
        (HIDDEN_1 + 1, HIDDEN_2),
        (HIDDEN_2, 1),
    ]


def init_prob_estimator(dim: int, rng: Rng) -> ProbEstimatorParams:
    """Scaled-normal hidden layers; the final layer starts at zero so every
    edge opens at probability 0.5 (an unbiased initial policy)."""
    weights = []
    biases = []
    shapes = _layer_shapes(dim)
    for idx, (n_in, n_out) in enumerate(shapes):
        if idx == len(shapes) - 1:
            weights.append(np.zeros((n_in, n_out)))
        else:
            weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return ProbEstimatorParams(weights=weights, biases=biases)


def zeros_prob_estimator(dim: int) -> ProbEstimatorParams:
    return ProbEstimatorParams(
        weights=[np.zeros(s) for s in _layer_shapes(dim)],
        biases=[np.zeros(s[1]) for s in _layer_shapes(dim)],
    )


def prob_forward(params: ProbEstimatorParams, feats: FloatArray,
                 validity: FloatArray) -> tuple[FloatArray, dict]:
    """Selection probabilities per candidate edge plus backward cache.

    `feats` is (n, 2d): encoder user embedding next to encoder item embedding.
    `validity` is (n,): the valid predictor's score for the same edge.
    """
    feats = np.asarray(feats, dtype=np.float64)
    validity = np.asarray(validity, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != 2 * params.dim:
        raise ValueError(f"features must be (n, {2 * params.dim}), got {feats.shape}")
    if validity.shape != (feats.shape[0],):
        raise ValueError("validity column does not match the feature rows")
    w, b = params.weights, params.biases
    a1 = feats @ w[0] + b[0]
    h1 = relu(a1)
    a2 = h1 @ w[1] + b[1]
    h2 = relu(a2)
    a3 = h2 @ w[2] + b[2]
    h3 = relu(a3)
    g = np.concatenate([h3, validity[:, None]], axis=1)
    a4 = g @ w[3] + b[3]
    h4 = relu(a4)
    z = (h4 @ w[4] + b[4])[:, 0]
    p_raw = sigmoid(z)
    probs = np.clip(p_raw, PROB_CLAMP_EPS, 1.0 - PROB_CLAMP_EPS)
    cache = {"x": feats, "a1": a1, "h1": h1, "a2": a2, "h2": h2, "a3": a3,
             "g": g, "a4": a4, "h4": h4, "p_raw": p_raw}
    return probs, cache


def _prob_backward(params: ProbEstimatorParams, cache: dict,
                   dz: FloatArray) -> ProbEstimatorParams:
    """Parameter gradients given d(objective)/d(logit) per edge."""
    w = params.weights
    dz2 = dz[:, None]
    grads_w = [None] * 5
    grads_b = [None] * 5
    grads_w[4] = cache["h4"].T @ dz2
    grads_b[4] = dz2.sum(axis=0)
    dh4 = dz2 @ w[4].T
    da4 = dh4 * relu_grad(cache["a4"])
    grads_w[3] = cache["g"].T @ da4
    grads_b[3] = da4.sum(axis=0)
    dg = da4 @ w[3].T
    dh3 = dg[:, :HIDDEN_1]            # the validity column is an input, not a param
    da3 = dh3 * relu_grad(cache["a3"])
    grads_w[2] = cache["h2"].T @ da3
    grads_b[2] = da3.sum(axis=0)
    da2 = (da3 @ w[2].T) * relu_grad(cache["a2"])
    grads_w[1] = cache["h1"].T @ da2
    grads_b[1] = da2.sum(axis=0)
    da1 = (da2 @ w[1].T) * relu_grad(cache["a1"])
    grads_w[0] = cache["x"].T @ da1
    grads_b[0] = da1.sum(axis=0)
    return ProbEstimatorParams(weights=grads_w, biases=grads_b)


# -- pretraining ---------------------------------------------------------------


def _pretrain(graph: InteractionGraph, epochs: int, lr: float, reg_lambda: float,
              rng: Rng, dim: int, num_layers: int, batch_size: int,
              optimizer: str) -> GcfParams:
    if graph.num_edges == 0:
        raise ValueError("cannot pretrain on an empty graph")
    params = init_params(graph.num_users, graph.num_items, dim, num_layers,
                         rng.child("init"))
    adj = normalize(graph)
    stepper = make_stepper(optimizer, params.arrays())
    for ep in range(epochs):
        params, _ = train_epoch(params, graph, ("bpr",), lr, reg_lambda, tau=0.1,
                                batch_size=batch_size, rng=rng.child(f"epoch/{ep}"),
                                adj=adj, stepper=stepper)
    return params


def pretrain_encoder(d_global: InteractionGraph, epochs: int, lr: float,
                     reg_lambda: float, rng: Rng, dim: int = 64,
                     num_layers: int = 3, batch_size: int = 1024,
                     optimizer: str = "adam") -> GcfParams:
    """Ranking-loss training of the shared-structure encoder; freeze the result."""
    return _pretrain(d_global, epochs, lr, reg_lambda, rng, dim, num_layers,
                     batch_size, optimizer)


def pretrain_valid_predictor(d_local: InteractionGraph, epochs: int, lr: float,
                             reg_lambda: float, rng: Rng, dim: int = 64,
                             num_layers: int = 3, batch_size: int = 1024,
                             optimizer: str = "adam") -> GcfParams:
    """Ranking-loss training of the local-preference model; freeze the result."""
    return _pretrain(d_local, epochs, lr, reg_lambda, rng, dim, num_layers,
                     batch_size, optimizer)


# -- scoring -------------------------------------------------------------------


def validity_scores(valid_params: GcfParams, batch_users: np.ndarray,
                    global_graph: InteractionGraph, local_graph: InteractionGraph,
                    items: np.ndarray | None = None) -> FloatArray:
    """Local-relevance score of every (batch user, item) pair.

    The valid predictor only knows the client's local graph, so foreign global
    users are attached to it: each batch user becomes an extra node whose edges
    are their global interactions restricted to items the client has seen, with
    a zero initial embedding row. One propagation pass over that augmented
    graph yields final-layer representations, and the score is the plain dot
    product. Batch users with no locally-known items stay isolated and receive
    whatever the bias terms produce, which is deterministic and harmless.
    """
    batch_users = np.asarray(batch_users, dtype=np.int64)
    if np.unique(batch_users).size != batch_users.size:
        raise ValueError("batch_users must be unique")
    beta = batch_users.size
    p_local = local_graph.num_users
    known_item = local_graph.item_degrees > 0

    pos_of = {int(g): pos for pos, g in enumerate(batch_users)}
    sel = np.isin(global_graph.edges[:, 0], batch_users)
    cand = global_graph.edges[sel]
    keep = known_item[cand[:, 1]]
    cand = cand[keep]
    extra = np.stack(
        [np.array([pos_of[int(g)] for g in cand[:, 0]], dtype=np.int64), cand[:, 1]],
        axis=1,
    )
    aug_graph = merge(local_graph, extra, num_extra_users=beta)
    aug_params = GcfParams(
        user_emb=np.vstack([valid_params.user_emb,
                            np.zeros((beta, valid_params.dim))]),
        item_emb=valid_params.item_emb,
        w1=valid_params.w1,
        w2=valid_params.w2,
        bias=valid_params.bias,
    )
    layers = propagate(aug_params, normalize(aug_graph))
    user_repr = layers.users[-1][p_local:]
    item_repr = layers.items[-1]
    if items is not None:
        item_repr = item_repr[np.asarray(items, dtype=np.int64)]
    return user_repr @ item_repr.T


@dataclass
class SelectionBatch:
    """One estimator batch: users, their candidate global edges, probs, mask."""

    batch_users: np.ndarray    # (beta,) global-pool user indices
    edge_user_pos: np.ndarray  # (n_cand,) index into batch_users per candidate edge
    edge_items: np.ndarray     # (n_cand,) item index per candidate edge
    probs: FloatArray          # (n_cand,) in [eps, 1-eps]
    mask: np.ndarray           # (n_cand,) uint8 Bernoulli draws

    def selected_edges(self) -> np.ndarray:
        """(m, 2) [global user, item] rows where the mask fired."""
        on = self.mask.astype(bool)
        return np.stack(
            [self.batch_users[self.edge_user_pos[on]], self.edge_items[on]], axis=1
        )

    @property
    def num_candidates(self) -> int:
        return self.edge_items.size


def candidate_edges(global_graph: InteractionGraph,
                    batch_users: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(edge_user_pos, edge_items) for the batch users' observed global edges."""
    batch_users = np.asarray(batch_users, dtype=np.int64)
    parts_pos = []
    parts_item = []
    for pos, g in enumerate(batch_users):
        its = global_graph.items_of(int(g))
        parts_pos.append(np.full(its.size, pos, dtype=np.int64))
        parts_item.append(its)
    if not parts_pos:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(parts_pos), np.concatenate(parts_item)


def _validity_feature(validity: FloatArray, edge_user_pos: np.ndarray,
                      edge_items: np.ndarray) -> FloatArray:
    """Standardized validity column over the candidate set.

    Raw validity scores are dot products whose shared mean dwarfs the
    between-edge differences that actually matter; centering and scaling over
    the candidates conditions the feature so the estimator sees the deviation.
    """
    col = np.asarray(validity)[edge_user_pos, edge_items].astype(np.float64)
    if col.size == 0:
        return col
    sd = col.std()
    if sd < 1e-12:
        return col - col.mean()
    return (col - col.mean()) / sd


def selection_probabilities(prob_params: ProbEstimatorParams,
                            enc_user_repr: FloatArray, enc_item_repr: FloatArray,
                            validity: FloatArray, edge_user_pos: np.ndarray,
                            edge_items: np.ndarray,
                            with_cache: bool = False):
    """Per-candidate-edge selection probability (Bernoulli parameter).

    `enc_user_repr` is (beta, d) for the batch users, `enc_item_repr` (Q, d),
    both from the frozen encoder; `validity` is the (beta, Q) score matrix (or
    any array indexable as validity[user_pos, item]), standardized over the
    candidate set before it enters the estimator.
    """
    feats = np.concatenate(
        [enc_user_repr[edge_user_pos], enc_item_repr[edge_items]], axis=1
    )
    val_col = _validity_feature(validity, edge_user_pos, edge_items)
    probs, cache = prob_forward(prob_params, feats, val_col)
    if with_cache:
        return probs, (feats, val_col, cache)
    return probs


def sample_mask(probs: FloatArray, rng: Rng) -> np.ndarray:
    """Independent Bernoulli draw per edge."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("probabilities outside [0, 1]")
    return (rng.random(probs.shape[0]) < probs).astype(np.uint8)


# -- task predictor and reward ---------------------------------------------


def train_task_predictor(task_params: GcfParams, selected_edges: np.ndarray,
                         d_local: InteractionGraph, lr: float, reg_lambda: float,
                         tau: float, even_layers=None, rng: Rng | None = None,
                         stepper=None, batch_size: int = 1024,
                         struc_weight: float = 1.0,
                         losses=("bpr", "struc")) -> tuple[GcfParams, dict, InteractionGraph]:
    """One epoch of composite-loss training on local-plus-selected interactions.

    `task_params` must have user rows for the local users followed by the full
    global pool, so the merged graph is built in that fixed index space. An
    empty selection degenerates to a local-only epoch, flagged in the stats.
    Returns (params, stats, merged_graph); the merged graph is what the epoch
    trained on, which the reward evaluation reuses.
    """
    if rng is None:
        raise ValueError("train_task_predictor needs an rng")
    n_extra = task_params.num_users - d_local.num_users
    if n_extra < 0:
        raise ValueError("task params have fewer user rows than the local graph")
    selected_edges = np.asarray(selected_edges, dtype=np.int64).reshape(-1, 2)
    merged = merge(d_local, selected_edges, num_extra_users=n_extra)
    task_params, stats = train_epoch(
        task_params, merged, losses, lr, reg_lambda, tau, batch_size, rng,
        stepper=stepper, even_layers=even_layers, struc_weight=struc_weight,
    )
    stats["empty_selection"] = bool(selected_edges.shape[0] == 0)
    stats["n_selected"] = int(selected_edges.shape[0])
    return task_params, stats, merged


def reward(task_params: GcfParams, train_graph: InteractionGraph,
           valid_edges: np.ndarray, k_eval: int, ema_baseline: float,
           decay: float) -> tuple[float, float, float]:
    """(reward, new_baseline, raw_recall) from held-out recall vs the EMA baseline."""
    valid_edges = np.asarray(valid_edges, dtype=np.int64).reshape(-1, 2)
    if valid_edges.shape[0] == 0:
        raise ValueError("empty validation split; reward is undefined")
    res = evaluate(task_params, train_graph, valid_edges, k=k_eval)
    raw = res["recall"]
    r = raw - ema_baseline
    new_baseline = decay * ema_baseline + (1.0 - decay) * raw
    return r, new_baseline, raw


# -- policy gradient ---------------------------------------------------------


def surrogate_loglik_and_grad(prob_params: ProbEstimatorParams, feats: FloatArray,
                              validity_col: FloatArray, mask: np.ndarray,
                              num_batch_users: int
                              ) -> tuple[float, ProbEstimatorParams]:
    """Mean-per-user log-likelihood of a realized mask and its gradient.

    loglik = (1/|B|) * sum_edges [ S log p + (1 - S) log(1 - p) ]. The gradient
    wrt each logit is (S - p)/|B| where the squashed output is inside the clamp
    band, zero where the clamp is active.
    """
    if num_batch_users <= 0:
        raise ValueError("num_batch_users must be positive")
    probs, cache = prob_forward(prob_params, feats, validity_col)
    s = np.asarray(mask, dtype=np.float64)
    loglik = float(np.sum(s * np.log(probs) + (1.0 - s) * np.log1p(-probs)))
    loglik /= num_batch_users
    p_raw = cache["p_raw"]
    live = (p_raw > PROB_CLAMP_EPS) & (p_raw < 1.0 - PROB_CLAMP_EPS)
    dz = np.where(live, (s - p_raw), 0.0) / num_batch_users
    grads = _prob_backward(prob_params, cache, dz)
    return loglik, grads


def policy_gradient_update_multi(prob_params: ProbEstimatorParams,
                                 feats: FloatArray, val_col: FloatArray,
                                 masks, advantages, num_batch_users: int,
                                 gamma: float, stepper=None) -> ProbEstimatorParams:
    """Ascent step averaging several sampled masks of one batch.

    Each mask's log-likelihood gradient is weighted by its advantage (reward
    minus the mean of the other samples' rewards); averaging over samples
    keeps the estimator unbiased while the shared task state cancels any
    reward trend.
    """
    total = None
    for mask, adv in zip(masks, advantages):
        _, grads = surrogate_loglik_and_grad(
            prob_params, feats, val_col, mask, num_batch_users
        )
        scale = -float(adv) / len(masks)
        if total is None:
            total = [scale * g for g in grads.arrays()]
        else:
            for t, g in zip(total, grads.arrays()):
                t += scale * g
    if total is None:
        return prob_params
    if stepper is None:
        sgd_step_arrays(prob_params.arrays(), total, gamma)
    else:
        stepper(prob_params.arrays(), total, gamma)
    return prob_params


def policy_gradient_update(prob_params: ProbEstimatorParams, batch: SelectionBatch,
                           enc_user_repr: FloatArray, enc_item_repr: FloatArray,
                           validity: FloatArray, r: float, gamma: float,
                           stepper=None) -> ProbEstimatorParams:
    """Reward-weighted log-likelihood ascent on the realized mask.

    Implemented as a descent step on -r * loglik, so positive reward makes the
    sampled selection pattern more likely. The default step is a plain
    gradient step of size gamma; a persistent `stepper` may be supplied.
    """
    feats = np.concatenate(
        [enc_user_repr[batch.edge_user_pos], enc_item_repr[batch.edge_items]], axis=1
    )
    val_col = _validity_feature(validity, batch.edge_user_pos, batch.edge_items)
    _, grads = surrogate_loglik_and_grad(
        prob_params, feats, val_col, batch.mask, batch.batch_users.size
    )
    neg = [-r * g for g in grads.arrays()]
    if stepper is None:
        sgd_step_arrays(prob_params.arrays(), neg, gamma)
    else:
        stepper(prob_params.arrays(), neg, gamma)
    return prob_params


# -- the full loop ------------------------------------------------------------


@dataclass
class GdveState:
    """Everything one client's estimator owns (encoder and valid frozen)."""

    client_id: int
    encoder_params: GcfParams
    valid_params: GcfParams
    prob_params: ProbEstimatorParams
    task_params: GcfParams
    rng: Rng
    batch_size: int = 1024
    ema_baseline: float = 0.0
    # hyperparameters of the inner loop
    lr: float = 0.004
    gdve_lr: float = 0.007
    reg_lambda: float = 1e-4
    tau: float = 0.1
    even_layers: tuple = ()
    k_eval: int = 100
    ema_decay: float = 0.9
    task_batch_size: int = 1024
    struc_weight: float = 1.0
    optimizer: str = "adam"
    # adaptive steps amplify the weak reinforcement signal and collapse the
    # policy into the clamp band within a few batches; keep it plain
    policy_optimizer: str = "sgd"
    # "common" replays one sampling stream for every task epoch (paired
    # comparisons: reward differences then reflect selection content, not
    # fresh negative-sampling noise); "fresh" draws a new stream per batch
    task_rng_mode: str = "common"
    # masks sampled per batch; above 1 each sample's reward is baselined by
    # the mean of the other samples (leave-one-out, still unbiased) instead
    # of the cross-batch EMA, which removes the trend lag entirely
    mask_samples: int = 1
    # frozen-encoder representations over the global pool, computed once
    enc_user_repr: FloatArray | None = None
    enc_item_repr: FloatArray | None = None
    n_batches_run: int = 0
    _task_stepper: object = field(default=None, repr=False)
    _prob_stepper: object = field(default=None, repr=False)
    _validity_cache: dict = field(default_factory=dict, repr=False)

    def cached_validity(self, batch_users: np.ndarray, global_graph: InteractionGraph,
                        local_graph: InteractionGraph) -> FloatArray:
        """Validity matrix for a user batch; memoized (the inputs are frozen)."""
        key = batch_users.tobytes()
        hit = self._validity_cache.get(key)
        if hit is None:
            hit = validity_scores(self.valid_params, batch_users, global_graph,
                                  local_graph)
            self._validity_cache[key] = hit
        return hit


def make_gdve_state(client_id: int, encoder_params: GcfParams,
                    valid_params: GcfParams, d_global: InteractionGraph,
                    d_local: InteractionGraph, rng: Rng, **hyper) -> GdveState:
    """Assemble a client's estimator bundle after pretraining.

    The task predictor covers local users plus the whole global pool in one
    fixed index space; its global-pool user rows start from the encoder's user
    table so selected foreign users begin from their globally learned state.
    """
    dim = encoder_params.dim
    num_layers = encoder_params.num_layers
    state = GdveState(
        client_id=client_id,
        encoder_params=encoder_params,
        valid_params=valid_params,
        prob_params=init_prob_estimator(dim, rng.child("prob-init")),
        task_params=init_params(
            d_local.num_users + d_global.num_users, d_global.num_items, dim,
            num_layers, rng.child("task-init"),
        ),
        rng=rng,
        **hyper,
    )
    if not state.even_layers:
        state.even_layers = default_even_layers(num_layers)
    state.task_params.user_emb[d_local.num_users:] = encoder_params.user_emb
    state.task_params.item_emb[:] = encoder_params.item_emb
    layers = propagate(encoder_params, normalize(d_global))
    state.enc_user_repr = layers.users[-1]
    state.enc_item_repr = layers.items[-1]
    return state


def _user_batches(global_graph: InteractionGraph, batch_size: int, rng: Rng):
    """Endless stream of user batches, reshuffled each sweep."""
    sweep = 0
    while True:
        order = rng.child(f"sweep/{sweep}").permutation(global_graph.num_users)
        for start in range(0, order.size, batch_size):
            chunk = order[start : start + batch_size]
            if chunk.size:
                yield np.sort(chunk)
        sweep += 1


def _multi_sample_step(state: GdveState, d_local: InteractionGraph,
                       valid_edges: np.ndarray, batch_users: np.ndarray,
                       validity: FloatArray, pos: np.ndarray,
                       items: np.ndarray, task_burn_in: int) -> None:
    """One batch with several sampled masks and a leave-one-out baseline.

    Every sample trains a copy of the task predictor from the same state with
    the same auxiliary stream, so reward differences between samples reflect
    only selection content. The first sample's result becomes the new task
    state; the others are gradient probes.
    """
    n = state.mask_samples
    probs, (feats, val_col, _) = selection_probabilities(
        state.prob_params, state.enc_user_repr[batch_users],
        state.enc_item_repr, validity, pos, items, with_cache=True,
    )
    masks = []
    raws = np.zeros(n)
    kept = None
    for s in range(n):
        mask = sample_mask(probs, state.rng.child(f"mask/{state.n_batches_run}/{s}"))
        batch = SelectionBatch(batch_users=batch_users, edge_user_pos=pos,
                               edge_items=items, probs=probs, mask=mask)
        if state.task_rng_mode == "common":
            task_rng = state.rng.child("task-common")
        else:
            task_rng = state.rng.child(f"task/{state.n_batches_run}/{s}")
        params_s, _, merged = train_task_predictor(
            state.task_params.copy(), batch.selected_edges(), d_local, state.lr,
            state.reg_lambda, state.tau, state.even_layers, rng=task_rng,
            stepper=None, batch_size=state.task_batch_size,
            struc_weight=state.struc_weight,
        )
        _, _, raws[s] = reward(params_s, merged, valid_edges, state.k_eval, 0.0, 0.0)
        masks.append(mask)
        if s == 0:
            kept = params_s
    state.task_params = kept
    if state.n_batches_run >= task_burn_in:
        advantages = (raws * n - raws.sum()) / (n - 1)  # raw_s minus mean of others
        state.prob_params = policy_gradient_update_multi(
            state.prob_params, feats, val_col, masks, advantages,
            batch_users.size, state.gdve_lr, stepper=state._prob_stepper,
        )
    state.ema_baseline = (state.ema_decay * state.ema_baseline
                          + (1.0 - state.ema_decay) * float(raws.mean()))
    state.n_batches_run += 1


def run_gdve_training(state: GdveState, d_global: InteractionGraph,
                      d_local: InteractionGraph, valid_edges: np.ndarray,
                      max_batches: int = 500, plateau_window: int = 20,
                      plateau_tol: float = 1e-4, task_burn_in: int = 0) -> GdveState:
    """Alternate selection, task training, reward, and policy steps to plateau.

    Stops when the EMA reward baseline improved by less than `plateau_tol`
    over the last `plateau_window` batches, or at `max_batches`. The encoder
    and valid-predictor parameters are read-only throughout. The first
    `task_burn_in` batches update only the task predictor and the reward
    baseline, so the policy never trains against the steep early reward trend
    that a lagging baseline cannot correct for.
    """
    if max_batches <= 0:
        return state
    if state._task_stepper is None:
        state._task_stepper = make_stepper(state.optimizer, state.task_params.arrays())
    if state._prob_stepper is None:
        state._prob_stepper = make_stepper(state.policy_optimizer,
                                           state.prob_params.arrays())
    batches = _user_batches(d_global, state.batch_size, state.rng.child("users"))
    history = [state.ema_baseline]
    for t in range(max_batches):
        batch_users = next(batches)
        validity = state.cached_validity(batch_users, d_global, d_local)
        pos, items = candidate_edges(d_global, batch_users)
        if state.mask_samples > 1:
            _multi_sample_step(state, d_local, valid_edges, batch_users,
                               validity, pos, items, task_burn_in)
            history.append(state.ema_baseline)
            if len(history) > plateau_window:
                if history[-1] - history[-1 - plateau_window] < plateau_tol:
                    break
            continue
        probs = selection_probabilities(
            state.prob_params, state.enc_user_repr[batch_users],
            state.enc_item_repr, validity, pos, items,
        )
        mask = sample_mask(probs, state.rng.child(f"mask/{state.n_batches_run}"))
        batch = SelectionBatch(batch_users=batch_users, edge_user_pos=pos,
                               edge_items=items, probs=probs, mask=mask)
        if state.task_rng_mode == "common":
            task_rng = state.rng.child("task-common")
        else:
            task_rng = state.rng.child(f"task/{state.n_batches_run}")
        state.task_params, _, merged = train_task_predictor(
            state.task_params, batch.selected_edges(), d_local, state.lr,
            state.reg_lambda, state.tau, state.even_layers,
            rng=task_rng,
            stepper=state._task_stepper, batch_size=state.task_batch_size,
            struc_weight=state.struc_weight,
        )
        r, state.ema_baseline, _ = reward(
            state.task_params, merged, valid_edges, state.k_eval,
            state.ema_baseline, state.ema_decay,
        )
        if state.n_batches_run >= task_burn_in:
            state.prob_params = policy_gradient_update(
                state.prob_params, batch, state.enc_user_repr[batch_users],
                state.enc_item_repr, validity, r, state.gdve_lr,
                stepper=state._prob_stepper,
            )
        state.n_batches_run += 1
        history.append(state.ema_baseline)
        if len(history) > plateau_window:
            if history[-1] - history[-1 - plateau_window] < plateau_tol:
                break
    state._validity_cache.clear()
    return state


def select_augmentation(state: GdveState, d_global: InteractionGraph,
                        rng: Rng, d_local: InteractionGraph | None = None
                        ) -> tuple[np.ndarray, float]:
    """One sampled selection over every observed global edge.

    Iterates the global pool in batch-size chunks, samples each edge's mask
    once, and returns (selected (m, 2) [global user, item] rows, selected
    fraction of the global edge set).
    """
    if d_global.num_edges == 0:
        return np.zeros((0, 2), dtype=np.int64), 0.0
    if d_local is None:
        raise ValueError("select_augmentation needs the local graph for validity scores")
    picked = []
    total = 0
    users = np.arange(d_global.num_users)
    for start in range(0, users.size, state.batch_size):
        batch_users = users[start : start + state.batch_size]
        validity = state.cached_validity(batch_users, d_global, d_local)
        pos, items = candidate_edges(d_global, batch_users)
        if items.size == 0:
            continue
        probs = selection_probabilities(
            state.prob_params, state.enc_user_repr[batch_users],
            state.enc_item_repr, validity, pos, items,
        )
        mask = sample_mask(probs, rng.child(f"chunk/{start}"))
        batch = SelectionBatch(batch_users=batch_users, edge_user_pos=pos,
                               edge_items=items, probs=probs, mask=mask)
        picked.append(batch.selected_edges())
        total += items.size
    state._validity_cache.clear()
    edges = np.concatenate(picked, axis=0) if picked else np.zeros((0, 2), np.int64)
    ratio = edges.shape[0] / d_global.num_edges
    return edges, ratio


# -- checkpointing -------------------------------------------------------------


def _pack_gcf(prefix: str, params: GcfParams, out: dict) -> None:
    out[f"{prefix}/user_emb"] = params.user_emb
    out[f"{prefix}/item_emb"] = params.item_emb
    for i, (w1, w2, b) in enumerate(zip(params.w1, params.w2, params.bias)):
        out[f"{prefix}/w1/{i}"] = w1
        out[f"{prefix}/w2/{i}"] = w2
        out[f"{prefix}/bias/{i}"] = b


def _unpack_gcf(prefix: str, data) -> GcfParams:
    layers = sorted(
        int(k.rsplit("/", 1)[1]) for k in data.files if k.startswith(f"{prefix}/w1/")
    )
    return GcfParams(
        user_emb=data[f"{prefix}/user_emb"],
        item_emb=data[f"{prefix}/item_emb"],
        w1=[data[f"{prefix}/w1/{i}"] for i in layers],
        w2=[data[f"{prefix}/w2/{i}"] for i in layers],
        bias=[data[f"{prefix}/bias/{i}"] for i in layers],
    )


def save_gdve_state(path, state: GdveState) -> None:
    """Versioned binary dump: parameter blocks, baseline, progress, RNG state."""
    import json

    blobs: dict = {"format_version": np.array([1])}
    _pack_gcf("encoder", state.encoder_params, blobs)
    _pack_gcf("valid", state.valid_params, blobs)
    _pack_gcf("task", state.task_params, blobs)
    for i, (w, b) in enumerate(zip(state.prob_params.weights, state.prob_params.biases)):
        blobs[f"prob/w/{i}"] = w
        blobs[f"prob/b/{i}"] = b
    meta = {
        "client_id": state.client_id,
        "ema_baseline": state.ema_baseline,
        "batch_size": state.batch_size,
        "n_batches_run": state.n_batches_run,
        "lr": state.lr,
        "gdve_lr": state.gdve_lr,
        "reg_lambda": state.reg_lambda,
        "tau": state.tau,
        "even_layers": list(state.even_layers),
        "k_eval": state.k_eval,
        "ema_decay": state.ema_decay,
        "task_batch_size": state.task_batch_size,
        "struc_weight": state.struc_weight,
        "optimizer": state.optimizer,
        "policy_optimizer": state.policy_optimizer,
        "task_rng_mode": state.task_rng_mode,
        "mask_samples": state.mask_samples,
        "rng": state.rng.get_state(),
    }
    blobs["meta_json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **blobs)


def load_gdve_state(path, d_global: InteractionGraph) -> GdveState:
    import json

    data = np.load(path)
    if int(data["format_version"][0]) != 1:
        raise ValueError(f"unsupported checkpoint version {data['format_version']}")
    meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
    prob_idx = sorted(
        int(k.rsplit("/", 1)[1]) for k in data.files if k.startswith("prob/w/")
    )
    state = GdveState(
        client_id=int(meta["client_id"]),
        encoder_params=_unpack_gcf("encoder", data),
        valid_params=_unpack_gcf("valid", data),
        prob_params=ProbEstimatorParams(
            weights=[data[f"prob/w/{i}"] for i in prob_idx],
            biases=[data[f"prob/b/{i}"] for i in prob_idx],
        ),
        task_params=_unpack_gcf("task", data),
        rng=Rng.from_state(meta["rng"]),
        batch_size=int(meta["batch_size"]),
        ema_baseline=float(meta["ema_baseline"]),
        lr=float(meta["lr"]),
        gdve_lr=float(meta["gdve_lr"]),
        reg_lambda=float(meta["reg_lambda"]),
        tau=float(meta["tau"]),
        even_layers=tuple(meta["even_layers"]),
        k_eval=int(meta["k_eval"]),
        ema_decay=float(meta["ema_decay"]),
        task_batch_size=int(meta["task_batch_size"]),
        struc_weight=float(meta["struc_weight"]),
        optimizer=meta["optimizer"],
        policy_optimizer=meta.get("policy_optimizer", "sgd"),
        task_rng_mode=meta.get("task_rng_mode", "common"),
        mask_samples=int(meta.get("mask_samples", 1)),
    )
    state.n_batches_run = int(meta["n_batches_run"])
    layers = propagate(state.encoder_params, normalize(d_global))
    state.enc_user_repr = layers.users[-1]
    state.enc_item_repr = layers.items[-1]
    return state
