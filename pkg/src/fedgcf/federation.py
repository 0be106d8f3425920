"""Federated training engine.

Clients hold disjoint private user populations plus a shared pool of global
interactions. Each communication round every client installs the incoming
shared parameter blocks, trains locally on its method-specific graph, and
uploads the blocks back; the server averages them weighted by original local
dataset size and redistributes. User embedding rows never leave a client:
clients have disjoint users, so averaging their rows would mix unrelated
people, and keeping them local preserves the privacy framing.

Method grid (graph x loss):

                     full global pool      value-estimator selection
  ranking loss only  fedngcf               fedgdve_no_sl
  ranking+structure  fedgdve_no_gdve       fedgdve

For selection methods the estimator is trained once before round 1 and the
Bernoulli masks are resampled each round from the frozen policy.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluation import evaluate
from .gdve import (
    GdveState,
    make_gdve_state,
    pretrain_encoder,
    pretrain_valid_predictor,
    run_gdve_training,
    select_augmentation,
)
from .graph import InteractionGraph, merge, normalize
from .model import GcfParams, default_even_layers, init_params, train_epoch
from .numerics import FloatArray
from .optim import make_stepper
from .rng import Rng

__all__ = [
    "METHODS",
    "FEDERATED_METHODS",
    "SharedParams",
    "ClientState",
    "RoundReport",
    "FedConfig",
    "extract_shared",
    "install_shared",
    "local_round",
    "aggregate",
    "setup_clients",
    "run_federation",
]

FEDERATED_METHODS = ("fedngcf", "fedgdve", "fedgdve_no_sl", "fedgdve_no_gdve")
METHODS = FEDERATED_METHODS + ("centralized_ngcf",)

_USES_SELECTION = frozenset({"fedgdve", "fedgdve_no_sl"})
_USES_STRUC = frozenset({"fedgdve", "fedgdve_no_gdve"})


@dataclass
class SharedParams:
    """The blocks that travel between clients and server.

    Deliberately no user table: the upload surface is the item embeddings and
    the per-layer propagation weights, nothing user-identifying.
    """

    item_emb: FloatArray
    w1: list[FloatArray]
    w2: list[FloatArray]
    bias: list[FloatArray]

    def arrays(self) -> list[FloatArray]:
        return [self.item_emb, *self.w1, *self.w2, *self.bias]

    def copy(self) -> "SharedParams":
        return SharedParams(
            item_emb=self.item_emb.copy(),
            w1=[w.copy() for w in self.w1],
            w2=[w.copy() for w in self.w2],
            bias=[b.copy() for b in self.bias],
        )


def extract_shared(params: GcfParams) -> SharedParams:
    """Copy the shared blocks out of a full parameter set."""
    return SharedParams(
        item_emb=params.item_emb.copy(),
        w1=[w.copy() for w in params.w1],
        w2=[w.copy() for w in params.w2],
        bias=[b.copy() for b in params.bias],
    )


def install_shared(params: GcfParams, shared: SharedParams) -> None:
    """Overwrite a client's shared blocks in place with the incoming ones."""
    if params.item_emb.shape != shared.item_emb.shape:
        raise ValueError(
            f"item table shape {shared.item_emb.shape} does not match "
            f"client shape {params.item_emb.shape}"
        )
    if len(params.w1) != len(shared.w1):
        raise ValueError("layer count mismatch between client and shared params")
    params.item_emb[...] = shared.item_emb
    for mine, theirs in zip(params.w1, shared.w1):
        mine[...] = theirs
    for mine, theirs in zip(params.w2, shared.w2):
        mine[...] = theirs
    for mine, theirs in zip(params.bias, shared.bias):
        mine[...] = theirs


@dataclass
class ClientState:
    """One simulated participant.

    `params` covers the client's own users first, then one row per global-pool
    user (locally trained, never uploaded). Validation and test edges are in
    local user indices and never enter any training graph.
    """

    client_id: int
    d_local: InteractionGraph
    valid_edges: np.ndarray
    test_edges: np.ndarray
    params: GcfParams
    rng: Rng
    gdve: GdveState | None = None
    selection: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=np.int64)
    )
    selected_ratio: float = 0.0
    round_graph: InteractionGraph | None = None
    last_stats: dict = field(default_factory=dict)
    stepper: object = field(default=None, repr=False)

    @property
    def weight(self) -> int:
        """FedAvg weight: the original local dataset size in edges."""
        return self.d_local.num_edges


@dataclass
class RoundReport:
    round: int
    per_client: list[dict]
    aggregate: dict[str, float]
    seconds: float


@dataclass
class FedConfig:
    """Engine-level knobs; the experiment layer maps its config onto this."""

    method: str = "fedgdve"
    rounds: int = 30
    epochs_per_round: int = 2
    lr: float = 0.004
    reg_lambda: float = 1e-4
    tau: float = 0.1
    dim: int = 64
    num_layers: int = 3
    even_layers: tuple = ()
    batch_size: int = 1024
    k_eval: int = 100
    optimizer: str = "adam"
    struc_weight: float = 1.0
    workers: int = 1
    # estimator phase
    pretrain_epochs: int = 10
    gdve_batch_size: int = 1024
    gdve_lr: float = 0.007
    gdve_max_batches: int = 500
    gdve_plateau_window: int = 20
    gdve_plateau_tol: float = 1e-4
    gdve_ema_decay: float = 0.9
    gdve_task_batch_size: int = 1024
    gdve_burn_in: int = 0
    # >1 switches the estimator to leave-one-out baselining over several masks
    # per batch, which carries far more signal per reward evaluation
    gdve_mask_samples: int = 1
    # per-client encoder pretraining is the default; sharing one encoder is a
    # desk-scale shortcut that run metadata must flag
    shared_encoder: bool = False

    def resolved_even_layers(self) -> tuple:
        if self.even_layers:
            return tuple(self.even_layers)
        return default_even_layers(self.num_layers)


def local_round(client: ClientState, shared: SharedParams, method: str,
                epochs_per_round: int, lr: float, reg_lambda: float, tau: float,
                even_layers, rng: Rng, d_global: InteractionGraph | None = None,
                batch_size: int = 1024, optimizer: str = "adam",
                struc_weight: float = 1.0) -> tuple[SharedParams, int]:
    """One client's contribution to a communication round.

    Installs the incoming shared blocks, trains `epochs_per_round` epochs on
    the method's training graph, and returns (shared blocks, weight). With
    zero epochs the incoming blocks bounce back unchanged.
    """
    if method not in FEDERATED_METHODS:
        raise ValueError(f"unknown federated method {method!r}")
    if epochs_per_round == 0:
        return shared.copy(), client.weight
    install_shared(client.params, shared)
    n_extra = client.params.num_users - client.d_local.num_users
    if method in _USES_SELECTION:
        extra = client.selection
    else:
        if d_global is None:
            raise ValueError(f"method {method} trains on the global pool; pass d_global")
        extra = d_global.edges
    merged = merge(client.d_local, extra, num_extra_users=n_extra)
    losses = ("bpr", "struc") if method in _USES_STRUC else ("bpr",)
    if client.stepper is None:
        client.stepper = make_stepper(optimizer, client.params.arrays())
    adj = normalize(merged)
    stats: dict = {}
    for e in range(epochs_per_round):
        client.params, stats = train_epoch(
            client.params, merged, losses, lr, reg_lambda, tau, batch_size,
            rng.child(f"epoch/{e}"), adj=adj, stepper=client.stepper,
            even_layers=even_layers, struc_weight=struc_weight,
        )
    client.round_graph = merged
    client.last_stats = stats
    return extract_shared(client.params), client.weight


def aggregate(updates) -> SharedParams:
    """Weighted element-wise mean of the uploaded blocks."""
    updates = list(updates)
    if not updates:
        raise ValueError("aggregate needs at least one update")
    for _, w in updates:
        if w <= 0:
            raise ValueError(f"non-positive aggregation weight {w}")
    ref = updates[0][0]
    total = float(sum(float(w) for _, w in updates))
    out = [np.zeros_like(a) for a in ref.arrays()]
    for shared, w in updates:
        arrs = shared.arrays()
        if len(arrs) != len(out):
            raise ValueError("update has a different number of parameter blocks")
        for acc, a in zip(out, arrs):
            if acc.shape != a.shape:
                raise ValueError(f"block shape mismatch {acc.shape} vs {a.shape}")
            acc += (float(w) / total) * a
    n_layers = len(ref.w1)
    return SharedParams(
        item_emb=out[0],
        w1=out[1 : 1 + n_layers],
        w2=out[1 + n_layers : 1 + 2 * n_layers],
        bias=out[1 + 2 * n_layers :],
    )


# -- orchestration -----------------------------------------------------------


def _parallel(fn, items, workers: int):
    """Apply fn over items, optionally on a thread pool; order preserved.

    Threads suffice here: the heavy work is BLAS matrix products, which run
    outside the interpreter lock, and each client touches only its own state.
    """
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def setup_clients(d_global: InteractionGraph, locals_with_splits, cfg: FedConfig,
                  rng: Rng) -> list[ClientState]:
    """Build client states (and, for selection methods, train their estimators).

    `locals_with_splits` is a sequence of (train_graph, valid_edges, test_edges)
    per client, all in that client's local user index space over the shared
    item catalog.
    """
    even = cfg.resolved_even_layers()
    clients = []
    for k, (d_local, valid_edges, test_edges) in enumerate(locals_with_splits):
        params = init_params(
            d_local.num_users + d_global.num_users, d_global.num_items,
            cfg.dim, cfg.num_layers, rng.child(f"client-init/{k}"),
        )
        clients.append(ClientState(
            client_id=k, d_local=d_local, valid_edges=np.asarray(valid_edges),
            test_edges=np.asarray(test_edges), params=params,
            rng=rng.child(f"client/{k}"),
        ))
    if cfg.method not in _USES_SELECTION:
        return clients

    if cfg.shared_encoder:
        # identical global data means per-client encoders differ only by seed;
        # one pretraining run stands in for all of them
        encoder = pretrain_encoder(
            d_global, cfg.pretrain_epochs, cfg.lr, cfg.reg_lambda,
            rng.child("encoder"), dim=cfg.dim, num_layers=cfg.num_layers,
            batch_size=cfg.batch_size, optimizer=cfg.optimizer,
        )
        encoders = [encoder] * len(clients)
    else:
        encoders = _parallel(
            lambda k: pretrain_encoder(
                d_global, cfg.pretrain_epochs, cfg.lr, cfg.reg_lambda,
                rng.child(f"encoder/{k}"), dim=cfg.dim, num_layers=cfg.num_layers,
                batch_size=cfg.batch_size, optimizer=cfg.optimizer,
            ),
            list(range(len(clients))), cfg.workers,
        )

    def build_estimator(pair):
        k, client = pair
        vp = pretrain_valid_predictor(
            client.d_local, cfg.pretrain_epochs, cfg.lr, cfg.reg_lambda,
            rng.child(f"valid-predictor/{k}"), dim=cfg.dim,
            num_layers=cfg.num_layers, batch_size=cfg.batch_size,
            optimizer=cfg.optimizer,
        )
        state = make_gdve_state(
            k, encoders[k], vp, d_global, client.d_local,
            rng.child(f"gdve/{k}"), batch_size=cfg.gdve_batch_size,
            lr=cfg.lr, gdve_lr=cfg.gdve_lr, reg_lambda=cfg.reg_lambda,
            tau=cfg.tau, even_layers=even, k_eval=cfg.k_eval,
            ema_decay=cfg.gdve_ema_decay, task_batch_size=cfg.gdve_task_batch_size,
            struc_weight=cfg.struc_weight, optimizer=cfg.optimizer,
            mask_samples=cfg.gdve_mask_samples,
        )
        state = run_gdve_training(
            state, d_global, client.d_local, client.valid_edges,
            max_batches=cfg.gdve_max_batches,
            plateau_window=cfg.gdve_plateau_window,
            plateau_tol=cfg.gdve_plateau_tol, task_burn_in=cfg.gdve_burn_in,
        )
        client.gdve = state
        # foreign user rows resume from the globally pretrained table
        client.params.user_emb[client.d_local.num_users:] = encoders[k].user_emb

    _parallel(build_estimator, list(enumerate(clients)), cfg.workers)
    return clients


def _evaluate_clients(clients: list[ClientState], k: int, workers: int
                      ) -> tuple[list[dict], dict]:
    """Per-client test metrics plus the test-edge-weighted mean."""

    def one(client: ClientState) -> dict:
        graph = client.round_graph if client.round_graph is not None else client.d_local
        row = {
            "client_id": client.client_id,
            "n_test_edges": int(client.test_edges.shape[0]),
            "selected_ratio": client.selected_ratio,
        }
        if client.test_edges.shape[0]:
            res = evaluate(client.params, graph, client.test_edges, k=k)
            row.update(precision=res["precision"], recall=res["recall"],
                       ndcg=res["ndcg"], n_eval_users=res["n_users"])
        for key in ("mean_bpr", "mean_struc"):
            if key in client.last_stats:
                row[key] = client.last_stats[key]
        return row

    per_client = _parallel(one, clients, workers)
    agg: dict[str, float] = {}
    total = float(sum(r["n_test_edges"] for r in per_client))
    if total > 0:
        for metric in ("precision", "recall", "ndcg"):
            num = sum(r[metric] * r["n_test_edges"] for r in per_client if metric in r)
            agg[metric] = num / total
    ratios = [r["selected_ratio"] for r in per_client]
    agg["selected_ratio"] = float(np.mean(ratios)) if ratios else 0.0
    return per_client, agg


def run_federation(d_global: InteractionGraph, clients: list[ClientState],
                   cfg: FedConfig, rng: Rng) -> list[RoundReport]:
    """The communication loop: select, train, aggregate, redistribute, score.

    Deterministic for a fixed (seed, config): every random draw comes from a
    named child stream keyed by round and client id, so neither thread
    scheduling nor client order changes any result. Any client failure aborts
    the run naming the round and client.
    """
    if cfg.method not in FEDERATED_METHODS:
        raise ValueError(f"unknown federated method {cfg.method!r}")
    if cfg.rounds == 0:
        return []
    even = cfg.resolved_even_layers()
    server_rng = rng.child("server")
    shared = extract_shared(init_params(
        1, d_global.num_items, cfg.dim, cfg.num_layers, server_rng.child("init"),
    ))
    reports = []
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()

        def client_round(client: ClientState):
            try:
                if cfg.method in _USES_SELECTION:
                    client.selection, client.selected_ratio = select_augmentation(
                        client.gdve, d_global,
                        rng.child(f"select/{r}/{client.client_id}"),
                        d_local=client.d_local,
                    )
                return local_round(
                    client, shared, cfg.method, cfg.epochs_per_round, cfg.lr,
                    cfg.reg_lambda, cfg.tau, even,
                    rng.child(f"round/{r}/client/{client.client_id}"),
                    d_global=d_global, batch_size=cfg.batch_size,
                    optimizer=cfg.optimizer, struc_weight=cfg.struc_weight,
                )
            except Exception as exc:
                raise RuntimeError(
                    f"round {r} failed on client {client.client_id}: {exc}"
                ) from exc

        updates = _parallel(client_round, clients, cfg.workers)
        shared = aggregate(updates)
        for client in clients:
            install_shared(client.params, shared)
        per_client, agg = _evaluate_clients(clients, cfg.k_eval, cfg.workers)
        reports.append(RoundReport(
            round=r, per_client=per_client, aggregate=agg,
            seconds=time.perf_counter() - t0,
        ))
    return reports
