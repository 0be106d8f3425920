"""Experiment orchestration.

Turns a validated config into artifacts on disk: a metrics CSV (schema
"run_id,method,seed,round,scope,metric,value,seconds"), a partition manifest
for federated runs, a JSON metadata record with every resolved setting, and a
parameter checkpoint that the eval entry point can re-score.

The pipeline is load -> per-user holdout -> global/local partition ->
(estimator pretraining) -> communication rounds -> per-round metric rows.
Centralized runs skip the partition and train one model on the pooled train
edges, reporting on the same round cadence so CSVs stay comparable.
"""
from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass
from importlib import metadata as _ilmd
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .datasets import (
    HoldoutSplit,
    load_adjacency_list,
    load_edge_list,
    load_movielens,
    split_holdout,
    synthetic_graph,
)
from .evaluation import evaluate
from .federation import (
    _USES_SELECTION,
    FedConfig,
    run_federation,
    setup_clients,
)
from .graph import InteractionGraph, build_graph, normalize
from .model import GcfParams, init_params, train_epoch
from .optim import make_stepper
from .partition import global_local_split, heterogeneity_score, write_manifest
from .rng import Rng

__all__ = [
    "CSV_HEADER",
    "MetricsRow",
    "load_dataset",
    "prepare_data",
    "run_experiment",
    "run_partition_only",
    "eval_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "resolve_run_dir",
]

CSV_HEADER = "run_id,method,seed,round,scope,metric,value,seconds"

OUTPUT_DIR_ENV = "FEDGCF_OUTPUT_DIR"

CHECKPOINT_VERSION = 1

_EVAL_METRICS = ("precision", "recall", "ndcg")


@dataclass
class MetricsRow:
    """One appended observation; (round, scope, metric) is unique per run."""

    run_id: str
    method: str
    seed: int
    round: int
    scope: str
    metric: str
    value: float
    seconds: float

    def line(self, deterministic_timing: bool) -> str:
        secs = 0.0 if deterministic_timing else self.seconds
        return (f"{self.run_id},{self.method},{self.seed},{self.round},"
                f"{self.scope},{self.metric},{self.value!r},{secs:.3f}")


def _code_version() -> str:
    try:
        return _ilmd.version("fedgcf")
    except _ilmd.PackageNotFoundError:
        return "unknown"


def resolve_run_dir(cfg: ExperimentConfig) -> Path:
    """Output root (env var wins over config) plus the run id."""
    root = os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir
    return Path(root) / cfg.resolved_run_id()


def load_dataset(cfg: ExperimentConfig):
    """Load the configured dataset as (graph, id maps)."""
    fmt = cfg.dataset_format
    if fmt == "synthetic":
        return synthetic_graph(
            seed=cfg.synthetic_seed,
            num_users=cfg.synthetic_users,
            num_items=cfg.synthetic_items,
            num_edges=cfg.synthetic_edges,
        )
    if fmt == "movielens":
        return load_movielens(cfg.dataset)
    if fmt == "edge_list":
        return load_edge_list(cfg.dataset)
    return load_adjacency_list(cfg.dataset)


def _localized_eval_edges(edges: np.ndarray, client_maps, num_users: int):
    """Map full-space eval edges into each client's local user space.

    Edges of users in the global pool belong to no client and are dropped.
    """
    owner = np.full(num_users, -1, dtype=np.int64)
    local = np.zeros(num_users, dtype=np.int64)
    for k, m in enumerate(client_maps):
        raw = np.asarray(m.raw_ids, dtype=np.int64)
        owner[raw] = k
        local[raw] = np.arange(raw.size)
    out = []
    ks = owner[edges[:, 0]] if edges.size else np.zeros(0, dtype=np.int64)
    for k in range(len(client_maps)):
        sel = edges[ks == k] if edges.size else edges.reshape(0, 2)
        sel = sel.copy()
        if sel.size:
            sel[:, 0] = local[sel[:, 0]]
        out.append(sel)
    return out


def prepare_data(cfg: ExperimentConfig, rng: Rng, require_valid: bool = True):
    """Load, hold out eval edges, and partition the train edges.

    Returns (train_graph, holdout, d_global, locals_with_splits, split_result);
    the last three are None for centralized runs. `require_valid` rejects
    selection-method configs that leave any client without validation edges.
    """
    graph, _ = load_dataset(cfg)
    holdout = split_holdout(graph, cfg.train_frac, cfg.valid_frac, cfg.test_frac,
                            rng.child("holdout"))
    train_graph, _, _ = build_graph(holdout.train_edges, num_users=graph.num_users,
                                    num_items=graph.num_items)
    if cfg.method == "centralized_ngcf":
        return train_graph, holdout, None, None, None

    conc = cfg.concentration if cfg.partition_mode == "dirichlet" else None
    d_global, locals_, result = global_local_split(
        train_graph, cfg.global_edge_frac, cfg.num_clients,
        mode=cfg.partition_mode, concentration=conc,
        rng=rng.child("partition"), seed=cfg.seed,
    )
    valid_per = _localized_eval_edges(holdout.valid_edges, result.client_maps,
                                      train_graph.num_users)
    test_per = _localized_eval_edges(holdout.test_edges, result.client_maps,
                                     train_graph.num_users)
    locals_with_splits = []
    for k, d_local in enumerate(locals_):
        if require_valid and cfg.method in _USES_SELECTION and valid_per[k].shape[0] == 0:
            raise ValueError(
                f"client {k} received no validation edges; selection methods "
                "need per-client validation data (increase valid_frac or "
                "client sizes)"
            )
        locals_with_splits.append((d_local, valid_per[k], test_per[k]))
    return train_graph, holdout, d_global, locals_with_splits, result


# -- centralized baseline ------------------------------------------------------


def _run_centralized(train_graph: InteractionGraph, holdout: HoldoutSplit,
                     cfg: ExperimentConfig, rng: Rng):
    """Plain ranking-loss training on the pooled train edges.

    Reports on the federation cadence: one eval per `epochs_per_round` epochs.
    """
    params = init_params(train_graph.num_users, train_graph.num_items,
                         cfg.dim, cfg.num_layers, rng.child("init"))
    adj = normalize(train_graph)
    stepper = make_stepper(cfg.optimizer, params.arrays())
    train_rng = rng.child("train")
    reports = []
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        stats = {}
        for _ in range(cfg.epochs_per_round):
            _, stats = train_epoch(
                params, train_graph, ("bpr",), cfg.lr, cfg.reg_lambda, cfg.tau,
                cfg.batch_size, train_rng, adj=adj, stepper=stepper,
                optimizer=cfg.optimizer,
            )
        res = evaluate(params, train_graph, holdout.test_edges, k=cfg.k_eval)
        agg = {m: res[m] for m in _EVAL_METRICS}
        if "mean_bpr" in stats:
            agg["loss_bpr"] = stats["mean_bpr"]
        reports.append({"round": r, "aggregate": agg,
                        "seconds": time.perf_counter() - t0})
    return params, reports


# -- metrics CSV ---------------------------------------------------------------


def _federated_rows(cfg: ExperimentConfig, reports) -> list[MetricsRow]:
    run_id = cfg.resolved_run_id()
    selection = cfg.method in _USES_SELECTION
    rows = []

    def add(rnd, scope, metric, value, secs):
        rows.append(MetricsRow(run_id, cfg.method, cfg.seed, rnd, scope, metric,
                               float(value), secs))

    for rep in reports:
        for metric in _EVAL_METRICS:
            if metric in rep.aggregate:
                add(rep.round, "aggregate", metric, rep.aggregate[metric], rep.seconds)
        if selection:
            add(rep.round, "aggregate", "selected_ratio",
                rep.aggregate["selected_ratio"], rep.seconds)
        for pc in rep.per_client:
            scope = f"client_{pc['client_id']}"
            for metric in _EVAL_METRICS:
                if metric in pc:
                    add(rep.round, scope, metric, pc[metric], rep.seconds)
            if selection:
                add(rep.round, scope, "selected_ratio", pc["selected_ratio"],
                    rep.seconds)
            if "mean_bpr" in pc:
                add(rep.round, scope, "loss_bpr", pc["mean_bpr"], rep.seconds)
            if "mean_struc" in pc and cfg.method in ("fedgdve", "fedgdve_no_gdve"):
                add(rep.round, scope, "loss_struc", pc["mean_struc"], rep.seconds)
    return rows


def _centralized_rows(cfg: ExperimentConfig, reports) -> list[MetricsRow]:
    run_id = cfg.resolved_run_id()
    rows = []
    for rep in reports:
        for metric, value in rep["aggregate"].items():
            rows.append(MetricsRow(run_id, cfg.method, cfg.seed, rep["round"],
                                   "aggregate", metric, float(value),
                                   rep["seconds"]))
    return rows


def _summary_rows(cfg: ExperimentConfig, final_agg: dict, total_secs: float):
    run_id = cfg.resolved_run_id()
    rows = []
    for metric, value in final_agg.items():
        rows.append(MetricsRow(run_id, cfg.method, cfg.seed, cfg.rounds,
                               "summary", metric, float(value), total_secs))
    return rows


def _write_csv(path: Path, rows, deterministic_timing: bool) -> None:
    lines = [CSV_HEADER]
    lines.extend(row.line(deterministic_timing) for row in rows)
    path.write_text("\n".join(lines) + "\n")


# -- checkpoints ---------------------------------------------------------------


def _pack_params(store: dict, prefix: str, params: GcfParams) -> None:
    store[f"{prefix}/user_emb"] = params.user_emb
    store[f"{prefix}/item_emb"] = params.item_emb
    for ell in range(params.num_layers):
        store[f"{prefix}/w1/{ell}"] = params.w1[ell]
        store[f"{prefix}/w2/{ell}"] = params.w2[ell]
        store[f"{prefix}/bias/{ell}"] = params.bias[ell]


def _unpack_params(data, prefix: str, num_layers: int) -> GcfParams:
    return GcfParams(
        user_emb=data[f"{prefix}/user_emb"],
        item_emb=data[f"{prefix}/item_emb"],
        w1=[data[f"{prefix}/w1/{ell}"] for ell in range(num_layers)],
        w2=[data[f"{prefix}/w2/{ell}"] for ell in range(num_layers)],
        bias=[data[f"{prefix}/bias/{ell}"] for ell in range(num_layers)],
    )


def save_checkpoint(path, cfg: ExperimentConfig, units) -> None:
    """Persist per-unit (params, exclusion graph, test edges) for re-scoring.

    A centralized run is one unit; a federated run has one per client.
    """
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "method": cfg.method,
        "seed": cfg.seed,
        "num_layers": cfg.num_layers,
        "num_units": len(units),
    }
    store: dict = {"meta": np.array(json.dumps(meta))}
    for idx, (params, graph, test_edges) in enumerate(units):
        _pack_params(store, f"u{idx}", params)
        store[f"u{idx}/train_edges"] = graph.edges
        store[f"u{idx}/shape"] = np.array([graph.num_users, graph.num_items],
                                          dtype=np.int64)
        store[f"u{idx}/test_edges"] = np.asarray(test_edges, dtype=np.int64)
    np.savez(path, **store)


def load_checkpoint(path):
    """Returns (meta, units); see save_checkpoint."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('format_version')!r}"
            )
        units = []
        for idx in range(meta["num_units"]):
            params = _unpack_params(data, f"u{idx}", meta["num_layers"])
            n_users, n_items = (int(x) for x in data[f"u{idx}/shape"])
            graph, _, _ = build_graph(data[f"u{idx}/train_edges"],
                                      num_users=n_users, num_items=n_items)
            units.append((params, graph, data[f"u{idx}/test_edges"]))
    return meta, units


def eval_checkpoint(path, cfg: ExperimentConfig) -> dict:
    """Re-score a checkpoint at the config's K; returns per-unit + aggregate."""
    meta, units = load_checkpoint(path)
    per_unit = []
    for idx, (params, graph, test_edges) in enumerate(units):
        row = {"unit": idx, "n_test_edges": int(test_edges.shape[0])}
        if test_edges.shape[0]:
            res = evaluate(params, graph, test_edges, k=cfg.k_eval)
            row.update({m: res[m] for m in _EVAL_METRICS})
        per_unit.append(row)
    total = float(sum(r["n_test_edges"] for r in per_unit))
    agg = {}
    if total > 0:
        for metric in _EVAL_METRICS:
            num = sum(r[metric] * r["n_test_edges"] for r in per_unit if metric in r)
            agg[metric] = num / total
    return {"method": meta["method"], "k": cfg.k_eval,
            "per_unit": per_unit, "aggregate": agg}


# -- entry points --------------------------------------------------------------


def _metadata_record(cfg: ExperimentConfig, dataset_shape, summary, timing,
                     extra) -> dict:
    record = {
        "run_id": cfg.resolved_run_id(),
        "code_version": _code_version(),
        "config": cfg.as_dict(),
        "dataset": dataset_shape,
        "deviations": {
            "synthetic_dataset": cfg.dataset_format == "synthetic",
            "shared_encoder": cfg.shared_encoder,
            "adam_optimizer": cfg.optimizer == "adam",
            "deterministic_timing": cfg.deterministic_timing,
        },
        "summary": summary,
        "timing": timing,
    }
    record.update(extra)
    return record


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run one configured experiment; 0 on success, 1 with a message on error.

    Side effects under the run directory: metrics.csv, metadata.json,
    checkpoint.npz, and manifest.txt for federated methods.
    """
    try:
        t_start = time.perf_counter()
        run_dir = resolve_run_dir(cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        rng = Rng(cfg.seed)
        train_graph, holdout, d_global, locals_with_splits, result = \
            prepare_data(cfg, rng)
        dataset_shape = {
            "num_users": train_graph.num_users,
            "num_items": train_graph.num_items,
            "train_edges": train_graph.num_edges,
            "valid_edges": int(holdout.valid_edges.shape[0]),
            "test_edges": int(holdout.test_edges.shape[0]),
        }
        extra = {}

        if cfg.method == "centralized_ngcf":
            params, reports = _run_centralized(train_graph, holdout, cfg,
                                               rng.child("central"))
            rows = _centralized_rows(cfg, reports)
            final_agg = reports[-1]["aggregate"] if reports else {}
            round_secs = [rep["seconds"] for rep in reports]
            units = [(params, train_graph, holdout.test_edges)]
        else:
            write_manifest(run_dir / "manifest.txt", result)
            extra["heterogeneity_score"] = heterogeneity_score(
                result.plan, train_graph.user_degrees)
            fed_cfg = cfg.to_fed_config()
            fed_rng = rng.child("federation")
            clients = setup_clients(d_global, locals_with_splits, fed_cfg, fed_rng)
            reports = run_federation(d_global, clients, fed_cfg, fed_rng)
            rows = _federated_rows(cfg, reports)
            final_agg = dict(reports[-1].aggregate) if reports else {}
            if cfg.method not in _USES_SELECTION:
                final_agg.pop("selected_ratio", None)
            round_secs = [rep.seconds for rep in reports]
            units = [
                (c.params,
                 c.round_graph if c.round_graph is not None else c.d_local,
                 c.test_edges)
                for c in clients
            ]

        total_secs = time.perf_counter() - t_start
        rows.extend(_summary_rows(cfg, final_agg, total_secs))
        _write_csv(run_dir / "metrics.csv", rows, cfg.deterministic_timing)
        save_checkpoint(run_dir / "checkpoint.npz", cfg, units)
        record = _metadata_record(
            cfg, dataset_shape, final_agg,
            {"total_seconds": total_secs, "round_seconds": round_secs}, extra)
        (run_dir / "metadata.json").write_text(json.dumps(record, indent=2) + "\n")
        return 0
    except Exception as exc:
        print(f"fedgcf: error: {exc}", file=sys.stderr)
        return 1


def run_partition_only(cfg: ExperimentConfig) -> int:
    """Emit just the partition manifest (and report the heterogeneity score)."""
    try:
        if cfg.method == "centralized_ngcf":
            raise ValueError("centralized_ngcf does not partition data")
        run_dir = resolve_run_dir(cfg)
        run_dir.mkdir(parents=True, exist_ok=True)
        rng = Rng(cfg.seed)
        train_graph, _, _, _, result = prepare_data(cfg, rng, require_valid=False)
        write_manifest(run_dir / "manifest.txt", result)
        score = heterogeneity_score(result.plan, train_graph.user_degrees)
        print(f"manifest: {run_dir / 'manifest.txt'}")
        print(f"heterogeneity_score: {score!r}")
        return 0
    except Exception as exc:
        print(f"fedgcf: error: {exc}", file=sys.stderr)
        return 1
