"""Experiment configuration.

Config files are flat `key = value` text: one assignment per line, blank lines
and full-line `#` comments ignored. Every key has a default, so an empty file
is a valid config. CLI `--set key=value` pairs override file keys.

Schema (defaults in parentheses):

  dataset            path to the dataset file, or "synthetic" (synthetic)
  dataset_format     movielens | edge_list | adjacency | synthetic (synthetic)
  synthetic_users    user count for the synthetic generator (943)
  synthetic_items    item count (1682)
  synthetic_edges    interaction count (99975)
  synthetic_seed     generator seed, independent of the run seed (7)
  method             fedngcf | fedgdve | fedgdve_no_sl | fedgdve_no_gdve
                     | centralized_ngcf (fedgdve)
  num_clients        participating clients (10)
  global_edge_frac   fraction of edges pooled as shared global data (0.5)
  partition_mode     uniform | dirichlet (uniform)
  concentration      dirichlet concentration, ignored for uniform (0.5)
  dim                embedding dimensionality (64)
  num_layers         propagation layers (3)
  even_layers        comma list of contrastive target layers; empty means
                     every even layer in 1..num_layers ()
  tau                contrastive temperature (0.1)
  reg_lambda         L2 coefficient (1e-4)
  lr                 model learning rate (0.004)
  gdve_lr            value-estimator learning rate (0.007)
  batch_size         ranking-loss batch size (1024)
  epochs_per_round   local epochs per communication round (2)
  rounds             communication rounds (30)
  k_eval             ranking cutoff K (100)
  train_frac         per-user holdout fractions, must sum to 1 (0.8)
  valid_frac         (0.1)
  test_frac          (0.1)
  gdve_batch_size    global users per estimator batch (1024)
  gdve_max_batches   estimator training budget (500)
  gdve_plateau_window  batches without reward improvement before stopping (20)
  gdve_plateau_tol   minimum EMA-reward improvement counted as progress (1e-4)
  gdve_ema_decay     reward baseline decay (0.9)
  gdve_burn_in       batches with task updates but frozen policy (0)
  gdve_task_batch_size  task-predictor batch size (1024)
  pretrain_epochs    encoder and valid-predictor pretraining epochs (10)
  optimizer          adam | sgd (adam)
  struc_weight       structure-loss weight where the method uses it (1.0)
  shared_encoder     reuse one global encoder across clients (false)
  workers            parallel client cap (1)
  seed               run seed (0)
  run_id             output subdirectory name; empty derives method-seed ()
  output_dir         root directory for run outputs (runs)
  deterministic_timing  write 0.000 in the CSV seconds column so repeated
                     seeds produce byte-identical files; real wall times go
                     to the metadata record (true)
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .federation import METHODS, FedConfig
from .partition import MODES

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config_text",
    "parse_overrides",
    "load_config",
    "config_from_items",
]

DATASET_FORMATS = ("movielens", "edge_list", "adjacency", "synthetic")


class ConfigError(ValueError):
    """A named configuration problem; `key` is the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    """Resolved experiment settings; validated on construction."""

    dataset: str = "synthetic"
    dataset_format: str = "synthetic"
    synthetic_users: int = 943
    synthetic_items: int = 1682
    synthetic_edges: int = 99975
    synthetic_seed: int = 7
    method: str = "fedgdve"
    num_clients: int = 10
    global_edge_frac: float = 0.5
    partition_mode: str = "uniform"
    concentration: float = 0.5
    dim: int = 64
    num_layers: int = 3
    even_layers: tuple = ()
    tau: float = 0.1
    reg_lambda: float = 1e-4
    lr: float = 0.004
    gdve_lr: float = 0.007
    batch_size: int = 1024
    epochs_per_round: int = 2
    rounds: int = 30
    k_eval: int = 100
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    gdve_batch_size: int = 1024
    gdve_max_batches: int = 500
    gdve_plateau_window: int = 20
    gdve_plateau_tol: float = 1e-4
    gdve_ema_decay: float = 0.9
    gdve_burn_in: int = 0
    gdve_task_batch_size: int = 1024
    gdve_mask_samples: int = 1
    pretrain_epochs: int = 10
    optimizer: str = "adam"
    struc_weight: float = 1.0
    shared_encoder: bool = False
    workers: int = 1
    seed: int = 0
    run_id: str = ""
    output_dir: str = "runs"
    deterministic_timing: bool = True

    def __post_init__(self):
        self.even_layers = tuple(self.even_layers)
        self.validate()

    def validate(self) -> None:
        def check(key, ok, message):
            if not ok:
                raise ConfigError(key, message)

        check("dataset", bool(self.dataset), "must not be empty")
        check("dataset_format", self.dataset_format in DATASET_FORMATS,
              f"must be one of {DATASET_FORMATS}, got {self.dataset_format!r}")
        check("method", self.method in METHODS,
              f"must be one of {METHODS}, got {self.method!r}")
        for key in ("synthetic_users", "synthetic_items", "synthetic_edges"):
            check(key, getattr(self, key) >= 1, "must be at least 1")
        check("num_clients", self.num_clients >= 1, "must be at least 1")
        check("global_edge_frac", 0.0 <= self.global_edge_frac < 1.0,
              f"must be in [0, 1), got {self.global_edge_frac}")
        check("partition_mode", self.partition_mode in MODES,
              f"must be one of {MODES}, got {self.partition_mode!r}")
        check("concentration", self.concentration > 0,
              f"must be positive, got {self.concentration}")
        check("dim", self.dim >= 1, "must be at least 1")
        check("num_layers", self.num_layers >= 1, "must be at least 1")
        for ell in self.even_layers:
            check("even_layers",
                  isinstance(ell, int) and 1 <= ell <= self.num_layers and ell % 2 == 0,
                  f"entries must be even layers in 1..{self.num_layers}, got {ell}")
        check("tau", self.tau > 0, f"must be positive, got {self.tau}")
        check("reg_lambda", self.reg_lambda >= 0, "must be non-negative")
        check("lr", self.lr > 0, f"must be positive, got {self.lr}")
        check("gdve_lr", self.gdve_lr > 0, f"must be positive, got {self.gdve_lr}")
        check("batch_size", self.batch_size >= 1, "must be at least 1")
        check("epochs_per_round", self.epochs_per_round >= 0, "must be non-negative")
        check("rounds", self.rounds >= 0, "must be non-negative")
        check("k_eval", self.k_eval >= 1, f"must be at least 1, got {self.k_eval}")
        for key in ("train_frac", "valid_frac", "test_frac"):
            val = getattr(self, key)
            check(key, 0.0 < val < 1.0, f"must be in (0, 1), got {val}")
        total = self.train_frac + self.valid_frac + self.test_frac
        check("train_frac", abs(total - 1.0) <= 1e-9,
              f"split fractions must sum to 1, got {total}")
        check("gdve_batch_size", self.gdve_batch_size >= 1, "must be at least 1")
        check("gdve_max_batches", self.gdve_max_batches >= 0, "must be non-negative")
        check("gdve_plateau_window", self.gdve_plateau_window >= 1, "must be at least 1")
        check("gdve_plateau_tol", self.gdve_plateau_tol >= 0, "must be non-negative")
        check("gdve_ema_decay", 0.0 <= self.gdve_ema_decay < 1.0,
              f"must be in [0, 1), got {self.gdve_ema_decay}")
        check("gdve_burn_in", self.gdve_burn_in >= 0, "must be non-negative")
        check("gdve_task_batch_size", self.gdve_task_batch_size >= 1, "must be at least 1")
        check("gdve_mask_samples", self.gdve_mask_samples >= 1, "must be at least 1")
        check("pretrain_epochs", self.pretrain_epochs >= 0, "must be non-negative")
        check("optimizer", self.optimizer in ("adam", "sgd"),
              f"must be adam or sgd, got {self.optimizer!r}")
        check("struc_weight", self.struc_weight >= 0, "must be non-negative")
        check("workers", self.workers >= 1, "must be at least 1")
        check("seed", self.seed >= 0, "must be non-negative")

    def resolved_run_id(self) -> str:
        return self.run_id or f"{self.method}-seed{self.seed}"

    def to_fed_config(self) -> FedConfig:
        return FedConfig(
            method=self.method,
            rounds=self.rounds,
            epochs_per_round=self.epochs_per_round,
            lr=self.lr,
            reg_lambda=self.reg_lambda,
            tau=self.tau,
            dim=self.dim,
            num_layers=self.num_layers,
            even_layers=self.even_layers,
            batch_size=self.batch_size,
            k_eval=self.k_eval,
            optimizer=self.optimizer,
            struc_weight=self.struc_weight,
            workers=self.workers,
            pretrain_epochs=self.pretrain_epochs,
            gdve_batch_size=self.gdve_batch_size,
            gdve_lr=self.gdve_lr,
            gdve_max_batches=self.gdve_max_batches,
            gdve_plateau_window=self.gdve_plateau_window,
            gdve_plateau_tol=self.gdve_plateau_tol,
            gdve_ema_decay=self.gdve_ema_decay,
            gdve_task_batch_size=self.gdve_task_batch_size,
            gdve_burn_in=self.gdve_burn_in,
            gdve_mask_samples=self.gdve_mask_samples,
            shared_encoder=self.shared_encoder,
        )

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = list(val) if isinstance(val, tuple) else val
        return out


# -- parsing -------------------------------------------------------------------

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(key: str, text: str):
    """Turn a raw string into the field's declared type."""
    if key not in _FIELD_TYPES:
        raise ConfigError(key, "unknown key")
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind == "tuple":
            if not text:
                return ()
            return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> string value pairs; malformed or duplicate lines are errors."""
    items: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in items:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


def parse_overrides(pairs) -> dict:
    """CLI `--set key=value` pairs to a raw string map; later pairs win."""
    items: dict = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"override must be key=value, got {pair!r}")
        items[key.strip()] = value.strip()
    return items


def config_from_items(items) -> ExperimentConfig:
    """Coerce raw string values and construct (validation runs on init)."""
    kwargs = {key: _coerce(key, value) for key, value in items.items()}
    return ExperimentConfig(**kwargs)


def load_config(path, overrides=None) -> ExperimentConfig:
    """Read a flat key=value file, apply overrides, validate."""
    items = parse_config_text(Path(path).read_text(), source=str(path))
    items.update(overrides or {})
    return config_from_items(items)
