"""Global/local data splitting and client partitioning.

The split unit is the user: a shuffled greedy walk claims users for the shared
global pool until it carries the requested fraction of edge mass, and the rest
are dealt to clients either uniformly (round-robin over a degree-sorted
shuffle, balancing edge mass) or by degree-skewed Dirichlet draws (non-IID).

The heterogeneity score is adjusted mutual information between the client
assignment and a canonical degree-balanced reference assignment, so higher
means closer to an ideal IID split (a uniform plan scores high, a skewed
Dirichlet plan scores near zero).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import adjusted_mutual_info_score

from .graph import IdMap, InteractionGraph, subgraph
from .rng import Rng

__all__ = [
    "PartitionPlan",
    "global_local_split",
    "heterogeneity_score",
    "decile_labels",
    "reference_labels",
    "write_manifest",
    "read_manifest",
]

MODES = ("uniform", "dirichlet")


@dataclass
class PartitionPlan:
    """User assignment produced by one split: global pool plus K client sets."""

    num_users: int
    global_users: np.ndarray            # sorted user indices
    client_users: list[np.ndarray]      # K sorted, pairwise disjoint index arrays
    mode: str
    concentration: float | None
    seed: int

    def __post_init__(self):
        self.global_users = np.asarray(self.global_users, dtype=np.int64)
        self.client_users = [np.asarray(c, dtype=np.int64) for c in self.client_users]
        seen = set(self.global_users.tolist())
        for k, users in enumerate(self.client_users):
            for u in users.tolist():
                if u in seen:
                    raise ValueError(f"user {u} assigned twice (client {k})")
                seen.add(u)
        if seen and (min(seen) < 0 or max(seen) >= self.num_users):
            raise ValueError("assignment contains out-of-range user index")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def num_clients(self) -> int:
        return len(self.client_users)

    def client_labels(self) -> tuple[np.ndarray, np.ndarray]:
        """(local_users, labels): every client user with its client index."""
        users = np.concatenate(self.client_users) if self.client_users else np.array([], np.int64)
        labels = np.concatenate(
            [np.full(len(c), k, dtype=np.int64) for k, c in enumerate(self.client_users)]
        ) if self.client_users else np.array([], np.int64)
        order = np.argsort(users)
        return users[order], labels[order]


def _degree_sorted(users: np.ndarray, degrees: np.ndarray, rng: Rng | None) -> np.ndarray:
    """Users ordered by degree descending; ties shuffled (or by index if rng is None)."""
    users = np.asarray(users, dtype=np.int64)
    if rng is not None:
        users = rng.permutation(users)
    # stable sort keeps the (shuffled or index) order within equal degrees
    order = np.argsort(-degrees[users], kind="stable")
    return users[order]


def global_local_split(
    graph: InteractionGraph,
    global_edge_frac: float,
    num_clients: int,
    mode: str = "uniform",
    concentration: float | None = None,
    rng: Rng | None = None,
    seed: int | None = None,
) -> tuple[InteractionGraph, list[InteractionGraph], "SplitResult"]:
    """Split a graph into a global pool and `num_clients` local shards.

    Returns (global_graph, local_graphs, result) where the graphs are
    user-subgraphs over the shared item catalog and `result` bundles the plan
    with the user ID maps of each extracted subgraph.
    """
    if not 0.0 <= global_edge_frac < 1.0:
        raise ValueError(f"global_edge_frac must be in [0, 1), got {global_edge_frac}")
    if num_clients < 1:
        raise ValueError(f"need at least one client, got {num_clients}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "dirichlet":
        if concentration is None or concentration <= 0:
            raise ValueError("dirichlet mode needs a positive concentration")
    if rng is None:
        rng = Rng(seed if seed is not None else 0)
    seed_val = seed if seed is not None else rng.seed

    degrees = graph.user_degrees
    target = global_edge_frac * graph.num_edges
    walk = rng.child("global-pool").permutation(graph.num_users)
    mass = 0
    cut = 0
    while cut < len(walk) and mass < target:
        mass += int(degrees[walk[cut]])
        cut += 1
    global_users = np.sort(walk[:cut])
    remaining = np.sort(walk[cut:])
    if remaining.size < num_clients:
        raise ValueError(
            f"{remaining.size} users remain after the global pool but {num_clients} "
            "clients were requested"
        )

    if mode == "uniform":
        dealt = _degree_sorted(remaining, degrees, rng.child("uniform-ties"))
        client_sets = [np.sort(dealt[k::num_clients]) for k in range(num_clients)]
    else:
        buckets = decile_labels(degrees[remaining])
        assign = np.empty(remaining.size, dtype=np.int64)
        draw_rng = rng.child("dirichlet")
        for b in range(10):
            members = np.flatnonzero(buckets == b)
            if members.size == 0:
                continue
            props = draw_rng.dirichlet(np.full(num_clients, concentration))
            assign[members] = draw_rng.choice(num_clients, size=members.size, p=props)
        # guarantee no empty client: donate from the largest one
        for k in range(num_clients):
            if not (assign == k).any():
                counts = np.bincount(assign, minlength=num_clients)
                donor = int(np.argmax(counts))
                assign[np.flatnonzero(assign == donor)[0]] = k
        client_sets = [np.sort(remaining[assign == k]) for k in range(num_clients)]

    plan = PartitionPlan(
        num_users=graph.num_users,
        global_users=global_users,
        client_users=client_sets,
        mode=mode,
        concentration=concentration,
        seed=seed_val,
    )
    global_graph, global_map = subgraph(graph, global_users)
    locals_: list[InteractionGraph] = []
    local_maps: list[IdMap] = []
    for users in client_sets:
        g, m = subgraph(graph, users)
        locals_.append(g)
        local_maps.append(m)
    return global_graph, locals_, SplitResult(plan=plan, global_map=global_map,
                                              client_maps=local_maps)


@dataclass
class SplitResult:
    """Plan plus the user ID maps of the extracted subgraphs."""

    plan: PartitionPlan
    global_map: IdMap
    client_maps: list[IdMap] = field(default_factory=list)


def decile_labels(degrees: np.ndarray) -> np.ndarray:
    """Bucket index 0..9 per entry, by rank of degree (descending, ties by index)."""
    degrees = np.asarray(degrees)
    n = degrees.size
    order = np.argsort(-degrees, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return np.minimum(ranks * 10 // max(n, 1), 9)


def reference_labels(users: np.ndarray, degrees: np.ndarray, num_clients: int) -> np.ndarray:
    """Canonical balanced assignment: degree-sorted (ties by index), dealt mod K."""
    users = np.asarray(users, dtype=np.int64)
    order = np.argsort(-degrees[users], kind="stable")
    labels = np.empty(users.size, dtype=np.int64)
    labels[order] = np.arange(users.size) % num_clients
    return labels


def heterogeneity_score(plan: PartitionPlan, user_degrees: np.ndarray) -> float:
    """Adjusted mutual information between the plan and the balanced reference.

    Labeling (a) is the plan's client assignment over its client users;
    labeling (b) deals the same users round-robin over their degree-sorted
    order, the ideal edge-balanced split. Identical labelings score 1.0,
    independent ones ~0 (chance-corrected); a skewed plan scores near zero.
    """
    users, labels = plan.client_labels()
    if users.size == 0:
        raise ValueError("plan has no client users")
    degrees = np.asarray(user_degrees)
    if degrees.shape[0] < plan.num_users:
        raise ValueError("user_degrees shorter than the plan's user space")
    ref = reference_labels(users, degrees, plan.num_clients)
    if len(np.unique(labels)) < 2 or len(np.unique(ref)) < 2:
        return 0.0
    return float(adjusted_mutual_info_score(labels, ref, average_method="arithmetic"))


# -- manifest ----------------------------------------------------------------


def write_manifest(path, result: SplitResult) -> None:
    """One line per assigned user: `user_id,assignment` plus # metadata header."""
    plan = result.plan
    lines = [
        f"# mode={plan.mode}",
        f"# concentration={'' if plan.concentration is None else plan.concentration}",
        f"# seed={plan.seed}",
        f"# num_users={plan.num_users}",
        f"# num_clients={plan.num_clients}",
    ]
    for u in plan.global_users:
        lines.append(f"{u},global")
    for k, users in enumerate(plan.client_users):
        for u in users:
            lines.append(f"{u},client_{k}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> PartitionPlan:
    meta: dict[str, str] = {}
    global_users: list[int] = []
    clients: dict[int, list[int]] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
            continue
        user_s, _, assignment = line.partition(",")
        try:
            user = int(user_s)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed user id {user_s!r}") from None
        if assignment == "global":
            global_users.append(user)
        elif assignment.startswith("client_"):
            clients.setdefault(int(assignment[len("client_"):]), []).append(user)
        else:
            raise ValueError(f"{path}:{lineno}: unknown assignment {assignment!r}")
    num_clients = int(meta.get("num_clients", len(clients)))
    conc = meta.get("concentration", "")
    return PartitionPlan(
        num_users=int(meta["num_users"]),
        global_users=np.array(sorted(global_users), dtype=np.int64),
        client_users=[
            np.array(sorted(clients.get(k, [])), dtype=np.int64) for k in range(num_clients)
        ],
        mode=meta.get("mode", "uniform"),
        concentration=float(conc) if conc else None,
        seed=int(meta.get("seed", 0)),
    )
