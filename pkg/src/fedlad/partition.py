"""Client data partitioning (IID and Dirichlet label skew)."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .logs import Dataset

IID = "iid"
NONIID = "noniid"


@dataclass
class PartitionPlan:
    assignments: list[int]
    k: int
    regime: str
    seed: int
    alpha: float | None = None

    def sizes(self) -> list[int]:
        return np.bincount(np.asarray(self.assignments, dtype=np.int64), minlength=self.k).tolist()

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "regime": self.regime, "alpha": self.alpha,
                           "seed": self.seed, "assignments": self.assignments})

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        obj = json.loads(text)
        return cls(list(obj["assignments"]), obj["k"], obj["regime"], obj["seed"], obj.get("alpha"))


def _check_k(n: int, k: int) -> None:
    if k < 1:
        raise ValueError("client count must be >= 1")
    if k > n:
        raise ValueError(f"too many clients: k={k} exceeds dataset size {n}")


def split_iid(dataset: Dataset, k: int, seed: int) -> PartitionPlan:
    n = len(dataset)
    _check_k(n, k)
    perm = np.random.default_rng(seed).permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    for client, chunk in enumerate(np.array_split(perm, k)):
        assignments[chunk] = client
    return PartitionPlan(assignments.tolist(), k, IID, seed)


def split_noniid(dataset: Dataset, k: int, alpha: float, seed: int) -> PartitionPlan:
    """Dirichlet label skew: each class is spread over clients by p ~ Dir(alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    n = len(dataset)
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    labels = dataset.label_vector()
    assignments = np.empty(n, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        p = rng.dirichlet(np.full(k, alpha))
        if not np.all(np.isfinite(p)):
            p = np.full(k, 1.0 / k)
        cuts = np.floor(np.cumsum(p)[:-1] * len(idx)).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            assignments[part] = client
    # empty clients each take one sequence from the currently largest client
    for client in range(k):
        sizes = np.bincount(assignments, minlength=k)
        if sizes[client] == 0:
            donor = int(np.argmax(sizes))
            victim = int(np.flatnonzero(assignments == donor)[-1])
            assignments[victim] = client
    return PartitionPlan(assignments.tolist(), k, NONIID, seed, float(alpha))


def materialize(plan: PartitionPlan, dataset: Dataset) -> list[Dataset]:
    if len(plan.assignments) != len(dataset):
        raise ValueError("partition plan does not match dataset size")
    buckets: list[list[int]] = [[] for _ in range(plan.k)]
    for i, client in enumerate(plan.assignments):
        buckets[client].append(i)
    return [dataset.subset(b) for b in buckets]


def train_val_split(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified seeded split; the validation part stays on the server."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    labels = dataset.label_vector()
    val_idx = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        val_idx.extend(idx[: int(round(val_fraction * len(idx)))].tolist())
    val_set = set(val_idx)
    train_idx = [i for i in range(len(dataset)) if i not in val_set]
    return dataset.subset(train_idx), dataset.subset(sorted(val_idx))


def max_class_share(shards: list[Dataset]) -> list[float]:
    """Per-client share of the client's most frequent label."""
    out = []
    for shard in shards:
        counts = np.bincount(shard.label_vector(), minlength=2)
        out.append(float(counts.max() / counts.sum()) if counts.sum() else 0.0)
    return out
