"""Exhaustive ground truth for small search spaces.

Every architecture is instantiated, trained from scratch on the task's
train split and scored on its val split. Tables are cached as JSON keyed by
a fingerprint of (space, task, budget, seeds).
"""

from __future__ import annotations

import hashlib
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import optim
from . import space as S
from .data import Dataset

MAX_ENTRIES = 1000


@dataclass(frozen=True)
class TrainBudget:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    width: int = 16
    num_cells: int = 3


@dataclass
class OracleEntry:
    arch: S.Architecture
    val_accuracy: float
    train_loss: float
    seed: int


@dataclass
class OracleTable:
    spec: S.CellSpec
    entries: list[OracleEntry]
    task_fingerprint: str
    budget: TrainBudget
    seeds: tuple[int, ...]

    def architectures(self) -> list[S.Architecture]:
        seen = []
        for e in self.entries:
            if e.arch not in seen:
                seen.append(e.arch)
        return seen

    def mean_accuracy(self) -> dict[S.Architecture, float]:
        acc: dict[S.Architecture, list[float]] = {}
        for e in self.entries:
            acc.setdefault(e.arch, []).append(e.val_accuracy)
        return {a: float(np.mean(v)) for a, v in acc.items()}

    def best(self) -> S.Architecture:
        means = self.mean_accuracy()
        return max(means, key=lambda a: means[a])  # first in enumeration order on ties

    def __len__(self) -> int:
        return len(self.architectures())

    def to_json(self) -> dict:
        rows: dict[str, list] = {}
        for e in self.entries:
            rows.setdefault(e.arch.to_string(self.spec), []).append(
                {"seed": e.seed, "val_accuracy": e.val_accuracy, "train_loss": e.train_loss}
            )
        return {
            "spec": {"num_nodes": self.spec.num_nodes, "edges": self.spec.edges, "ops": self.spec.ops},
            "task_fingerprint": self.task_fingerprint,
            "budget": asdict(self.budget),
            "seeds": list(self.seeds),
            "entries": rows,
        }

    @classmethod
    def from_json(cls, d: dict) -> "OracleTable":
        sd = d["spec"]
        spec = S.CellSpec(sd["num_nodes"], tuple(map(tuple, sd["edges"])), tuple(sd["ops"]))
        entries = []
        for key, rows in d["entries"].items():
            arch = S.Architecture.from_string(key, spec)
            for r in rows:
                entries.append(OracleEntry(arch, r["val_accuracy"], r["train_loss"], r["seed"]))
        return cls(spec, entries, d["task_fingerprint"], TrainBudget(**d["budget"]), tuple(d["seeds"]))


def enumerate_architectures(spec: S.CellSpec) -> list[S.Architecture]:
    """All ops^edges architectures; lexicographic in op index, first edge slowest."""
    return [S.Architecture(c) for c in itertools.product(spec.ops, repeat=spec.num_edges)]


def train_network(net: S.Supernet, task: Dataset, budget: TrainBudget, seed: int) -> tuple[float, float]:
    """Plain SGD training; returns (val accuracy, mean train loss of the final epoch)."""
    state = optim.sgd(budget.lr, budget.momentum, budget.weight_decay)
    params = net.weights()
    train = task.train
    n_batches = len(train) // budget.batch_size
    last = 0.0
    for epoch in range(budget.epochs):
        perm = np.random.default_rng([seed, 11, epoch]).permutation(len(train))
        losses = []
        for i in range(n_batches):
            idx = perm[i * budget.batch_size : (i + 1) * budget.batch_size]
            with ad.Tape() as tape:
                loss, _ = S.loss_and_logits(net, train.x[idx], train.labels[idx])
            grads = tape.backward(loss)
            optim.step(params, [grads[p] for p in params], state)
            losses.append(loss.item())
        last = float(np.mean(losses)) if losses else float("nan")
    return S.accuracy(net, task.val.x, task.val.labels), last


def evaluate_architecture(arch: S.Architecture, spec: S.CellSpec, task: Dataset, budget: TrainBudget, seed: int):
    net = S.instantiate(arch, spec, task.input_dim, task.classes, budget.width, budget.num_cells, seed)
    acc, loss = train_network(net, task, budget, seed)
    return OracleEntry(arch, acc, loss, seed)


def _job(args):
    return evaluate_architecture(*args)


def fingerprint(spec: S.CellSpec, task: Dataset, budget: TrainBudget, seeds: Sequence[int]) -> str:
    blob = json.dumps(
        [spec.num_nodes, spec.edges, spec.ops, task.spec.fingerprint(), asdict(budget), list(seeds)],
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def evaluate_all(
    spec: S.CellSpec,
    task: Dataset,
    budget: TrainBudget = TrainBudget(),
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
    allow_large: bool = False,
    cache_dir=None,
) -> OracleTable:
    archs = enumerate_architectures(spec)
    if len(archs) > MAX_ENTRIES and not allow_large:
        raise ValueError(
            f"space has {len(archs)} architectures (> {MAX_ENTRIES}); pass allow_large=True to train them all"
        )
    key = fingerprint(spec, task, budget, seeds)
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"oracle-{key}.json"
        if path.exists():
            return OracleTable.from_json(json.loads(path.read_text()))
    jobs = [(a, spec, task, budget, s) for a in archs for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        entries = [_job(j) for j in jobs]
    table = OracleTable(spec, entries, key, budget, tuple(seeds))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(table.to_json(), indent=1, sort_keys=True) + "\n")
    return table


def rank_of(arch: S.Architecture, table: OracleTable) -> tuple[int, float]:
    """1-based rank by mean val accuracy (ties share the best rank) and rank / table size."""
    means = table.mean_accuracy()
    if arch not in means:
        raise KeyError(f"architecture {arch.choice} is not in the oracle table")
    mine = means[arch]
    rank = 1 + sum(1 for v in means.values() if v > mine)
    return rank, rank / len(means)


def linear_probe_accuracy(task: Dataset, steps: int = 500, lr: float = 0.05, seed: int = 0) -> float:
    """Softmax regression on raw inputs (full-batch Adam); returns val accuracy."""
    rng = np.random.default_rng([seed, 13])
    d, c = task.input_dim, task.classes
    w = ad.Tensor(rng.uniform(-1, 1, (c, d)) / np.sqrt(d), requires_grad=True, name="probe_w")
    b = ad.Tensor(np.zeros(c), requires_grad=True, name="probe_b")
    state = optim.adam(lr, betas=(0.9, 0.999))
    x, y = ad.Tensor(task.train.x), ad.one_hot(task.train.labels, c)
    for _ in range(steps):
        with ad.Tape() as tape:
            loss = ad.cross_entropy(ad.add_bias(ad.linear(x, w), b), y)
        g = tape.backward(loss)
        optim.step([w, b], [g[w], g[b]], state)
    pred = (task.val.x @ w.data.T + b.data).argmax(1)
    return float(np.mean(pred == task.val.labels))


def signal_critical_edges(table: OracleTable, arch: S.Architecture | None = None, drop: float = 0.05) -> list[int]:
    """Edges of ``arch`` whose op cannot be swapped for identity without losing > ``drop`` accuracy.

    On such an edge the transform itself carries the signal, so a
    non-learnable op there cannot stand in for it. Identity edges are never
    critical under this definition.
    """
    from .ops import SKIP

    arch = arch or table.best()
    if SKIP not in table.spec.ops:
        raise ValueError("signal-critical edges need an identity op in the space")
    means = table.mean_accuracy()
    out = []
    for e in range(table.spec.num_edges):
        if arch.choice[e] == SKIP:
            continue
        swapped = S.Architecture(arch.choice[:e] + (SKIP,) + arch.choice[e + 1 :])
        if means[arch] - means[swapped] > drop:
            out.append(e)
    return out
