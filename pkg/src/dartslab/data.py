"""Deterministic synthetic classification tasks.

``learnable_required`` labels are an even function of the input (the teacher
hidden layer comes in +/- relu pairs), so every linear read-out of the raw
input, and therefore every path made only of skip/zero/pool edges, sits near
chance. ``skip_friendly`` labels are a linear read-out of the input.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("learnable_required", "skip_friendly", "gaussian_clusters")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "learnable_required"
    input_dim: int = 16
    classes: int = 4
    n_train: int = 2048
    n_val: int = 512
    n_test: int = 512
    seed: int = 0
    teacher_hidden: int = 4
    teacher_cond_max: float = 10.0
    cluster_spread: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")
        if min(self.n_train, self.n_val, self.n_test, self.input_dim, self.classes) <= 0:
            raise ValueError("dataset sizes, input_dim and classes must be positive")

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Split:
    x: np.ndarray
    labels: np.ndarray
    indices: np.ndarray  # positions in the generating pool, for disjointness audits
    name: str = ""

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> "Split":
        idx = np.asarray(idx, dtype=int)
        return Split(self.x[idx], self.labels[idx], self.indices[idx], name or self.name)


@dataclass
class Dataset:
    spec: DatasetSpec
    train: Split
    val: Split
    test: Split
    teacher: dict = field(default_factory=dict)

    @property
    def classes(self) -> int:
        return self.spec.classes

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    def splits(self):
        return self.train, self.val, self.test


def clamp_condition(m: np.ndarray, cond_max: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    s = np.clip(s, s.max() / cond_max, None)
    return (u * s) @ vt


def _teacher(spec: DatasetSpec, rng: np.random.Generator) -> dict:
    d, c = spec.input_dim, spec.classes
    if spec.kind == "learnable_required":
        u = clamp_condition(rng.standard_normal((spec.teacher_hidden, d)), spec.teacher_cond_max)
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v = clamp_condition(rng.standard_normal((c, spec.teacher_hidden)), spec.teacher_cond_max)
        # hidden layer [relu(Ux); relu(-Ux)], read-out [V, V]  ==  V |Ux|;
        # b2 removes E|u_h^T x| = sqrt(2/pi) for unit-norm rows and x ~ N(0, I)
        b2 = -v.sum(axis=1) * np.sqrt(2.0 / np.pi)
        return {"w1": np.vstack([u, -u]), "w2": np.hstack([v, v]), "b2": b2}
    if spec.kind == "skip_friendly":
        return {"v": clamp_condition(rng.standard_normal((c, d)), spec.teacher_cond_max)}
    return {"means": rng.standard_normal((c, d)) * spec.cluster_spread}


def teacher_logits(teacher: dict, x: np.ndarray) -> np.ndarray:
    if "w1" in teacher:
        return np.maximum(x @ teacher["w1"].T, 0.0) @ teacher["w2"].T + teacher["b2"]
    if "v" in teacher:
        return x @ teacher["v"].T
    d2 = ((x[:, None, :] - teacher["means"][None]) ** 2).sum(-1)
    return -d2


def _quotas(n: int, classes: int) -> np.ndarray:
    q = np.full(classes, n // classes)
    q[: n % classes] += 1
    return q


def _draw_balanced(spec, teacher, rng, n_total):
    """Rejection-sample a pool whose labels are as balanced as possible."""
    quota = _quotas(n_total, spec.classes)
    xs, ys = [], []
    have = np.zeros(spec.classes, dtype=int)
    for _ in range(1000):
        if np.all(have >= quota):
            break
        if spec.kind == "gaussian_clusters":
            lab = rng.integers(spec.classes, size=4 * n_total)
            x = teacher["means"][lab] + rng.standard_normal((4 * n_total, spec.input_dim))
            y = teacher_logits(teacher, x).argmax(1)
        else:
            x = rng.standard_normal((4 * n_total, spec.input_dim))
            y = teacher_logits(teacher, x).argmax(1)
        for c in range(spec.classes):
            need = quota[c] - have[c]
            if need <= 0:
                continue
            take = np.flatnonzero(y == c)[:need]
            xs.append(x[take])
            ys.append(y[take])
            have[c] += len(take)
    else:
        raise RuntimeError("could not draw a balanced pool; teacher is too skewed")
    x, y = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def _stratified_parts(labels: np.ndarray, sizes, rng) -> list[np.ndarray]:
    """Split positions into parts of ``sizes`` keeping every part class-balanced."""
    classes = int(labels.max()) + 1
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(classes)]
    left = np.array([len(p) for p in per_class])
    if sum(sizes) > left.sum():
        raise ValueError(f"cannot take {sum(sizes)} samples from {left.sum()}")
    parts = []
    offsets = np.zeros(classes, dtype=int)
    # classes that get the extra sample rotate so leftovers stay spread out
    shift = 0
    for size in sizes:
        quota = np.zeros(classes, dtype=int)
        order = np.roll(np.arange(classes), -shift)
        for _ in range(size):
            # next sample goes to the class that stays best supplied, i.e. fewest
            # taken so far among classes that still have samples left
            avail = order[left[order] > quota[order]]
            quota[avail[np.argmin(quota[avail])]] += 1
        shift += size % classes
        chunk = []
        for c in range(classes):
            chunk.append(per_class[c][offsets[c] : offsets[c] + quota[c]])
            offsets[c] += quota[c]
        left -= quota
        parts.append(np.sort(np.concatenate(chunk)))
    return parts


def generate(spec: DatasetSpec) -> Dataset:
    rng = np.random.default_rng([spec.seed, KINDS.index(spec.kind)])
    teacher = _teacher(spec, rng)
    n = spec.n_train + spec.n_val + spec.n_test
    x, y = _draw_balanced(spec, teacher, rng, n)
    idx = _stratified_parts(y, (spec.n_train, spec.n_val, spec.n_test), rng)
    pool = Split(x, y, np.arange(n))
    train, val, test = (pool.subset(i, name) for i, name in zip(idx, ("train", "val", "test")))
    return Dataset(spec, train, val, test, teacher)


def split_for_bilevel(train: Split, seed: int = 0) -> tuple[Split, Split]:
    """Disjoint, class-balanced 50/50 split of ``train`` into (w_subset, alpha_subset)."""
    n = len(train)
    rng = np.random.default_rng([seed, 0xB11E])
    keep = np.arange(n)
    if n % 2:
        drop = int(rng.integers(n))
        log.warning("split_for_bilevel: odd train size %d, dropping sample %d", n, drop)
        keep = np.delete(keep, drop)
    sub = train.subset(keep)
    a, b = _stratified_parts(sub.labels, (len(keep) // 2, len(keep) // 2), rng)
    return sub.subset(a, "w_subset"), sub.subset(b, "alpha_subset")


def assert_disjoint(*splits: Split) -> None:
    seen: set[int] = set()
    for s in splits:
        ids = set(s.indices.tolist())
        if len(ids) != len(s) or ids & seen:
            raise AssertionError(f"split {s.name!r} overlaps another split")
        seen |= ids


# -- binary cache -------------------------------------------------------------
# layout: b"DLDS" | u32 header_len | header json | per split: x (f64 row-major),
# labels (i64), indices (i64). Header lists split names and row counts.

MAGIC = b"DLDS"


def save(ds: Dataset, path) -> Path:
    path = Path(path)
    header = {
        "spec": asdict(ds.spec),
        "splits": [[s.name, len(s)] for s in ds.splits()],
        "teacher": {k: np.asarray(v).tolist() for k, v in ds.teacher.items()},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(blob)) + blob)
        for s in ds.splits():
            fh.write(np.ascontiguousarray(s.x, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(s.indices, dtype="<i8").tobytes())
    return path


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a dataset cache file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen])
    spec = DatasetSpec(**header["spec"])
    pos = 8 + hlen
    splits = []
    for name, n in header["splits"]:
        x = np.frombuffer(raw, "<f8", n * spec.input_dim, pos).reshape(n, spec.input_dim).copy()
        pos += 8 * n * spec.input_dim
        lab = np.frombuffer(raw, "<i8", n, pos).astype(int)
        pos += 8 * n
        ids = np.frombuffer(raw, "<i8", n, pos).astype(int)
        pos += 8 * n
        splits.append(Split(x, lab, ids, name))
    teacher = {k: np.asarray(v) for k, v in header["teacher"].items()}
    return Dataset(spec, *splits, teacher=teacher)


def cached(spec: DatasetSpec, cache_dir) -> Dataset:
    path = Path(cache_dir) / f"dataset-{spec.fingerprint()}.bin"
    if path.exists():
        return load(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = generate(spec)
    save(ds, path)
    return ds
