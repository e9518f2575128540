"""Mixed edges, cell DAGs, the weight-sharing supernet and discretisation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import ops as O
from .autodiff import Tensor

SOFTMAX = "softmax"
SIGMOID = "sigmoid"
ACTIVATIONS = (SOFTMAX, SIGMOID)

SIGMOID_INIT = -math.log(7.0)  # sigmoid(-ln 7) = 1/8


@dataclass(frozen=True)
class CellSpec:
    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    ops: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "ops", tuple(O.canonical(k) for k in self.ops))
        for a, b in self.edges:
            if not 0 <= a < b < self.num_nodes:
                raise ValueError(f"edge ({a}, {b}) must satisfy 0 <= from < to < {self.num_nodes}")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edge in cell spec")

    @classmethod
    def full(cls, num_nodes: int, ops: Sequence[str]) -> "CellSpec":
        """Dense DAG, edges ordered by target then source (NAS-Bench-201 order)."""
        edges = tuple((i, j) for j in range(1, num_nodes) for i in range(j))
        return cls(num_nodes, edges, tuple(ops))

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.ops)

    def incoming(self, node: int) -> list[int]:
        return [k for k, (_, b) in enumerate(self.edges) if b == node]

    def learnable_mask(self) -> np.ndarray:
        return np.array([O.is_learnable(k) for k in self.ops])

    def edge_label(self, e: int) -> str:
        a, b = self.edges[e]
        return f"{b}<-{a}"


NAS201_DESK = CellSpec.full(4, O.OP_NAMES)
MICRO = CellSpec.full(3, (O.NONE, O.SKIP, O.CONV3))

SPACES = {"nas201-desk": NAS201_DESK, "micro": MICRO}


def get_space(name: str) -> CellSpec:
    try:
        return SPACES[name]
    except KeyError:
        raise ValueError(f"unknown space {name!r}; expected one of {sorted(SPACES)}") from None


# -- architecture parameters --------------------------------------------------


class AlphaSet:
    def __init__(self, alpha, activation: str = SOFTMAX):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.alpha = alpha if isinstance(alpha, Tensor) else Tensor(alpha, requires_grad=True)
        self.alpha.requires_grad = True
        self.activation = activation

    @classmethod
    def initial(cls, spec: CellSpec, activation: str = SOFTMAX, value: float | None = None):
        if value is None:
            value = SIGMOID_INIT if activation == SIGMOID else 0.0
        return cls(np.full((spec.num_edges, spec.num_ops), value), activation)

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def probs_tensor(self) -> Tensor:
        if self.activation == SOFTMAX:
            return ad.softmax(self.alpha)
        if self.activation == SIGMOID:
            return ad.sigmoid(self.alpha)
        raise ValueError("activation unset")

    def probabilities(self) -> np.ndarray:
        return self.probs_tensor().data.copy()

    def copy(self) -> "AlphaSet":
        return AlphaSet(self.alpha.data.copy(), self.activation)

    def to_dict(self) -> dict:
        return {"activation": self.activation, "alpha": self.alpha.data.tolist()}


# -- discrete architectures ---------------------------------------------------


@dataclass(frozen=True)
class Architecture:
    choice: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "choice", tuple(O.canonical(k) for k in self.choice))

    def indices(self, spec: CellSpec) -> tuple[int, ...]:
        try:
            return tuple(spec.ops.index(k) for k in self.choice)
        except ValueError:
            bad = [k for k in self.choice if k not in spec.ops]
            raise ValueError(f"op kind(s) {bad} not in search space {spec.ops}") from None

    def check(self, spec: CellSpec) -> None:
        if len(self.choice) != spec.num_edges:
            raise ValueError(f"architecture has {len(self.choice)} edges, spec has {spec.num_edges}")
        self.indices(spec)

    def to_string(self, spec: CellSpec) -> str:
        """NAS-Bench-201 style ``|op~0|+|op~0|op~1|+...`` grouped by target node."""
        self.check(spec)
        groups = []
        for node in range(1, spec.num_nodes):
            parts = [f"{self.choice[e]}~{spec.edges[e][0]}" for e in spec.incoming(node)]
            groups.append("|" + "|".join(parts) + "|")
        return "+".join(groups)

    @classmethod
    def from_string(cls, text: str, spec: CellSpec) -> "Architecture":
        choice: list[str | None] = [None] * spec.num_edges
        for node, group in enumerate(text.split("+"), start=1):
            for token in filter(None, group.split("|")):
                name, src = token.rsplit("~", 1)
                choice[spec.edges.index((int(src), node))] = name
        if any(c is None for c in choice):
            raise ValueError(f"architecture string {text!r} does not cover every edge")
        arch = cls(tuple(choice))
        arch.check(spec)
        return arch

    def to_json(self) -> str:
        return json.dumps(list(self.choice))

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        return cls(tuple(json.loads(text)))

    def learnable_edges(self) -> np.ndarray:
        return np.array([O.is_learnable(k) for k in self.choice])


def discretize(alphas: AlphaSet, spec: CellSpec) -> Architecture:
    """Per-edge argmax of the activation; ties go to the lowest op index.

    Sigmoid and softmax are monotone per edge, so the raw alpha argmax is
    used; this also avoids ties manufactured by saturation.
    """
    a = alphas.alpha.data
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot discretize non-finite alphas")
    return Architecture(tuple(spec.ops[int(np.argmax(row))] for row in a))


def one_hot_probs(arch: Architecture, spec: CellSpec) -> np.ndarray:
    p = np.zeros((spec.num_edges, spec.num_ops))
    p[np.arange(spec.num_edges), arch.indices(spec)] = 1.0
    return p


# -- networks -----------------------------------------------------------------


def _op_seed(seed: int, cell: int, edge: int, op_index: int) -> list[int]:
    return [seed, 1, cell, edge, op_index]


def _linear_init(rng, out_dim, in_dim):
    bound = 1.0 / math.sqrt(in_dim)
    w = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(out_dim,)), requires_grad=True)
    return w, b


@dataclass
class EdgeProbe:
    """Forward-time capture of one mixed edge, read back after backward."""

    cell: int
    edge: int
    inputs: Tensor
    outputs: list[Tensor]
    mixed: Tensor


@dataclass
class Supernet:
    spec: CellSpec
    input_dim: int
    classes: int
    width: int
    stem: tuple[Tensor, Tensor]
    cells: list[list[list[O.CandidateOp]]]  # [cell][edge][op]
    head: tuple[Tensor, Tensor]
    alphas: AlphaSet | None = None
    fixed_probs: np.ndarray | None = None
    seed: int = 0
    probes: list[EdgeProbe] = field(default_factory=list, repr=False)
    last_probs: Tensor | None = field(default=None, repr=False)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    def weights(self) -> list[Tensor]:
        params = [*self.stem]
        for cell in self.cells:
            for edge_ops in cell:
                for op in edge_ops:
                    params.extend(op.parameters())
        params.extend(self.head)
        return params

    def arch_parameters(self) -> list[Tensor]:
        return [] if self.alphas is None else [self.alphas.alpha]

    def is_discrete(self) -> bool:
        return all(len(edge_ops) == 1 for cell in self.cells for edge_ops in cell)


def build_supernet(
    spec: CellSpec,
    input_dim: int,
    classes: int,
    width: int = 16,
    num_cells: int = 3,
    activation: str = SOFTMAX,
    seed: int = 0,
    alpha_init: float | None = None,
) -> Supernet:
    rng = np.random.default_rng([seed, 0])
    stem = _linear_init(rng, width, input_dim)
    head = _linear_init(np.random.default_rng([seed, 2]), classes, width)
    cells = [
        [
            [O.make_op(kind, width, _op_seed(seed, c, e, k)) for k, kind in enumerate(spec.ops)]
            for e in range(spec.num_edges)
        ]
        for c in range(num_cells)
    ]
    alphas = AlphaSet.initial(spec, activation, alpha_init)
    return Supernet(spec, input_dim, classes, width, stem, cells, head, alphas, seed=seed)


def instantiate(
    arch: Architecture,
    spec: CellSpec,
    input_dim: int,
    classes: int,
    width: int = 16,
    num_cells: int = 3,
    seed: int = 0,
) -> Supernet:
    """Stand-alone network containing only ``arch``'s ops.

    Weights are drawn exactly as ``build_supernet`` draws them for the same
    seed, so the chosen ops start identical to their supernet counterparts.
    """
    idx = arch.indices(spec)
    if len(idx) != spec.num_edges:
        raise ValueError(f"architecture has {len(idx)} edges, spec has {spec.num_edges}")
    rng = np.random.default_rng([seed, 0])
    stem = _linear_init(rng, width, input_dim)
    head = _linear_init(np.random.default_rng([seed, 2]), classes, width)
    cells = [
        [[O.make_op(spec.ops[k], width, _op_seed(seed, c, e, k))] for e, k in enumerate(idx)]
        for c in range(num_cells)
    ]
    return Supernet(spec, input_dim, classes, width, stem, cells, head, None, seed=seed)


def mixed_edge_forward(x: Tensor, edge: int, probs: Tensor, ops: Sequence[O.CandidateOp]):
    """``sum_k p_k o_k(x)`` for one edge; returns (mixed, per-op outputs)."""
    if probs.data.ndim == 2 and len(ops) != probs.shape[1]:
        raise ad.ShapeError(f"edge {edge}: {len(ops)} ops for {probs.shape[1]} probabilities")
    outs = [O.apply(op, x) for op in ops]
    return ad.mix(probs, edge, outs), outs


def supernet_forward(net: Supernet, batch, probe: bool = False) -> Tensor:
    """Logits of shape (batch, classes).

    With ``probe`` set, ``net.probes`` is refilled with one :class:`EdgeProbe`
    per (cell, edge) so edge-level gradients can be read after backward.
    """
    x = ad.as_tensor(batch)
    if x.data.ndim != 2 or x.shape[1] != net.input_dim:
        raise ad.ShapeError(f"batch shape {x.shape} does not match input_dim {net.input_dim}")
    spec = net.spec
    if net.is_discrete():
        probs = None
    elif net.fixed_probs is not None:
        probs = Tensor(net.fixed_probs)
    elif net.alphas is not None:
        probs = net.alphas.probs_tensor()
    else:
        raise ValueError("supernet has neither alphas nor fixed probabilities")
    net.last_probs = probs
    if probe:
        net.probes = []
    h = ad.standardize(ad.add_bias(ad.linear(x, net.stem[0]), net.stem[1]))
    for c, cell in enumerate(net.cells):
        nodes = [h]
        for j in range(1, spec.num_nodes):
            acc = None
            for e in spec.incoming(j):
                src = nodes[spec.edges[e][0]]
                if probs is None:
                    out = O.apply(cell[e][0], src)
                    outs = [out]
                else:
                    out, outs = mixed_edge_forward(src, e, probs, cell[e])
                if probe:
                    net.probes.append(EdgeProbe(c, e, src, outs, out))
                acc = out if acc is None else ad.add(acc, out)
            nodes.append(acc if acc is not None else Tensor(np.zeros_like(h.data)))
        h = nodes[-1]
    return ad.add_bias(ad.linear(h, net.head[0]), net.head[1])


def harden(net: Supernet, arch: Architecture) -> Supernet:
    """Freeze the mixing weights of ``net`` to the one-hot encoding of ``arch``."""
    net.fixed_probs = one_hot_probs(arch, net.spec)
    return net


def loss_and_logits(net: Supernet, x, labels, probe: bool = False):
    logits = supernet_forward(net, x, probe=probe)
    return ad.cross_entropy(logits, ad.one_hot(labels, net.classes)), logits


def accuracy(net: Supernet, x, labels) -> float:
    logits = supernet_forward(net, x)
    return float(np.mean(logits.data.argmax(axis=1) == np.asarray(labels)))
