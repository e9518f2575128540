"""Candidate operations for a mixed edge (toy NAS-Bench-201 operation pool)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NONE = "none"
SKIP = "skip_connect"
CONV1 = "nor_conv_1x1"
CONV3 = "nor_conv_3x3"
POOL = "avg_pool_3x3"

OP_NAMES = (NONE, SKIP, CONV1, CONV3, POOL)
LEARNABLE = frozenset({CONV1, CONV3})

# short aliases accepted anywhere an op kind is parsed
ALIASES = {
    "zero": NONE,
    "skip": SKIP,
    "linear1": CONV1,
    "linear3": CONV3,
    "avgpool": POOL,
}

# hidden width multiplier of the conv3x3 analog
CONV3_EXPANSION = 2
POOL_RADIUS = 1
NORM_EPS = 1e-5


def canonical(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in OP_NAMES:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_NAMES}")
    return kind


def is_learnable(kind: str) -> bool:
    return canonical(kind) in LEARNABLE


@dataclass
class CandidateOp:
    kind: str
    width: int
    weights: list[Tensor] = field(default_factory=list)
    normalize: bool = True

    def __post_init__(self):
        self.kind = canonical(self.kind)

    @property
    def learnable(self) -> bool:
        return self.kind in LEARNABLE

    def parameters(self) -> list[Tensor]:
        return list(self.weights)

    def __call__(self, x: Tensor) -> Tensor:
        return apply(self, x)


def weight_shapes(kind: str, width: int) -> list[tuple[int, int]]:
    kind = canonical(kind)
    if kind == CONV1:
        return [(width, width)]
    if kind == CONV3:
        hidden = CONV3_EXPANSION * width
        return [(hidden, width), (width, hidden)]
    return []


def init_weights(op: CandidateOp, seed) -> CandidateOp:
    """Fill a learnable op with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.

    ``seed`` is anything ``np.random.default_rng`` accepts, so callers can
    pass a tuple such as ``(run_seed, cell, edge, op_index)``.
    """
    if not op.learnable:
        raise ValueError(f"op {op.kind!r} has no trainable weights to initialise")
    rng = np.random.default_rng(seed)
    weights = []
    for shape in weight_shapes(op.kind, op.width):
        bound = 1.0 / np.sqrt(shape[1])
        weights.append(Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True))
    op.weights = weights
    return op


def make_op(kind: str, width: int, seed=None, normalize: bool = True) -> CandidateOp:
    op = CandidateOp(kind, width, normalize=normalize)
    if op.learnable:
        init_weights(op, seed)
    return op


def apply(op: CandidateOp, x: Tensor) -> Tensor:
    """Run ``op`` on a (batch, width) tensor; output has the same shape.

    Pool and the two linear maps are batch-standardised when ``op.normalize``
    is set (stand-in for the BN that follows each NAS-Bench-201 op); ``none``
    and ``skip`` are returned as is, so zero(x) == 0 and skip(x) == x exactly.
    """
    if x.data.ndim != 2 or x.shape[1] != op.width:
        raise ad.ShapeError(f"{op.kind}: input shape {x.shape} does not match width {op.width}")
    if op.kind == NONE:
        return ad.Tensor(np.zeros_like(x.data))
    if op.kind == SKIP:
        return x
    if op.kind == POOL:
        out = ad.window_mean(x, POOL_RADIUS)
    elif op.kind == CONV1:
        out = ad.linear(x, op.weights[0])
    else:
        w1, w2 = op.weights
        out = ad.linear(ad.relu(ad.linear(x, w1)), w2)
    return ad.standardize(out, NORM_EPS) if op.normalize else out
