"""SGD-with-momentum and Adam over lists of tensors, plus LR schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, step: int, index: int):
        super().__init__(f"non-finite gradient for parameter {index} at step {step}")
        self.step = step
        self.index = index


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.005
    momentum: float = 0.9
    betas: tuple[float, float] = (0.5, 0.999)
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    buffers: list[dict] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")

    def fresh(self) -> "OptimizerState":
        return OptimizerState(self.kind, self.lr, self.momentum, tuple(self.betas), self.weight_decay, self.eps)


def sgd(lr=0.005, momentum=0.9, weight_decay=3e-4) -> OptimizerState:
    return OptimizerState("sgd", lr, momentum, weight_decay=weight_decay)


def adam(lr=3e-4, betas=(0.5, 0.999), weight_decay=0.0) -> OptimizerState:
    return OptimizerState("adam", lr, betas=tuple(betas), weight_decay=weight_decay)


def _ensure_buffers(state: OptimizerState, params) -> None:
    if not state.buffers:
        state.buffers = [{} for _ in params]
    elif len(state.buffers) != len(params):
        raise ValueError(f"optimizer tracks {len(state.buffers)} params, got {len(params)}")


def step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState, lr: float | None = None) -> None:
    """One in-place update of ``params``; ``lr`` overrides ``state.lr`` (schedules)."""
    lr = state.lr if lr is None else lr
    _ensure_buffers(state, params)
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        if not np.isfinite(g.sum()):
            raise NonFiniteGradientError(t, i)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.buffers[i]
        if state.kind == "sgd":
            if state.momentum:
                m = buf.get("m")
                m = g.copy() if m is None else state.momentum * m + g
                buf["m"] = m
                g = m
            p.data = p.data - lr * g
        else:
            b1, b2 = state.betas
            m = b1 * buf.get("m", 0.0) + (1 - b1) * g
            v = b2 * buf.get("v", 0.0) + (1 - b2) * g * g
            buf["m"], buf["v"] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)


def sgd_step(params, grads, state):
    if state.kind != "sgd":
        raise ValueError("sgd_step called with a non-SGD state")
    step(params, grads, state)


def adam_step(params, grads, state):
    if state.kind != "adam":
        raise ValueError("adam_step called with a non-Adam state")
    step(params, grads, state)


def cosine_lr(lr_max: float, t: float, total: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr_max
    t = min(max(t, 0.0), total)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


def scheduled_lr(schedule: str, lr_max: float, epoch: int, epochs: int) -> float:
    if schedule == "constant":
        return lr_max
    if schedule == "cosine":
        return cosine_lr(lr_max, epoch, epochs)
    raise ValueError(f"unknown lr schedule {schedule!r}")
