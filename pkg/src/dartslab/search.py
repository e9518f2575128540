"""Architecture search loops: bi-level, single-level and same-subset/different-batch."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import diagnostics as D
from . import optim
from . import space as S
from .data import Dataset, Split, assert_disjoint, split_for_bilevel
from .diagnostics import TraceRecord

BILEVEL = "bilevel"
SINGLE = "single_level"
SAME_SUBSET = "same_subset_diff_batch"
REGIMES = (BILEVEL, SINGLE, SAME_SUBSET)

ALPHA_FIRST = "alpha_first"
W_FIRST = "w_first"


class ConfigError(ValueError):
    pass


class SearchAborted(RuntimeError):
    """A step failed; ``result`` holds the trace up to the failure."""

    def __init__(self, message: str, result: "SearchResult"):
        super().__init__(message)
        self.result = result


@dataclass
class SearchConfig:
    regime: str = SINGLE
    epochs: int = 50
    batch_size: int = 64
    w_optimizer: optim.OptimizerState = field(default_factory=optim.sgd)
    alpha_optimizer: optim.OptimizerState = field(default_factory=optim.adam)
    lr_schedule: str = "cosine"
    activation: str = S.SOFTMAX
    seed: int = 0
    space: str = "micro"
    width: int = 16
    num_cells: int = 3
    order: str = ALPHA_FIRST
    simultaneous: bool = True
    alpha_init: float | None = None
    trace_corr: bool = False

    def validate(self) -> "SearchConfig":
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.activation not in S.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {S.ACTIVATIONS}, got {self.activation!r}")
        if self.order not in (ALPHA_FIRST, W_FIRST):
            raise ConfigError(f"order must be {ALPHA_FIRST!r} or {W_FIRST!r}, got {self.order!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("epochs must be >= 0 and batch_size > 0")
        S.get_space(self.space)
        return self

    @property
    def cell_spec(self) -> S.CellSpec:
        return S.get_space(self.space)

    def to_flat(self) -> dict:
        w, a = self.w_optimizer, self.alpha_optimizer
        return {
            "regime": self.regime,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "w_optimizer": w.kind,
            "w_lr": w.lr,
            "w_momentum": w.momentum,
            "w_betas": list(w.betas),
            "w_weight_decay": w.weight_decay,
            "alpha_optimizer": a.kind,
            "alpha_lr": a.lr,
            "alpha_momentum": a.momentum,
            "alpha_betas": list(a.betas),
            "alpha_weight_decay": a.weight_decay,
            "lr_schedule": self.lr_schedule,
            "activation": self.activation,
            "seed": self.seed,
            "space": self.space,
            "width": self.width,
            "num_cells": self.num_cells,
            "order": self.order,
            "simultaneous": self.simultaneous,
            "alpha_init": self.alpha_init,
            "trace_corr": self.trace_corr,
        }


@dataclass
class SearchResult:
    spec: S.CellSpec
    final_alphas: S.AlphaSet
    architecture: S.Architecture
    trace: list[TraceRecord]
    config: SearchConfig | None = None
    net: S.Supernet | None = field(default=None, repr=False)


@dataclass
class SearchState:
    """Mutable per-run state: the supernet plus both optimizers."""

    net: S.Supernet
    cfg: SearchConfig
    w_opt: optim.OptimizerState
    a_opt: optim.OptimizerState
    step: int = 0
    epoch: int = 0
    w_lr: float = 0.0

    @classmethod
    def create(cls, net: S.Supernet, cfg: SearchConfig) -> "SearchState":
        return cls(net, cfg, cfg.w_optimizer.fresh(), cfg.alpha_optimizer.fresh(), w_lr=cfg.w_optimizer.lr)


Batch = Split


def _backward(net: S.Supernet, batch: Batch, params):
    with ad.Tape() as tape:
        loss, _ = S.loss_and_logits(net, batch.x, batch.labels)
    grads = tape.backward(loss)
    return loss.item(), grads, [grads[p] for p in params]


def _alpha_diag(net: S.Supernet, grads) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    p = net.last_probs.data.copy()
    gp = grads[net.last_probs].copy()
    ga = grads[net.alphas.alpha].copy()
    D.check_alpha_identity(net.alphas.activation, p, gp, ga)
    return p, gp, ga


def _update_alpha(state: SearchState, grads_alpha) -> None:
    optim.step(state.net.arch_parameters(), grads_alpha, state.a_opt)


def _update_w(state: SearchState, grads_w) -> None:
    optim.step(state.net.weights(), grads_w, state.w_opt, lr=state.w_lr)


def _check_softmax_rows(state: SearchState) -> None:
    if state.net.alphas.activation == S.SOFTMAX:
        s = state.net.alphas.probabilities().sum(1)
        if not np.allclose(s, 1.0, atol=1e-12):
            raise AssertionError(f"softmax rows no longer sum to 1: {s}")


def _edge_corr(state: SearchState, batch_a: Batch, batch_b: Batch) -> np.ndarray:
    rep = D.correlation_report(
        state.net,
        (batch_a.x, batch_a.labels),
        (batch_a.x, batch_a.labels) if batch_b is batch_a else (batch_b.x, batch_b.labels),
    )
    return rep.per_edge.sum(0)


def _alpha_then_w(state, alpha_batch, w_batch, alpha_tag, w_tag, corr=None):
    """Alternating update; alpha and w each get their own forward/backward."""
    net = state.net
    ap, wp = net.arch_parameters(), net.weights()
    order = (("a", "w") if state.cfg.order == ALPHA_FIRST else ("w", "a"))
    rec = {}
    for part in order:
        if part == "a":
            loss, grads, ga = _backward(net, alpha_batch, ap)
            rec["a"] = (loss, *_alpha_diag(net, grads))
            _update_alpha(state, ga)
        else:
            loss, _, gw = _backward(net, w_batch, wp)
            rec["w"] = loss
            _update_w(state, gw)
    loss_a, p, gp, ga = rec["a"]
    record = TraceRecord(
        state.step, state.epoch, p, gp, ga,
        loss_train=rec["w"],
        loss_val=loss_a if alpha_tag == "val" else None,
        corr=corr, provenance=alpha_tag, w_provenance=w_tag,
    )
    return record


def bilevel_step(state: SearchState, train_batch: Batch, val_batch: Batch, check_splits: bool = True) -> TraceRecord:
    """First-order DARTS step: alpha on the validation batch, w on the training batch."""
    if check_splits and np.intersect1d(train_batch.indices, val_batch.indices).size:
        raise ConfigError("bilevel step given overlapping train/val batches")
    corr = _edge_corr(state, val_batch, train_batch) if state.cfg.trace_corr else None
    rec = _alpha_then_w(state, val_batch, train_batch, "val", "train", corr)
    _check_softmax_rows(state)
    state.step += 1
    return rec


def single_level_step(state: SearchState, batch: Batch) -> TraceRecord:
    """Single-level step: one backward of one loss, then alpha and w update together."""
    net = state.net
    corr = _edge_corr(state, batch, batch) if state.cfg.trace_corr else None
    if not state.cfg.simultaneous:
        rec = _alpha_then_w(state, batch, batch, "train", "train", corr)
    else:
        ap, wp = net.arch_parameters(), net.weights()
        loss, grads, _ = _backward(net, batch, [])
        p, gp, ga = _alpha_diag(net, grads)
        gw = [grads[t] for t in wp]
        _update_alpha(state, [grads[t] for t in ap])
        _update_w(state, gw)
        rec = TraceRecord(state.step, state.epoch, p, gp, ga, loss, None, corr, "train", "train")
    _check_softmax_rows(state)
    state.step += 1
    return rec


def same_subset_diff_batch_step(state: SearchState, batch_a: Batch, batch_b: Batch) -> TraceRecord:
    """Alpha on ``batch_a``, w on ``batch_b``; both batches come from the training set."""
    corr = _edge_corr(state, batch_a, batch_b) if state.cfg.trace_corr else None
    rec = _alpha_then_w(state, batch_a, batch_b, "train", "train", corr)
    _check_softmax_rows(state)
    state.step += 1
    return rec


# -- epochs -------------------------------------------------------------------


def _batches(split: Split, batch_size: int, rng: np.random.Generator) -> list[Split]:
    perm = rng.permutation(len(split))
    n = len(split) // batch_size
    return [split.subset(perm[i * batch_size : (i + 1) * batch_size]) for i in range(n)]


def build_for(cfg: SearchConfig, task: Dataset) -> S.Supernet:
    return S.build_supernet(
        cfg.cell_spec, task.input_dim, task.classes, cfg.width, cfg.num_cells,
        cfg.activation, cfg.seed, cfg.alpha_init,
    )


def epoch_plan(cfg: SearchConfig, task: Dataset, epoch: int, subsets=None):
    """The (alpha_batch, w_batch) pairs of one epoch, deterministic in (seed, epoch)."""
    rng = np.random.default_rng([cfg.seed, 7, epoch])
    if cfg.regime == BILEVEL:
        w_sub, a_sub = subsets
        wb = _batches(w_sub, cfg.batch_size, rng)
        ab = _batches(a_sub, cfg.batch_size, rng)
        return list(zip(ab, wb))
    if cfg.regime == SINGLE:
        return [(b, b) for b in _batches(task.train, cfg.batch_size, rng)]
    wb = _batches(task.train, cfg.batch_size, rng)
    ab = _batches(task.train, cfg.batch_size, rng)
    return list(zip(ab, wb))


def run_search(cfg: SearchConfig, task: Dataset, net: S.Supernet | None = None) -> SearchResult:
    cfg.validate()
    spec = cfg.cell_spec
    net = net if net is not None else build_for(cfg, task)
    state = SearchState.create(net, cfg)
    subsets = None
    if cfg.regime == BILEVEL:
        subsets = split_for_bilevel(task.train, cfg.seed)
        assert_disjoint(*subsets)
    trace: list[TraceRecord] = []

    def result() -> SearchResult:
        alphas = net.alphas.copy()
        return SearchResult(spec, alphas, S.discretize(alphas, spec), trace, cfg, net)

    try:
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            state.w_lr = optim.scheduled_lr(cfg.lr_schedule, cfg.w_optimizer.lr, epoch, cfg.epochs)
            for a_batch, w_batch in epoch_plan(cfg, task, epoch, subsets):
                if cfg.regime == BILEVEL:
                    trace.append(bilevel_step(state, w_batch, a_batch))
                elif cfg.regime == SINGLE:
                    trace.append(single_level_step(state, w_batch))
                else:
                    trace.append(same_subset_diff_batch_step(state, a_batch, w_batch))
    except (FloatingPointError, AssertionError, ad.ShapeError) as exc:
        raise SearchAborted(f"search aborted at step {state.step}: {exc}", result()) from exc
    return result()


def with_overrides(cfg: SearchConfig, **kw) -> SearchConfig:
    return replace(cfg, **kw)
