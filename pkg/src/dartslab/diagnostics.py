"""Per-operation gradients, gradient correlation, collapse detection, traces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import space as S

CSV_COLUMNS = (
    "step", "epoch", "cell", "edge", "op_name", "p", "grad_p",
    "grad_alpha", "loss_train", "loss_val", "corr", "provenance",
)
ALL_CELLS = -1


@dataclass
class TraceRecord:
    """Diagnostics of one search step, taken before that step's updates.

    ``p``, ``grad_p`` and ``grad_alpha`` are (edges, ops) arrays for the loss
    that drove the alpha update; with alphas shared across cells these are
    summed over cells (``cell`` = -1 in the CSV).
    """

    step: int
    epoch: int
    p: np.ndarray
    grad_p: np.ndarray
    grad_alpha: np.ndarray
    loss_train: float
    loss_val: float | None = None
    corr: np.ndarray | None = None  # per edge
    provenance: str = "train"
    w_provenance: str = "train"

    def rows(self, spec: S.CellSpec) -> list["TraceRow"]:
        out = []
        for e in range(spec.num_edges):
            for k, name in enumerate(spec.ops):
                out.append(
                    TraceRow(
                        self.step, self.epoch, ALL_CELLS, e, name,
                        float(self.p[e, k]), float(self.grad_p[e, k]), float(self.grad_alpha[e, k]),
                        float(self.loss_train),
                        None if self.loss_val is None else float(self.loss_val),
                        None if self.corr is None else float(self.corr[e]),
                        self.provenance,
                    )
                )
        return out


@dataclass(frozen=True)
class TraceRow:
    step: int
    epoch: int
    cell: int
    edge: int
    op_name: str
    p: float
    grad_p: float
    grad_alpha: float
    loss_train: float
    loss_val: float | None
    corr: float | None
    provenance: str


# -- gradients at mixed edges -------------------------------------------------


def softmax_alpha_grad(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """dL/dalpha_i = p_i (dL/dp_i - sum_k p_k dL/dp_k), row-wise."""
    return p * (grad_p - np.sum(p * grad_p, axis=-1, keepdims=True))


def sigmoid_alpha_grad(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (1.0 - p) * grad_p


def check_alpha_identity(activation: str, p, grad_p, grad_alpha, tol: float = 1e-10) -> float:
    """Max abs deviation from the activation's chain rule; raises above ``tol``."""
    expect = softmax_alpha_grad(p, grad_p) if activation == S.SOFTMAX else sigmoid_alpha_grad(p, grad_p)
    dev = float(np.max(np.abs(expect - grad_alpha))) if p.size else 0.0
    if dev > tol:
        raise AssertionError(f"alpha gradient deviates from chain rule by {dev:.3e}")
    return dev


@dataclass
class EdgeGrads:
    """Edge-level quantities read back from probes after one backward pass."""

    loss: float
    grad_probs: np.ndarray  # (edges, ops), summed over cells
    grad_alpha: np.ndarray
    per_cell: np.ndarray  # (cells, edges, ops)
    edge_inputs: dict  # (cell, edge) -> (batch, width)
    edge_out_grads: dict  # (cell, edge) -> (batch, width), per-sample scale


def edge_gradients(net: S.Supernet, x, labels) -> EdgeGrads:
    """Forward+backward on one batch, capturing dL/d(mixed output) at every edge."""
    with ad.Tape() as tape:
        loss, _ = S.loss_and_logits(net, x, labels, probe=True)
    grads = tape.backward(loss)
    spec = net.spec
    per_cell = np.zeros((net.num_cells, spec.num_edges, spec.num_ops))
    inputs, outgrads = {}, {}
    batch = len(labels)
    for pr in net.probes:
        g = grads[pr.mixed]
        per_cell[pr.cell, pr.edge] = [np.sum(g * o.data) for o in pr.outputs]
        inputs[pr.cell, pr.edge] = pr.inputs.data
        outgrads[pr.cell, pr.edge] = g * batch
    probs = net.last_probs
    gp = grads[probs] if probs is not None else per_cell.sum(0)
    ga = grads[net.alphas.alpha] if net.alphas is not None else np.zeros_like(gp)
    return EdgeGrads(loss.item(), gp, ga, per_cell, inputs, outgrads)


def grad_p(net: S.Supernet, batch, edge: int, cell: int | None = None) -> np.ndarray:
    """dL/dp_k for every candidate k on ``edge`` (summed over cells unless ``cell``).

    Computed as the batch sum of (dL/d mixed_output)^T o_k(x), which equals the
    expectation of the per-sample quantity because the loss is a batch mean.
    """
    x, labels = batch
    if not 0 <= edge < net.spec.num_edges:
        raise IndexError(f"edge {edge} out of range for {net.spec.num_edges} edges")
    eg = edge_gradients(net, x, labels)
    if cell is None:
        return eg.per_cell[:, edge].sum(0)
    return eg.per_cell[cell, edge]


def correlation_value(ga, xa, gb, xb) -> float:
    """(1/NM) sum_j sum_k (ga_j . gb_k)(xb_k . xa_j)."""
    if ga.shape[1] != gb.shape[1] or xa.shape[1] != xb.shape[1]:
        raise ad.ShapeError(f"mismatched feature widths {ga.shape} / {gb.shape}")
    n, m = len(ga), len(gb)
    return float(np.sum((ga @ gb.T) * (xa @ xb.T)) / (n * m))


def diagonal_correlation(g, x) -> float:
    """Diagonal restriction of the same-batch sum; each addend is >= 0."""
    n = len(g)
    return float(np.sum(np.sum(g * g, 1) * np.sum(x * x, 1)) / (n * n))


@dataclass
class CorrelationReport:
    regime: str
    per_edge: np.ndarray  # (cells, edges)
    per_node: np.ndarray  # (cells, nodes); node 0 has no incoming edges -> 0
    per_cell: np.ndarray  # (cells,)
    diagonal: np.ndarray | None = None  # (cells, edges), same-batch only

    def to_dict(self) -> dict:
        d = {
            "regime": self.regime,
            "per_edge": self.per_edge.tolist(),
            "per_node": self.per_node.tolist(),
            "per_cell": self.per_cell.tolist(),
        }
        if self.diagonal is not None:
            d["diagonal"] = self.diagonal.tolist()
        return d


def correlation_report(net: S.Supernet, batch_a, batch_b, regime: str = "") -> CorrelationReport:
    """Correlation at every (cell, edge), aggregated per node (sum over incoming edges)."""
    spec = net.spec
    ea = edge_gradients(net, *batch_a)
    same = batch_b is batch_a
    eb = ea if same else edge_gradients(net, *batch_b)
    per_edge = np.zeros((net.num_cells, spec.num_edges))
    diag = np.zeros_like(per_edge) if same else None
    for c in range(net.num_cells):
        for e in range(spec.num_edges):
            ga, xa = ea.edge_out_grads[c, e], ea.edge_inputs[c, e]
            gb, xb = eb.edge_out_grads[c, e], eb.edge_inputs[c, e]
            per_edge[c, e] = correlation_value(ga, xa, gb, xb)
            if same:
                diag[c, e] = diagonal_correlation(ga, xa)
    per_node = np.zeros((net.num_cells, spec.num_nodes))
    for j in range(1, spec.num_nodes):
        per_node[:, j] = per_edge[:, spec.incoming(j)].sum(1)
    regime = regime or ("same_batch" if same else "cross_batch")
    return CorrelationReport(regime, per_edge, per_node, per_edge.sum(1), diag)


def gradient_correlation(net: S.Supernet, batch_a, batch_b, edge: int, cell: int = 0) -> float:
    rep = correlation_report(net, batch_a, batch_b)
    return float(rep.per_edge[cell, edge])


# -- collapse -----------------------------------------------------------------


@dataclass
class CollapseReport:
    crossings: dict[int, int | None]
    final_arch: S.Architecture | None = None
    flagged_edges: list[int] = field(default_factory=list)

    @property
    def collapsed_edges(self) -> list[int]:
        return [e for e, s in self.crossings.items() if s is not None]

    def to_dict(self) -> dict:
        return {
            "crossings": {str(k): v for k, v in self.crossings.items()},
            "collapsed_edges": self.collapsed_edges,
            "flagged_edges": self.flagged_edges,
        }


def irreversible_crossing(steps: Sequence[int], nonlearn: np.ndarray, learn: np.ndarray) -> int | None:
    """First step from which ``nonlearn`` stays strictly above ``learn`` to the end."""
    above = nonlearn > learn
    if not len(above) or not above[-1]:
        return None
    below = np.flatnonzero(~above)
    first = 0 if not len(below) else below[-1] + 1
    return int(steps[first])


def collapse_detector(
    trace: Sequence[TraceRecord],
    spec: S.CellSpec,
    oracle_best: S.Architecture | None = None,
    final_alphas: S.AlphaSet | None = None,
) -> CollapseReport:
    mask = spec.learnable_mask()
    if not len(trace) or mask.all() or not mask.any():
        return CollapseReport({e: None for e in range(spec.num_edges)})
    steps = [r.step for r in trace]
    p = np.stack([r.p for r in trace])  # (T, edges, ops)
    crossings = {}
    for e in range(spec.num_edges):
        crossings[e] = irreversible_crossing(steps, p[:, e, ~mask].max(1), p[:, e, mask].max(1))
    if final_alphas is not None:
        final = S.discretize(final_alphas, spec)
    else:
        final = S.Architecture(tuple(spec.ops[int(np.argmax(row))] for row in trace[-1].p))
    flagged = []
    if oracle_best is not None:
        flagged = [
            e for e in range(spec.num_edges)
            if not final.learnable_edges()[e] and oracle_best.learnable_edges()[e]
        ]
    return CollapseReport(crossings, final, flagged)


# -- trace files --------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace_csv(rows: Iterable[TraceRow], path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    except OSError as exc:
        raise OSError(f"could not write trace CSV to {path}: {exc}") from exc
    return path


def _opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def read_trace_csv(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for rec in reader:
            d = dict(zip(CSV_COLUMNS, rec))
            rows.append(
                TraceRow(
                    int(d["step"]), int(d["epoch"]), int(d["cell"]), int(d["edge"]), d["op_name"],
                    float(d["p"]), float(d["grad_p"]), float(d["grad_alpha"]), float(d["loss_train"]),
                    _opt_float(d["loss_val"]), _opt_float(d["corr"]), d["provenance"],
                )
            )
    return rows


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def emit_traces(result, path, correlation: CorrelationReport | None = None, extra: dict | None = None):
    """Write ``trace.csv`` and ``summary.json`` for a search result into ``path``."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"could not create trace directory {out}: {exc}") from exc
    spec = result.spec
    rows = [row for rec in result.trace for row in rec.rows(spec)]
    csv_path = write_trace_csv(rows, out / "trace.csv")
    summary = {
        "architecture": result.architecture.to_string(spec),
        "architecture_ops": list(result.architecture.choice),
        "final_alphas": result.final_alphas.to_dict(),
        "final_probs": result.final_alphas.probabilities().tolist(),
        "steps": len(result.trace),
        "correlation": None if correlation is None else correlation.to_dict(),
    }
    if getattr(result, "config", None) is not None:
        summary["config"] = result.config.to_flat()
    if extra:
        summary.update(extra)
    json_path = out / "summary.json"
    try:
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    except OSError as exc:
        raise OSError(f"could not write summary to {json_path}: {exc}") from exc
    return csv_path, json_path


def trace_row_dicts(rows: Iterable[TraceRow]) -> list[dict]:
    return [asdict(r) for r in rows]
