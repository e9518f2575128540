"""Named experiment recipes: seed sweeps over search configs, scored against the oracle.

Every run writes ``<out>/<point>/seed<k>/{trace.csv,summary.json}``; the
summary table is then recomputed from those files alone, so a finished
output directory can be re-summarised without re-running anything.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import data
from . import diagnostics as D
from . import oracle
from . import search as T
from . import space as S
from . import theory

log = logging.getLogger(__name__)

NAMES = (
    "collapse_repro",
    "ablation_batch",
    "ablation_lr",
    "ablation_activation",
    "ablation_optimizer",
    "correlation_study",
    "theorem_suite",
    "oracle_study",
)

# two percentiles closer than this are "the same rank band" (2.7 of 27 ranks)
RANK_BAND = 0.1


@dataclass
class Recipe:
    name: str
    grid: list[dict]
    seeds: list[int]
    output_dir: Path
    base: dict = field(default_factory=dict)

    def point_label(self, point: dict) -> str:
        if not point:
            return "default"
        return "-".join(f"{k}={point[k]}" for k in sorted(point))

    def configs(self) -> list[tuple[str, C.RunConfig | None, str | None]]:
        """(label, resolved config or None, error) per grid point."""
        out = []
        for point in self.grid:
            label = self.point_label(point)
            try:
                out.append((label, C.parse_config(None, {**self.base, **point}), None))
            except C.ConfigParseError as exc:
                out.append((label, None, str(exc)))
        return out


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


@dataclass
class ExperimentSummary:
    recipe: str
    rows: list[dict]
    checks: list[Check]
    invalid: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.invalid and all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe,
            "rows": self.rows,
            "checks": [c.__dict__ for c in self.checks],
            "invalid": self.invalid,
            "ok": self.ok,
            **self.extra,
        }


def make_recipe(name: str, output_dir, seeds=None, base: dict | None = None) -> Recipe:
    if name not in NAMES:
        raise ValueError(f"unknown experiment {name!r}; expected one of {NAMES}")
    seeds = list(range(5)) if seeds is None else list(seeds)
    base = dict(base or {})
    grids = {
        "collapse_repro": [{"regime": T.BILEVEL}, {"regime": T.SINGLE}],
        "ablation_batch": [{"regime": r} for r in (T.BILEVEL, T.SAME_SUBSET, T.SINGLE)],
        "ablation_lr": [
            {"regime": r, "w_lr": lr} for r in (T.BILEVEL, T.SINGLE) for lr in (0.001, 0.005, 0.025)
        ],
        "ablation_activation": [
            {"regime": T.SINGLE, "activation": S.SOFTMAX},
            {"regime": T.SINGLE, "activation": S.SIGMOID},
            {"regime": T.SINGLE, "activation": S.SIGMOID, "alpha_init": 0.0},
        ],
        "ablation_optimizer": [
            {"regime": T.SINGLE, "alpha_optimizer": "adam"},
            {"regime": T.SINGLE, "alpha_optimizer": "sgd", "alpha_lr": 0.005},
        ],
    }
    if name == "collapse_repro":
        base = {"space": "nas201-desk", "w_lr": 0.025, **base}
    if name not in grids:
        return Recipe(name, [{}], seeds, Path(output_dir), base)
    return Recipe(name, grids[name], seeds, Path(output_dir), base)


# -- single runs ----------------------------------------------------------------


def _run_one(args) -> str:
    label, flat, seed, out_dir = args
    rc = C.from_flat({**flat, "seed": seed})
    task = data.generate(rc.task)
    res = T.run_search(rc.search, task)
    run_dir = Path(out_dir) / label / f"seed{seed}"
    D.emit_traces(res, run_dir, extra={"task_fingerprint": rc.task.fingerprint()})
    rc.echo(run_dir)
    return str(run_dir)


def run_grid(recipe: Recipe, workers: int = 1) -> tuple[list[tuple[str, C.RunConfig]], list[str]]:
    valid, invalid = [], []
    for label, rc, err in recipe.configs():
        if rc is None:
            log.error("skipping invalid grid point %s: %s", label, err)
            invalid.append(f"{label}: {err}")
        else:
            valid.append((label, rc))
    jobs = [(label, rc.flat, s, recipe.output_dir) for label, rc in valid for s in recipe.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_run_one, jobs))
    else:
        for j in jobs:
            _run_one(j)
    return valid, invalid


def oracle_table(task_spec: data.DatasetSpec, space: str, cache_dir, workers: int = 1, **budget_kw):
    task = data.cached(task_spec, cache_dir) if cache_dir else data.generate(task_spec)
    return oracle.evaluate_all(
        S.get_space(space), task, oracle.TrainBudget(**budget_kw), workers=workers, cache_dir=cache_dir
    )


# -- summaries recomputed from files ------------------------------------------


def _mean_std(v) -> tuple[float, float]:
    v = np.asarray([x for x in v if x is not None], dtype=float)
    if not len(v):
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    rows = D.read_trace_csv(run_dir / "trace.csv")
    last = max((r.step for r in rows), default=None)
    final = [r for r in rows if r.step == last]
    summary["final_loss_train"] = final[0].loss_train if final else None
    summary["final_loss_val"] = final[0].loss_val if final else None
    return summary


def summarize(recipe: Recipe, labels: list[str], table: oracle.OracleTable | None) -> list[dict]:
    rows = []
    for label in labels:
        runs = [load_run(recipe.output_dir / label / f"seed{s}") for s in recipe.seeds]
        row = {"point": label, "seeds": list(recipe.seeds), "architectures": [r["architecture"] for r in runs]}
        if table is not None:
            ranked = [
                oracle.rank_of(S.Architecture.from_string(r["architecture"], table.spec), table) for r in runs
            ]
            row["ranks"] = [k for k, _ in ranked]
            row["percentiles"] = [p for _, p in ranked]
            row["percentile_mean"], row["percentile_std"] = _mean_std(row["percentiles"])
            row["percentile_median"] = float(np.median(row["percentiles"]))
        row["loss_train_mean"], row["loss_train_std"] = _mean_std(r["final_loss_train"] for r in runs)
        row["loss_val_mean"], row["loss_val_std"] = _mean_std(r["final_loss_val"] for r in runs)
        rows.append(row)
    return rows


def _pm(m, s, digits=3) -> str:
    if m is None or (isinstance(m, float) and math.isnan(m)):
        return "-"
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def markdown_table(rows: list[dict]) -> str:
    head = "| point | oracle percentile | ranks | final train loss | final val loss |\n|---|---|---|---|---|\n"
    body = ""
    for r in rows:
        pct = _pm(r.get("percentile_mean"), r.get("percentile_std"))
        ranks = ",".join(map(str, r.get("ranks", []))) or "-"
        body += (
            f"| {r['point']} | {pct} | {ranks} | {_pm(r['loss_train_mean'], r['loss_train_std'])} "
            f"| {_pm(r['loss_val_mean'], r['loss_val_std'])} |\n"
        )
    return head + body


# -- checks per recipe --------------------------------------------------------


def _by_point(rows):
    return {r["point"]: r for r in rows}


def _beats(a: list[float], b: list[float]) -> int:
    """Seeds where percentile ``a`` is at least as good (<=) as ``b``."""
    return sum(x <= y for x, y in zip(a, b))


def check_ablation_batch(rows, need: int = 4) -> list[Check]:
    r = _by_point(rows)
    bi, ss, sl = (r[f"regime={k}"]["percentiles"] for k in (T.BILEVEL, T.SAME_SUBSET, T.SINGLE))
    ordered = sum(a <= b <= c for a, b, c in zip(sl, ss, bi))
    return [
        Check(
            "batch ordering single_level >= same_subset >= bilevel",
            ordered >= need,
            f"{ordered}/{len(sl)} seeds ordered (need {need})",
        )
    ]


def check_ablation_lr(rows) -> list[Check]:
    r = _by_point(rows)
    lrs = (0.001, 0.005, 0.025)
    bi = [r[f"regime={T.BILEVEL}-w_lr={lr}"]["percentile_mean"] for lr in lrs]
    sl = [r[f"regime={T.SINGLE}-w_lr={lr}"]["percentile_mean"] for lr in lrs]
    mono = bi[0] <= bi[1] <= bi[2]
    spread = max(sl) - min(sl)
    return [
        Check("bilevel percentile worsens with w-lr", mono, "mean percentiles " + ", ".join(f"{x:.3f}" for x in bi)),
        Check(
            "single_level percentile within one rank band across w-lr",
            spread <= RANK_BAND + 1e-12,
            f"spread {spread:.3f} (band {RANK_BAND})",
        ),
    ]


def check_ablation_activation(rows) -> list[Check]:
    r = _by_point(rows)
    soft = r[f"activation={S.SOFTMAX}-regime={T.SINGLE}"]["percentile_median"]
    sig = r[f"activation={S.SIGMOID}-regime={T.SINGLE}"]["percentile_median"]
    return [Check("sigmoid(-ln 7) never underperforms softmax (median)", sig <= soft, f"{sig:.3f} vs {soft:.3f}")]


def check_collapse(recipe: Recipe, rows) -> list[Check]:
    """Bi-level: irreversible crossing on most edges; single-level: none on learnable-favoured edges."""
    spec = S.get_space(recipe.base.get("space", "micro"))
    out = []
    stats = {}
    for regime in (T.BILEVEL, T.SINGLE):
        label = f"regime={regime}"
        per_seed = []
        for s in recipe.seeds:
            run = recipe.output_dir / label / f"seed{s}"
            trace = records_from_csv(run / "trace.csv", spec)
            rep = D.collapse_detector(trace, spec)
            per_seed.append(len(rep.collapsed_edges))
        stats[regime] = per_seed
    half = spec.num_edges / 2
    bi_major = sum(n > half for n in stats[T.BILEVEL])
    sl_clean = sum(n == 0 for n in stats[T.SINGLE])
    k = len(recipe.seeds)
    out.append(Check("bilevel crossing on majority of edges", bi_major > k / 2, f"collapsed edges per seed {stats[T.BILEVEL]}"))
    out.append(Check("single_level without irreversible crossing", sl_clean > k / 2, f"collapsed edges per seed {stats[T.SINGLE]}"))
    return out


def records_from_csv(path, spec: S.CellSpec) -> list[D.TraceRecord]:
    """Rebuild per-step records (p only, summed over cells) from a trace file."""
    rows = D.read_trace_csv(path)
    steps: dict[int, np.ndarray] = {}
    col = {op: k for k, op in enumerate(spec.ops)}
    for r in rows:
        p = steps.setdefault(r.step, np.zeros((spec.num_edges, spec.num_ops)))
        p[r.edge, col[r.op_name]] = r.p
    z = np.zeros((spec.num_edges, spec.num_ops))
    return [D.TraceRecord(s, 0, p, z, z, 0.0) for s, p in sorted(steps.items())]


# -- non-search recipes ---------------------------------------------------------


def _correlation_snapshot(task, space, pairs, batch_size, warmup, seed) -> dict:
    cfg = T.SearchConfig(regime=T.SINGLE, epochs=warmup, space=space, seed=seed)
    net = T.run_search(cfg, task).net
    rng = np.random.default_rng([seed, 17, warmup])
    n = len(task.train)
    same, cross, same_node, cross_node = [], [], [], []
    for _ in range(pairs):
        perm = rng.permutation(n)
        a = task.train.subset(perm[:batch_size])
        b = task.train.subset(perm[batch_size : 2 * batch_size])
        ba, bb = (a.x, a.labels), (b.x, b.labels)
        rs = D.correlation_report(net, ba, ba)
        rx = D.correlation_report(net, ba, bb)
        same.append(rs.per_cell)
        cross.append(rx.per_cell)
        same_node.append(rs.per_node)
        cross_node.append(rx.per_node)
    same_m = np.mean(same, 0)
    cross_abs = np.mean(np.abs(cross), 0)
    return {
        "warmup_epochs": warmup,
        "same_batch_mean": same_m.tolist(),
        "cross_batch_abs_mean": cross_abs.tolist(),
        "cross_batch_mean": np.mean(cross, 0).tolist(),
        "ratio": (cross_abs / same_m).tolist(),
        "same_batch_per_node": np.mean(same_node, 0).tolist(),
        "cross_batch_abs_per_node": np.mean(np.abs(cross_node), 0).tolist(),
    }


def correlation_study(
    task: data.Dataset,
    space: str = "nas201-desk",
    pairs: int = 200,
    batch_size: int = 64,
    warmup_epochs=(0, 10, 50),
    seed: int = 0,
) -> dict:
    """Same-batch vs cross-batch correlation per cell and node at several snapshots.

    Each snapshot is a single-level supernet trained for ``warmup`` epochs; both
    correlations are measured on that one set of parameters.
    """
    if isinstance(warmup_epochs, int):
        warmup_epochs = (warmup_epochs,)
    num_cells = T.SearchConfig().num_cells
    picks = {"first": 0, "middle": num_cells // 2, "last": num_cells - 1}
    snaps = [_correlation_snapshot(task, space, pairs, batch_size, w, seed) for w in warmup_epochs]
    return {"space": space, "pairs": pairs, "batch_size": batch_size, "cells": picks, "snapshots": snaps}


def check_correlation(report: dict, factor: float = 0.1) -> list[Check]:
    out = []
    for snap in report["snapshots"]:
        for name, c in report["cells"].items():
            r = snap["ratio"][c]
            out.append(Check(
                f"cross-batch |corr| < {factor} x same-batch ({name} cell, epoch {snap['warmup_epochs']})",
                r < factor, f"ratio {r:.4f}",
            ))
    return out


def oracle_study(task: data.Dataset, table: oracle.OracleTable) -> tuple[dict, list[Check]]:
    means = table.mean_accuracy()
    spec = table.spec
    best = table.best()
    from .ops import SKIP

    all_skip = S.Architecture((SKIP,) * spec.num_edges)
    probe = oracle.linear_probe_accuracy(task)
    critical = oracle.signal_critical_edges(table, best)
    learn = best.learnable_edges()
    ranking = sorted(means.items(), key=lambda kv: -kv[1])
    report = {
        "best": best.to_string(spec),
        "best_accuracy": means[best],
        "all_skip_accuracy": means.get(all_skip),
        "linear_probe_accuracy": probe,
        "signal_critical_edges": critical,
        "ranking": [[a.to_string(spec), v] for a, v in ranking],
    }
    checks = [
        Check("all-skip below best learnable architecture", means[all_skip] < means[best],
              f"{means[all_skip]:.3f} < {means[best]:.3f}"),
        Check("oracle best is learnable on every signal-critical edge", all(learn[e] for e in critical),
              f"critical edges {critical}, best {best.to_string(spec)}"),
        Check("linear probe <= 60% val accuracy", probe <= 0.60, f"{probe:.3f}"),
        Check("oracle best >= 85% val accuracy", means[best] >= 0.85, f"{means[best]:.3f}"),
    ]
    return report, checks


def theorem_suite(seed: int = 0) -> tuple[dict, list[Check]]:
    rep = theory.run_suite(seed)
    gaps = rep["gap_widening"]
    bound = rep["dominance_bound"]
    checks = [
        Check("softmax score ordering, violation slope >= 0.9", rep["score_ordering"]["passed"],
              f"slope {rep['score_ordering']['slope']:.3f}"),
        Check("alpha-gradient ordering, zero violations", gaps["violations"] == 0,
              f"{gaps['violations']}/{gaps['premise_ok']} violating"),
        Check("convergence bound holds in all cases", bound["within_bound"] == bound["total"],
              f"{bound['within_bound']}/{bound['total']} within bound"),
        Check("bound monotone in n, eta, delta", all(bound["monotonicity"].values()), str(bound["monotonicity"])),
    ]
    return rep, checks


# -- driver -------------------------------------------------------------------


def run_experiment(recipe: Recipe, cache_dir=None, workers: int = 1) -> ExperimentSummary:
    out = recipe.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = Path(cache_dir) if cache_dir else out / "cache"
    base_rc = C.parse_config(None, recipe.base)
    base_rc.echo(out, "config.base.txt")
    task_spec = base_rc.task
    extra: dict = {}
    rows: list[dict] = []
    invalid: list[str] = []

    if recipe.name == "theorem_suite":
        rep, checks = theorem_suite(recipe.seeds[0] if recipe.seeds else 0)
        (out / "theorems.json").write_text(json.dumps(rep, indent=1, default=D._jsonable) + "\n")
    elif recipe.name == "oracle_study":
        task = data.cached(task_spec, cache_dir)
        table = oracle_table(task_spec, base_rc.search.space, cache_dir, workers)
        rep, checks = oracle_study(task, table)
        (out / "oracle.json").write_text(json.dumps(table.to_json(), indent=1, sort_keys=True) + "\n")
        (out / "oracle_study.json").write_text(json.dumps(rep, indent=1) + "\n")
        extra["oracle"] = {k: rep[k] for k in ("best", "best_accuracy", "linear_probe_accuracy")}
    elif recipe.name == "correlation_study":
        task = data.cached(task_spec, cache_dir)
        space = recipe.base.get("space", "nas201-desk")
        reports = [correlation_study(task, space, seed=s) for s in recipe.seeds[:1]]
        rep = reports[0]
        checks = check_correlation(rep)
        (out / "correlation.json").write_text(json.dumps(rep, indent=1) + "\n")
        extra["correlation"] = {"cells": rep["cells"], "ratio": [sn["ratio"] for sn in rep["snapshots"]]}
    else:
        valid, invalid = run_grid(recipe, workers)
        labels = [label for label, _ in valid]
        table = None
        if base_rc.search.space == "micro":
            table = oracle_table(task_spec, "micro", cache_dir, workers)
        rows = summarize(recipe, labels, table)
        checks = []
        if not invalid:
            if recipe.name == "ablation_batch":
                checks = check_ablation_batch(rows)
            elif recipe.name == "ablation_lr":
                checks = check_ablation_lr(rows)
            elif recipe.name == "ablation_activation":
                checks = check_ablation_activation(rows)
            elif recipe.name == "collapse_repro":
                checks = check_collapse(recipe, rows)
        (out / "summary.md").write_text(markdown_table(rows))

    summary = ExperimentSummary(recipe.name, rows, checks, invalid, extra)
    (out / "summary.json").write_text(
        json.dumps(summary.to_dict(), indent=1, sort_keys=True, default=D._jsonable) + "\n"
    )
    for c in checks:
        log.info(c.line())
    return summary
