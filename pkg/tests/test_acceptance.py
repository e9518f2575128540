"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting, so a failing criterion still reports its measured numbers.
"""

import json
import time
import zlib

import numpy as np
import pytest
from conftest import record_criterion

from dartslab import autodiff as ad
from dartslab import experiments as X
from dartslab import search as T
from dartslab import space as S
from dartslab import theory as H

pytestmark = pytest.mark.slow


def _timed(fn):
    t = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t


# -- 1: gradients -----------------------------------------------------------------


def _primitive_cases():
    from test_autodiff import CASES

    return CASES


def test_criterion_1_gradients_match_finite_differences():
    def run():
        rng = np.random.default_rng(2024)
        supernet_worst, count = 0.0, 0
        for i in range(120):
            activation = S.ACTIVATIONS[i % 2]
            net = S.build_supernet(S.MICRO, 5, 3, 4, 1 + i % 2, activation, seed=i)
            net.alphas.alpha.data = rng.standard_normal(net.alphas.shape)
            x, labels = rng.standard_normal((8, 5)), rng.integers(3, size=8)
            res = ad.gradcheck(lambda: S.loss_and_logits(net, x, labels)[0],
                               net.arch_parameters() + net.weights(), floor=1e-6)
            supernet_worst = max(supernet_worst, res.max_rel_error)
            count += 1
        prim_worst = 0.0
        for case in _primitive_cases():
            prng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
            for _ in range(12):
                loss_fn, params = case(prng)
                prim_worst = max(prim_worst, ad.gradcheck(loss_fn, params, step=1e-5, floor=1e-6).max_rel_error)
        return count, supernet_worst, prim_worst

    (count, sup, prim), secs = _timed(run)
    ok = count >= 100 and sup <= 1e-3 and prim <= 1e-4 and secs < 60
    record_criterion(1, ok, f"{count} supernets (w+alpha, softmax+sigmoid) max rel err {sup:.2e} <= 1e-3; "
                            f"primitives {prim:.2e} <= 1e-4; {secs:.1f}s < 60s")
    assert ok


# -- 2-4: analytic results --------------------------------------------------------


def test_criterion_2_alpha_gap_widening_has_no_violations():
    rep, secs = _timed(lambda: H.check_gap_widening(target=10_000, seed=0))
    per_n = ", ".join(f"n={n}: {v}/{k}" for n, (k, v) in rep.by_n.items())
    ok = rep.premise_ok == 10_000 and rep.violations == 0 and secs < 10
    record_criterion(2, ok, f"{rep.violations}/{rep.premise_ok} premise-satisfying instances violate "
                            f"(by n: {per_n}); {secs:.1f}s < 10s")
    assert ok


def test_criterion_3_dominance_bound_and_monotonicity():
    def run():
        cases = H.sample_bound_cases(count=50, seed=0)
        return cases, H.bound_monotonicity()

    (cases, mono), secs = _timed(run)
    within = sum(c.within for c in cases)
    ratio = max(c.steps / c.bound for c in cases if c.steps is not None)
    ok = within == 50 and all(mono.values()) and secs < 30
    record_criterion(3, ok, f"{within}/50 configs within bound (worst steps/bound {ratio:.2f}); "
                            f"monotone {all(mono.values())}; {secs:.1f}s < 30s")
    assert ok


def test_criterion_4_score_ordering_violation_scaling():
    rep, secs = _timed(lambda: H.score_ordering_scaling(seed=0))
    worst = ", ".join(f"{s:g}:{v:.1e}" for s, v in zip(rep["scales"], rep["max_violation"]))
    ok = rep["passed"] and secs < 30
    record_criterion(4, ok, f"log-log slope {rep['slope']:.2f} >= 0.9 over {rep['fitted_points']} nonzero scales "
                            f"({worst}); {secs:.1f}s < 30s")
    assert ok


# -- 5: gradient correlation ------------------------------------------------------


def test_criterion_5_cross_batch_correlation_is_small(task, tmp_path_factory):
    rep, secs = _timed(lambda: X.correlation_study(task, "nas201-desk", pairs=200, warmup_epochs=(0, 10, 50)))
    out = tmp_path_factory.mktemp("corr") / "correlation.json"
    out.write_text(json.dumps(rep, indent=1))
    checks = X.check_correlation(rep)
    ratios = [max(s["ratio"][c] for c in rep["cells"].values()) for s in rep["snapshots"]]
    ok = all(c.passed for c in checks) and secs < 300
    detail = ", ".join(f"epoch {s['warmup_epochs']}: max ratio {r:.3f}" for s, r in zip(rep["snapshots"], ratios))
    record_criterion(5, ok, f"|cross|/same < 0.1 at first/middle/last cells: {detail}; "
                            f"{sum(c.passed for c in checks)}/{len(checks)} pass; {secs:.0f}s < 300s")
    assert ok


# -- 6-7: regime ordering on the micro space --------------------------------------


@pytest.fixture(scope="session")
def batch_study(tmp_path_factory, cache_dir):
    cached = any(cache_dir.glob("oracle-*.json"))
    recipe = X.make_recipe("ablation_batch", tmp_path_factory.mktemp("xp") / "ablation_batch")
    summary, secs = _timed(lambda: X.run_experiment(recipe, cache_dir=cache_dir))
    return summary, secs, cached


def test_criterion_6_regime_ordering(batch_study):
    summary, secs, cached = batch_study
    (check,) = summary.checks
    rows = {r["point"]: r for r in summary.rows}
    ranks = {k.split("=")[1]: rows[k]["ranks"] for k in rows}
    ok = check.passed and secs < 600
    note = " (oracle table from cache)" if cached else " (oracle built in this run)"
    record_criterion(6, ok, f"{check.detail}; ranks/27 {ranks}; {secs:.0f}s < 600s{note}")
    assert ok


def test_criterion_7_single_level_stability(batch_study):
    summary, _, _ = batch_study
    rows = {r["point"]: r for r in summary.rows}
    single = rows[f"regime={T.SINGLE}"]
    bilevel = rows[f"regime={T.BILEVEL}"]
    identical = len(set(single["architectures"])) == 1
    top = all(p <= 0.10 for p in single["percentiles"])
    worse = sum(b > s for b, s in zip(bilevel["percentiles"], single["percentiles"]))
    ok = identical and top and worse >= 4
    record_criterion(7, ok, f"single-level archs identical across seeds: {identical} "
                            f"({len(set(single['architectures']))} distinct), ranks {single['ranks']} "
                            f"(top 10% needs rank <= 2): {top}; bilevel strictly worse in {worse}/5")
    assert ok


# -- 8: ablation directions ---------------------------------------------------------


def test_criterion_8_ablation_directions(tmp_path_factory, cache_dir):
    root = tmp_path_factory.mktemp("xp8")
    lr = X.run_experiment(X.make_recipe("ablation_lr", root / "ablation_lr"), cache_dir=cache_dir)
    act = X.run_experiment(X.make_recipe("ablation_activation", root / "ablation_activation"), cache_dir=cache_dir)
    mono, band = lr.checks
    (sig,) = act.checks
    ok = mono.passed and band.passed and sig.passed
    record_criterion(8, ok, f"(a) bilevel {mono.detail} monotone: {mono.passed}; single-level {band.detail}: "
                            f"{band.passed}; (b) sigmoid vs softmax median percentile {sig.detail}: {sig.passed}")
    assert ok


# -- 9: determinism -------------------------------------------------------------


def test_criterion_9_repeated_runs_are_byte_identical(tmp_path):
    base = {"epochs": 2, "width": 6, "num_cells": 2, "task_n_train": 256, "task_n_val": 64, "task_n_test": 64}
    grid = [{"regime": r, "activation": a} for r in T.REGIMES for a in S.ACTIVATIONS]
    grid += [{"regime": T.BILEVEL, "space": "nas201-desk", "trace_corr": True}]
    same = 0
    for k in (0, 1):
        X.run_grid(X.Recipe("ablation_batch", grid, [0, 1], tmp_path / f"run{k}", base))
    a, b = sorted((tmp_path / "run0").rglob("trace.csv")), sorted((tmp_path / "run1").rglob("trace.csv"))
    for pa, pb in zip(a, b):
        same += pa.read_bytes() == pb.read_bytes()
    ok = len(a) == len(b) == 2 * len(grid) and same == len(a)
    record_criterion(9, ok, f"{same}/{len(a)} repeated runs produced byte-identical trace.csv")
    assert ok
