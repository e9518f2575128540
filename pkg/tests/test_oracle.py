import json

import numpy as np
import pytest

from dartslab import oracle
from dartslab import space as S

TINY = S.CellSpec.full(3, ("none", "skip_connect", "nor_conv_1x1"))
BUDGET = oracle.TrainBudget(epochs=2, batch_size=64, width=6, num_cells=1)


def _table(means: dict, spec=S.MICRO) -> oracle.OracleTable:
    entries = [oracle.OracleEntry(S.Architecture(a), v, 0.0, 0) for a, v in means.items()]
    return oracle.OracleTable(spec, entries, "x", oracle.TrainBudget(), (0,))


def test_enumeration_covers_the_space_in_order():
    archs = oracle.enumerate_architectures(S.MICRO)
    assert len(archs) == 27 == len(set(archs))
    assert archs[0].choice == ("none",) * 3
    assert archs[1].choice == ("none", "none", "skip_connect")
    assert archs[-1].choice == ("nor_conv_3x3",) * 3


def test_large_space_needs_explicit_opt_in(small_task):
    with pytest.raises(ValueError, match="allow_large"):
        oracle.evaluate_all(S.NAS201_DESK, small_task)


def test_table_is_deterministic_and_cached(small_task, tmp_path, monkeypatch):
    a = oracle.evaluate_all(TINY, small_task, BUDGET, seeds=(0, 1), cache_dir=tmp_path)
    b = oracle.evaluate_all(TINY, small_task, BUDGET, seeds=(0, 1))
    assert [e.val_accuracy for e in a.entries] == [e.val_accuracy for e in b.entries]
    assert len(a) == 27 and len(a.entries) == 54

    def boom(_):
        raise AssertionError("cache miss")

    monkeypatch.setattr(oracle, "_job", boom)
    c = oracle.evaluate_all(TINY, small_task, BUDGET, seeds=(0, 1), cache_dir=tmp_path)
    assert c.mean_accuracy() == a.mean_accuracy()


def test_parallel_matches_serial(small_task):
    spec = S.CellSpec.full(2, ("skip_connect", "nor_conv_1x1"))
    serial = oracle.evaluate_all(spec, small_task, BUDGET)
    parallel = oracle.evaluate_all(spec, small_task, BUDGET, workers=2)
    assert [e.val_accuracy for e in serial.entries] == [e.val_accuracy for e in parallel.entries]


def test_json_round_trip():
    t = _table({("skip",) * 3: 0.5, ("linear3", "skip", "none"): 0.75})
    back = oracle.OracleTable.from_json(json.loads(json.dumps(t.to_json())))
    assert back.mean_accuracy() == t.mean_accuracy()
    assert back.spec == t.spec and back.budget == t.budget


def test_rank_ties_share_the_best_rank():
    t = _table({("skip",) * 3: 0.5, ("linear3",) * 3: 0.9, ("none",) * 3: 0.9, ("linear3", "skip", "skip"): 0.7})
    assert oracle.rank_of(S.Architecture(("linear3",) * 3), t) == (1, 0.25)
    assert oracle.rank_of(S.Architecture(("none",) * 3), t) == (1, 0.25)
    assert oracle.rank_of(S.Architecture(("skip",) * 3), t) == (4, 1.0)
    assert t.best() == S.Architecture(("linear3",) * 3)
    with pytest.raises(KeyError):
        oracle.rank_of(S.Architecture(("skip", "none", "none")), t)


def test_signal_critical_edges():
    best = ("linear3", "linear3", "skip")
    t = _table({
        best: 0.9,
        ("skip", "linear3", "skip"): 0.6,  # edge 0 carries the signal
        ("linear3", "skip", "skip"): 0.88,  # edge 1 does not
    })
    assert oracle.signal_critical_edges(t) == [0]
    no_identity = S.CellSpec.full(3, ("none", "nor_conv_3x3"))
    with pytest.raises(ValueError):
        oracle.signal_critical_edges(_table({("none",) * 3: 0.1}, no_identity))


@pytest.mark.slow
def test_trained_network_beats_identity_on_the_default_task(micro_table):
    means = micro_table.mean_accuracy()
    assert len(micro_table) == 27
    assert means[S.Architecture(("skip",) * 3)] < means[micro_table.best()] - 0.3
    assert np.all(np.isfinite([e.train_loss for e in micro_table.entries]))
