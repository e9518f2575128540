import numpy as np
import pytest

from dartslab import autodiff as ad
from dartslab import optim
from dartslab import search as T
from dartslab import space as S


def _cfg(**kw):
    base = dict(epochs=2, batch_size=32, width=6, num_cells=2, seed=3)
    base.update(kw)
    return T.SearchConfig(**base)


def _state(cfg, task):
    return T.SearchState.create(T.build_for(cfg, task), cfg)


def _weights(net):
    return [w.data.copy() for w in net.weights()]


def test_bilevel_on_one_batch_moves_alpha_like_single_level(small_task):
    batch = small_task.train.subset(np.arange(32))
    bi = _state(_cfg(regime=T.BILEVEL), small_task)
    single = _state(_cfg(regime=T.SINGLE), small_task)
    T.bilevel_step(bi, batch, batch, check_splits=False)
    T.single_level_step(single, batch)
    assert np.array_equal(bi.net.alphas.alpha.data, single.net.alphas.alpha.data)
    # w differs: bilevel takes its w step after alpha has moved
    assert any(not np.array_equal(a, b) for a, b in zip(_weights(bi.net), _weights(single.net)))


def test_single_level_update_uses_gradients_at_the_old_point(small_task):
    cfg = _cfg(regime=T.SINGLE)
    st = _state(cfg, small_task)
    batch = small_task.train.subset(np.arange(32))
    net = st.net
    params = net.arch_parameters() + net.weights()
    before = [p.data.copy() for p in params]
    with ad.Tape() as tape:
        loss, _ = S.loss_and_logits(net, batch.x, batch.labels)
    g = tape.backward(loss)
    grads = [g[p].copy() for p in params]
    T.single_level_step(st, batch)

    shadow = [ad.Tensor(b.copy()) for b in before]
    optim.step(shadow[:1], grads[:1], cfg.alpha_optimizer.fresh())
    optim.step(shadow[1:], grads[1:], cfg.w_optimizer.fresh())
    for p, s in zip(params, shadow):
        assert np.allclose(p.data, s.data, rtol=0, atol=1e-15)


def test_same_subset_with_identical_batches_is_sequential_single_level(small_task):
    batch = small_task.train.subset(np.arange(32, 64))
    a = _state(_cfg(regime=T.SAME_SUBSET), small_task)
    b = _state(_cfg(regime=T.SINGLE, simultaneous=False), small_task)
    for _ in range(3):
        T.same_subset_diff_batch_step(a, batch, batch)
        T.single_level_step(b, batch)
    for p, q in zip(a.net.arch_parameters() + a.net.weights(), b.net.arch_parameters() + b.net.weights()):
        assert np.array_equal(p.data, q.data)


def test_frozen_alpha_still_trains_weights(small_task):
    cfg = _cfg(regime=T.SINGLE, epochs=4, alpha_optimizer=optim.adam(lr=0.0))
    net = T.build_for(cfg, small_task)
    alpha0 = net.alphas.alpha.data.copy()
    res = T.run_search(cfg, small_task, net)
    assert np.array_equal(res.final_alphas.alpha.data, alpha0)
    losses = np.array([r.loss_train for r in res.trace])
    k = len(losses) // 4
    assert losses[-k:].mean() < losses[:k].mean()


def test_joint_gradient_matches_finite_differences(rng):
    for activation in S.ACTIVATIONS:
        net = S.build_supernet(S.MICRO, 5, 3, 4, 2, activation, seed=1)
        net.alphas.alpha.data = rng.standard_normal(net.alphas.shape)
        x, labels = rng.standard_normal((8, 5)), rng.integers(3, size=8)
        res = ad.gradcheck(lambda: S.loss_and_logits(net, x, labels)[0], net.arch_parameters() + net.weights(),
                           floor=1e-6)
        assert res.ok(1e-3), res.max_rel_error


def test_zero_epochs_returns_initial_architecture(small_task):
    res = T.run_search(_cfg(epochs=0), small_task)
    assert res.trace == []
    assert res.architecture == S.discretize(S.AlphaSet.initial(S.MICRO), S.MICRO)


@pytest.mark.parametrize("regime", T.REGIMES)
def test_runs_are_deterministic(regime, small_task):
    a = T.run_search(_cfg(regime=regime), small_task)
    b = T.run_search(_cfg(regime=regime), small_task)
    assert a.final_alphas.alpha.data.tobytes() == b.final_alphas.alpha.data.tobytes()
    assert [r.loss_train for r in a.trace] == [r.loss_train for r in b.trace]


def test_bilevel_rejects_overlapping_batches(small_task):
    st = _state(_cfg(regime=T.BILEVEL), small_task)
    with pytest.raises(T.ConfigError):
        T.bilevel_step(st, small_task.train.subset(np.arange(10)), small_task.train.subset(np.arange(5, 15)))


def test_bilevel_plan_draws_from_disjoint_halves(small_task):
    cfg = _cfg(regime=T.BILEVEL)
    from dartslab import data
    subsets = data.split_for_bilevel(small_task.train, cfg.seed)
    for a, w in T.epoch_plan(cfg, small_task, 0, subsets):
        assert not np.intersect1d(a.indices, w.indices).size


def test_provenance_tags(small_task):
    tags = {}
    for regime in T.REGIMES:
        rec = T.run_search(_cfg(regime=regime, epochs=1), small_task).trace[0]
        tags[regime] = (rec.provenance, rec.w_provenance, rec.loss_val is not None)
    assert tags[T.BILEVEL] == ("val", "train", True)
    assert tags[T.SINGLE] == ("train", "train", False)
    assert tags[T.SAME_SUBSET] == ("train", "train", False)


def test_bad_config_values_rejected():
    for kw in ({"regime": "trilevel"}, {"activation": "relu"}, {"order": "random"}, {"epochs": -1},
               {"lr_schedule": "step"}, {"space": "nope"}):
        with pytest.raises((T.ConfigError, ValueError)):
            _cfg(**kw).validate()


def test_failure_mid_search_keeps_partial_trace(small_task, monkeypatch):
    real = S.loss_and_logits
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 5:
            raise FloatingPointError("injected")
        return real(*a, **kw)

    monkeypatch.setattr(S, "loss_and_logits", flaky)
    with pytest.raises(T.SearchAborted) as exc:
        T.run_search(_cfg(regime=T.SINGLE), small_task)
    assert len(exc.value.result.trace) == 4
    assert "step 4" in str(exc.value)
