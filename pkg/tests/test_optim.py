"""Optimizer tests: update rule, schedule, and the two group strategies."""

import numpy as np
import pytest

from collabtrain import autodiff as ad
from collabtrain.errors import ConfigError, TrainingDiverged
from collabtrain.graphs import HeadPattern, build_training_graph
from collabtrain.losses import CollabLossConfig
from collabtrain.netspec import DenseDef, NetSpec, ReluDef, SplitMarker
from collabtrain.optim import (
    SgdConfig,
    TrainState,
    compute_gradients,
    lr_at,
    schedule_lr,
    sgd_update,
    step_alternative,
    step_simultaneous,
)


def toy_spec():
    return NetSpec(
        input_shape=(4,),
        num_classes=3,
        layers=[DenseDef(4, 6), ReluDef(), DenseDef(6, 3)],
        splits=[SplitMarker("s1", 2)],
    )


def toy_batch(rng, n=8, d=4, m=3):
    x = rng.normal(size=(n, d))
    y = np.zeros((n, m))
    y[np.arange(n), rng.integers(m, size=n)] = 1.0
    return x, y


def loss_cfg(heads, **kw):
    kw.setdefault("beta", 1.0 if heads == 1 else 0.5)
    kw.setdefault("weight_decay", 0.0)
    return CollabLossConfig(num_heads=heads, **kw)


class TestSgdConfig:
    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            SgdConfig(lr=0.0)
        with pytest.raises(ConfigError):
            SgdConfig(momentum=1.0)
        with pytest.raises(ConfigError):
            SgdConfig(mode="other")
        with pytest.raises(ConfigError):
            SgdConfig(milestones=[(10, 10.0), (5, 10.0)])


class TestSchedule:
    def test_milestone_products(self):
        cfg = SgdConfig(lr=0.1, milestones=[(10, 10.0), (15, 10.0)])
        assert lr_at(cfg, 0) == pytest.approx(0.1)
        assert lr_at(cfg, 9) == pytest.approx(0.1)
        assert lr_at(cfg, 12) == pytest.approx(0.01)
        assert lr_at(cfg, 20) == pytest.approx(0.001)

    def test_state_updated_in_place(self):
        cfg = SgdConfig(lr=0.5, milestones=[(2, 5.0)])
        state = TrainState(epoch=3)
        assert schedule_lr(state, cfg) == pytest.approx(0.1)
        assert state.lr == pytest.approx(0.1)


class TestSgdUpdate:
    def test_plain_step_closed_form(self):
        # loss 0.5 w^2 has gradient w: one step shrinks w by (1 - lr)
        store = ad.ParameterStore()
        w = store.add("w", ad.Tensor([2.0]))
        w.grad = w.data.copy()
        sgd_update(store, ["w"], 0.1, SgdConfig(lr=0.1, momentum=0.0, nesterov=False))
        np.testing.assert_allclose(w.data, [2.0 * 0.9], rtol=1e-15)

    def test_three_nesterov_steps_match_hand_recursion(self):
        lr, mu = 0.05, 0.9
        curvature = np.array([1.0, 3.0])
        w_impl = np.array([1.0, -2.0])
        store = ad.ParameterStore()
        p = store.add("w", ad.Tensor(w_impl.copy()))
        cfg = SgdConfig(lr=lr, momentum=mu, nesterov=True)

        w_hand = w_impl.copy()
        v_hand = np.zeros(2)
        for _ in range(3):
            g_hand = curvature * w_hand
            v_hand = mu * v_hand + g_hand
            w_hand = w_hand - lr * (g_hand + mu * v_hand)

            p.grad = curvature * p.data
            sgd_update(store, ["w"], lr, cfg)

        np.testing.assert_allclose(p.data, w_hand, rtol=1e-14)

    def test_momentum_buffer_lives_in_store(self):
        store = ad.ParameterStore()
        p = store.add("w", ad.Tensor([1.0]))
        p.grad = np.array([0.5])
        sgd_update(store, ["w"], 0.1, SgdConfig(lr=0.1))
        assert "w" in store.momentum


class TestSimultaneous:
    def test_single_head_matches_textbook_step(self):
        spec = toy_spec()
        rng = np.random.default_rng(0)
        x, y = toy_batch(rng)
        tg = build_training_graph(spec, HeadPattern("individual"), "none", 1)
        ref = build_training_graph(spec, HeadPattern("individual"), "none", 1)

        cfg = SgdConfig(lr=0.1, momentum=0.0, nesterov=False, weight_decay=0.0)
        state = TrainState(lr=0.1)
        step_simultaneous(tg, x, y, loss_cfg(1), cfg, state)

        grads, _, _ = compute_gradients(ref, x, y, loss_cfg(1))
        for name, t in ref.store.items():
            np.testing.assert_array_equal(tg.store[name].data, t.data - 0.1 * grads[name])

    def test_every_parameter_updated_once(self):
        tg = build_training_graph(
            toy_spec(), HeadPattern("simple-ilr", 2, splits=["s1"]), "backprop-rescale", 2
        )
        rng = np.random.default_rng(1)
        x, y = toy_batch(rng)
        res = step_simultaneous(tg, x, y, loss_cfg(2), SgdConfig(lr=0.05), TrainState(lr=0.05))
        assert set(res.updates) == set(tg.store.names())
        assert all(v == 1 for v in res.updates.values())

    def test_one_forward_pass_per_batch(self):
        tg = build_training_graph(
            toy_spec(), HeadPattern("simple-ilr", 2, splits=["s1"]), "backprop-rescale", 2
        )
        rng = np.random.default_rng(2)
        x, y = toy_batch(rng)
        step_simultaneous(tg, x, y, loss_cfg(2), SgdConfig(lr=0.05), TrainState(lr=0.05))
        assert tg.forward_passes == 1

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        tg = build_training_graph(toy_spec(), HeadPattern("individual"), "none", 3)
        for t in tg.store.tensors():
            t.data *= 1e200
        rng = np.random.default_rng(3)
        x, y = toy_batch(rng)
        with pytest.raises(TrainingDiverged) as info, np.errstate(over="ignore"):
            step_simultaneous(
                tg, x, y, loss_cfg(1), SgdConfig(lr=0.1), TrainState(epoch=4, lr=0.1)
            )
        assert info.value.mode == "simultaneous"
        assert info.value.epoch == 4


class TestAlternative:
    def test_single_head_equals_simultaneous(self):
        spec = toy_spec()
        rng = np.random.default_rng(4)
        x, y = toy_batch(rng)
        a = build_training_graph(spec, HeadPattern("individual"), "none", 5)
        b = build_training_graph(spec, HeadPattern("individual"), "none", 5)
        cfg = SgdConfig(lr=0.1, weight_decay=0.0)
        step_simultaneous(a, x, y, loss_cfg(1), cfg, TrainState(lr=0.1))
        step_alternative(b, x, y, loss_cfg(1), cfg, TrainState(lr=0.1))
        for name, t in a.store.items():
            np.testing.assert_array_equal(t.data, b.store[name].data)

    def test_h_forward_passes_per_batch(self):
        tg = build_training_graph(
            toy_spec(), HeadPattern("simple-ilr", 2, splits=["s1"]), "backprop-rescale", 6
        )
        rng = np.random.default_rng(5)
        x, y = toy_batch(rng)
        step_alternative(tg, x, y, loss_cfg(2), SgdConfig(lr=0.05), TrainState(lr=0.05))
        assert tg.forward_passes == 2

    def test_shared_updated_every_substep_branches_once(self):
        tg = build_training_graph(
            toy_spec(), HeadPattern("simple-ilr", 3, splits=["s1"]), "backprop-rescale", 7
        )
        rng = np.random.default_rng(6)
        x, y = toy_batch(rng)
        res = step_alternative(tg, x, y, loss_cfg(3), SgdConfig(lr=0.05), TrainState(lr=0.05))
        for name, count in res.updates.items():
            assert count == (3 if name.startswith("trunk/") else 1), name

    def test_modes_diverge_after_first_batch(self):
        spec = toy_spec()
        rng = np.random.default_rng(7)
        x, y = toy_batch(rng, n=16)
        sim = build_training_graph(spec, HeadPattern("multi-instance", 2), "none", 8)
        alt = build_training_graph(spec, HeadPattern("multi-instance", 2), "none", 8)
        cfg = SgdConfig(lr=0.1)
        step_simultaneous(sim, x, y, loss_cfg(2), cfg, TrainState(lr=0.1))
        step_alternative(alt, x, y, loss_cfg(2), cfg, TrainState(lr=0.1))
        same = all(
            np.array_equal(t.data, alt.store[n].data) for n, t in sim.store.items()
        )
        assert not same


class TestLossScalePathology:
    def test_head_local_gradients_shrink_by_h(self):
        spec = toy_spec()
        rng = np.random.default_rng(8)
        x, y = toy_batch(rng)
        heads = 4
        none_tg = build_training_graph(spec, HeadPattern("simple-ilr", heads, splits=["s1"]), "none", 9)
        ls_tg = build_training_graph(
            spec, HeadPattern("simple-ilr", heads, splits=["s1"]), "loss-scale", 9
        )
        g_none, _, _ = compute_gradients(none_tg, x, y, loss_cfg(heads, scaling_mode="none"))
        g_ls, _, _ = compute_gradients(ls_tg, x, y, loss_cfg(heads, scaling_mode="loss-scale"))
        for name in g_none:
            if not name.startswith("trunk/"):
                np.testing.assert_allclose(g_ls[name], g_none[name] / heads, rtol=1e-12)


class TestTrainingSmoke:
    def test_loss_decreases_on_separable_toy_set(self):
        rng = np.random.default_rng(9)
        n = 60
        half = n // 2
        x = np.vstack(
            [
                rng.normal(loc=[2.0, 2.0, 0.0, 0.0], scale=0.4, size=(half, 4)),
                rng.normal(loc=[-2.0, -2.0, 0.0, 0.0], scale=0.4, size=(half, 4)),
            ]
        )
        y = np.zeros((n, 3))
        y[:half, 0] = 1.0
        y[half:, 1] = 1.0
        spec = toy_spec()
        tg = build_training_graph(spec, HeadPattern("individual"), "none", 10)
        cfg = SgdConfig(lr=0.05, momentum=0.9, weight_decay=0.0)
        state = TrainState(lr=0.05)
        losses = []
        for _ in range(8):
            res = step_simultaneous(tg, x, y, loss_cfg(1), cfg, state)
            losses.append(res.total)
        for prev, cur in zip(losses[1:], losses[2:]):
            assert cur < prev
