"""Net description, multi-head graph generation, and extraction tests."""

import numpy as np
import pytest

from collabtrain import autodiff as ad
from collabtrain.errors import ConfigError
from collabtrain.graphs import (
    HeadPattern,
    build_single_network,
    build_training_graph,
    clone_branch_parameters,
    extract_inference_graph,
    parameter_counts,
)
from collabtrain.netspec import (
    AvgPoolDef,
    ConvDef,
    DenseDef,
    FlattenDef,
    NetSpec,
    ReluDef,
    SplitMarker,
)


def mlp_spec():
    return NetSpec(
        input_shape=(6,),
        num_classes=4,
        layers=[DenseDef(6, 8), ReluDef(), DenseDef(8, 8), ReluDef(), DenseDef(8, 4)],
        splits=[SplitMarker("s1", 2), SplitMarker("s2", 4)],
    )


def cnn_spec():
    return NetSpec(
        input_shape=(1, 6, 6),
        num_classes=3,
        layers=[
            ConvDef(1, 4, 3, pad=1),
            ReluDef(),
            AvgPoolDef(2),
            FlattenDef(),
            DenseDef(36, 8),
            ReluDef(),
            DenseDef(8, 3),
        ],
        splits=[SplitMarker("s1", 4), SplitMarker("s2", 6)],
    )


def weighted_logit_loss(logits, weights):
    """Scalar from each head's logits with a fixed weighting; identical heads
    then have identical per-head losses."""
    terms = [ad.reduce_sum(ad.mul(z, ad.constant(weights))) for z in logits]
    return ad.sum_scalars(terms), terms


class TestNetSpec:
    def test_shape_inference_chain(self):
        shapes = cnn_spec().infer_shapes()
        assert shapes[0] == (1, 6, 6)
        assert shapes[3] == (4, 3, 3)
        assert shapes[-1] == (3,)

    def test_incompatible_chain_rejected(self):
        with pytest.raises(ConfigError, match="layer 1"):
            NetSpec((4,), 3, layers=[DenseDef(4, 5), DenseDef(6, 3)])

    def test_wrong_final_shape_rejected(self):
        with pytest.raises(ConfigError, match="final layer"):
            NetSpec((4,), 3, layers=[DenseDef(4, 5)])

    def test_split_ordering_enforced(self):
        with pytest.raises(ConfigError, match="strictly ordered"):
            NetSpec(
                (6,),
                4,
                layers=mlp_spec().layers,
                splits=[SplitMarker("a", 4), SplitMarker("b", 2)],
            )

    def test_split_inside_range(self):
        with pytest.raises(ConfigError, match="outside"):
            NetSpec((6,), 4, layers=mlp_spec().layers, splits=[SplitMarker("a", 5)])

    def test_json_round_trip(self, tmp_path):
        spec = cnn_spec()
        path = tmp_path / "net.json"
        spec.save(path)
        back = NetSpec.load(path)
        assert back.to_json() == spec.to_json()
        assert back.param_count() == spec.param_count()

    def test_param_count_by_hand(self):
        # dense 6x8+8, dense 8x8+8, dense 8x4+4
        assert mlp_spec().param_count() == 56 + 72 + 36


class TestHeadPattern:
    def test_hierarchical_branching_must_multiply_to_heads(self):
        with pytest.raises(ConfigError, match="branching product"):
            HeadPattern("hierarchical-ilr", heads=4, splits=["s1", "s2"], branching=[2, 3])

    def test_hierarchical_defaults_to_binary_levels(self):
        p = HeadPattern("hierarchical-ilr", heads=4, splits=["s1", "s2"])
        assert p.branching == [2, 2]

    def test_simple_needs_one_split(self):
        with pytest.raises(ConfigError):
            HeadPattern("simple-ilr", heads=2, splits=["s1", "s2"])

    def test_individual_alias(self):
        p = HeadPattern("individual")
        assert p.variant == "multi-instance" and p.heads == 1

    def test_zero_heads_rejected(self):
        with pytest.raises(ConfigError):
            HeadPattern("multi-instance", heads=0)


class TestBuild:
    def test_multi_instance_two_disjoint_copies(self):
        spec = mlp_spec()
        tg = build_training_graph(spec, HeadPattern("multi-instance", 2), "backprop-rescale", 0)
        counts = parameter_counts(tg)
        assert counts.total == 2 * spec.param_count()
        # branch point at the input carries no rescale node
        assert [bp.rescale_factor for bp in tg.branch_points] == [None]
        assert set(tg.segment_paths()) == {"trunk", "b0", "b1"}

    def test_simple_ilr_one_rescale_factor_quarter(self):
        spec = mlp_spec()
        tg = build_training_graph(
            spec, HeadPattern("simple-ilr", 4, splits=["s1"]), "backprop-rescale", 0
        )
        assert len(tg.branch_points) == 1
        assert tg.branch_points[0].rescale_factor == 0.25
        counts = parameter_counts(tg)
        trunk = 56  # dense(6,8) counted once
        assert counts.per_segment["trunk"] == trunk
        assert counts.total == trunk + 4 * (72 + 36)

    def test_no_rescale_nodes_under_other_modes(self):
        spec = mlp_spec()
        for mode in ("none", "loss-scale"):
            tg = build_training_graph(spec, HeadPattern("simple-ilr", 2, splits=["s1"]), mode, 0)
            assert all(bp.rescale_factor is None for bp in tg.branch_points)

    def test_hierarchical_per_level_factors(self):
        spec = mlp_spec()
        tg = build_training_graph(
            spec,
            HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]),
            "backprop-rescale",
            0,
        )
        assert [bp.rescale_factor for bp in tg.branch_points] == [0.5, 0.5, 0.5]
        assert tg.num_heads == 4

    def test_structural_symmetry_every_head(self):
        for spec in (mlp_spec(), cnn_spec()):
            for pattern in (
                HeadPattern("multi-instance", 3),
                HeadPattern("simple-ilr", 2, splits=["s1"]),
                HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]),
            ):
                tg = build_training_graph(spec, pattern, "backprop-rescale", 5)
                want = [d.kind for d in spec.layers]
                for h in range(1, tg.num_heads + 1):
                    net = extract_inference_graph(tg, h)
                    assert [l.kind for l in net.layers] == want
                    assert net.param_count() == spec.param_count()

    def test_branches_initialized_pairwise_distinct(self):
        tg = build_training_graph(
            mlp_spec(), HeadPattern("simple-ilr", 3, splits=["s1"]), "backprop-rescale", 9
        )
        branch_ws = [tg.store[f"b{i}/02-dense/w"].data for i in range(3)]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(branch_ws[i], branch_ws[j])

    def test_same_seed_rebuild_is_identical(self):
        a = build_training_graph(mlp_spec(), HeadPattern("simple-ilr", 2, splits=["s1"]), "none", 3)
        b = build_training_graph(mlp_spec(), HeadPattern("simple-ilr", 2, splits=["s1"]), "none", 3)
        for name, t in a.store.items():
            assert np.array_equal(t.data, b.store[name].data)

    def test_param_head_mapping(self):
        tg = build_training_graph(
            mlp_spec(),
            HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]),
            "backprop-rescale",
            0,
        )
        assert tg.param_heads["trunk/00-dense/w"] == frozenset(range(4))
        assert tg.param_heads["b0/02-dense/w"] == frozenset({0, 1})
        assert tg.param_heads["b1.b1/04-dense/w"] == frozenset({3})


class TestGradientScaling:
    def _trunk_grads(self, tg):
        return {
            n: t.grad.copy()
            for n, t in tg.store.items()
            if n.startswith("trunk/") and t.grad is not None
        }

    @pytest.mark.parametrize("heads", [2, 4])
    def test_rescaled_shared_gradient_is_mean_of_head_gradients(self, heads):
        spec = mlp_spec()
        rng = np.random.default_rng(17)
        x = rng.normal(size=(5, 6))
        w = rng.normal(size=(5, 4))
        pattern = HeadPattern("simple-ilr", heads, splits=["s1"])

        per_head_sum = None
        tg_none = build_training_graph(spec, pattern, "none", 2)
        clone_branch_parameters(tg_none)
        for h in range(heads):
            tg_none.store.zero_grad()
            logits = tg_none.forward(x)
            ad.reduce_sum(ad.mul(logits[h], ad.constant(w))).backward()
            grads = self._trunk_grads(tg_none)
            if per_head_sum is None:
                per_head_sum = grads
            else:
                per_head_sum = {n: per_head_sum[n] + g for n, g in grads.items()}

        # mode none: total-loss gradient equals the plain sum
        tg_none.store.zero_grad()
        total, _ = weighted_logit_loss(tg_none.forward(x), w)
        total.backward()
        for n, g in self._trunk_grads(tg_none).items():
            np.testing.assert_allclose(g, per_head_sum[n], rtol=1e-12, atol=1e-14)

        # backprop-rescale: exactly the mean
        tg_rs = build_training_graph(spec, pattern, "backprop-rescale", 2)
        clone_branch_parameters(tg_rs)
        total, _ = weighted_logit_loss(tg_rs.forward(x), w)
        total.backward()
        for n, g in self._trunk_grads(tg_rs).items():
            np.testing.assert_allclose(g, per_head_sum[n] / heads, rtol=1e-12, atol=1e-14)

    def test_hierarchical_matches_simple_bottom_gradient(self):
        spec = mlp_spec()
        rng = np.random.default_rng(23)
        x = rng.normal(size=(4, 6))
        w = rng.normal(size=(4, 4))

        simple = build_training_graph(
            spec, HeadPattern("simple-ilr", 4, splits=["s1"]), "backprop-rescale", 2
        )
        clone_branch_parameters(simple)
        hier = build_training_graph(
            spec, HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]), "backprop-rescale", 2
        )
        # align every hierarchical parameter with the simple graph's values
        p1 = spec.split_position("s1")
        for name, tensor in hier.store.items():
            path, rest = name.split("/", 1)
            gi = int(rest.split("-")[0])
            src = f"trunk/{rest}" if gi < p1 else f"b0/{rest}"
            tensor.data[...] = simple.store[src].data

        total_s, _ = weighted_logit_loss(simple.forward(x), w)
        total_s.backward()
        total_h, _ = weighted_logit_loss(hier.forward(x), w)
        total_h.backward()
        for n, t in simple.store.items():
            if n.startswith("trunk/"):
                np.testing.assert_allclose(
                    hier.store[n].grad, t.grad, rtol=1e-12, atol=1e-14
                )

    def test_head_local_gradients_unaffected_by_rescale(self):
        # the rescale node sits below the branches: branch params see the
        # same gradient with and without it
        spec = mlp_spec()
        rng = np.random.default_rng(29)
        x = rng.normal(size=(3, 6))
        w = rng.normal(size=(3, 4))
        grads = {}
        for mode in ("none", "backprop-rescale"):
            tg = build_training_graph(spec, HeadPattern("simple-ilr", 2, splits=["s1"]), mode, 4)
            total, _ = weighted_logit_loss(tg.forward(x), w)
            total.backward()
            grads[mode] = {
                n: t.grad.copy() for n, t in tg.store.items() if n.startswith("b0/")
            }
        for n, g in grads["none"].items():
            np.testing.assert_allclose(grads["backprop-rescale"][n], g, rtol=1e-12)


class TestExtraction:
    def test_single_head_extraction_is_identity(self):
        spec = mlp_spec()
        tg = build_training_graph(spec, HeadPattern("individual"), "none", 1)
        net = extract_inference_graph(tg, 1)
        x = np.random.default_rng(0).normal(size=(7, 6))
        np.testing.assert_array_equal(net.forward(x).data, tg.forward(x)[0].data)

    @pytest.mark.parametrize(
        "pattern",
        [
            HeadPattern("multi-instance", 2),
            HeadPattern("simple-ilr", 2, splits=["s1"]),
            HeadPattern("hierarchical-ilr", 4, splits=["s1", "s2"]),
        ],
    )
    def test_extraction_bitwise_for_every_head(self, pattern):
        spec = cnn_spec()
        tg = build_training_graph(spec, pattern, "backprop-rescale", 8)
        rng = np.random.default_rng(12)
        for _ in range(10):
            x = rng.normal(size=(2, 1, 6, 6))
            logits = tg.forward(x)
            for h in range(1, tg.num_heads + 1):
                out = extract_inference_graph(tg, h).forward(x)
                assert out.data.tobytes() == logits[h - 1].data.tobytes()

    def test_head_index_out_of_range(self):
        tg = build_training_graph(mlp_spec(), HeadPattern("multi-instance", 2), "none", 0)
        for bad in (0, 3):
            with pytest.raises(ConfigError, match="out of range"):
                extract_inference_graph(tg, bad)


class TestParameterCounts:
    def test_multi_instance_proportional(self):
        spec = mlp_spec()
        tg = build_training_graph(spec, HeadPattern("multi-instance", 4), "none", 0)
        assert parameter_counts(tg).total == 4 * spec.param_count()

    def test_simple_ilr_shared_fraction(self):
        spec = mlp_spec()
        tg = build_training_graph(spec, HeadPattern("simple-ilr", 2, splits=["s1"]), "none", 0)
        single = spec.param_count()
        shared = 56
        assert parameter_counts(tg).total == shared + 2 * (single - shared)

    def test_single_head_equals_single_net(self):
        spec = cnn_spec()
        tg = build_training_graph(spec, HeadPattern("individual"), "none", 0)
        report = parameter_counts(tg)
        assert report.total == report.single == spec.param_count()

    def test_build_single_network_helper(self):
        net, store = build_single_network(mlp_spec(), 3)
        assert net.param_count() == mlp_spec().param_count() == store.total_size()
