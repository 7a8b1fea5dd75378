import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sknas import superkernel as skm
from sknas import supernet_builder as snb
from sknas import tensor_core as tc
from sknas.supernet_builder import BlockSpec, DerivedArchitecture, MacroConfig
from sknas.tensor_core import Tensor

HARD = skm.IndicatorConfig()


def build(macro, seed=3):
    return snb.build_supernet(macro, HARD, np.random.default_rng(seed))


class TestMacroConfig:
    def test_single_layer_config_has_one_superkernel(self):
        macro = MacroConfig(stem_channels=4, blocks=(BlockSpec(1, 8, 1),),
                            head_channels=8, num_classes=2, input_resolution=8)
        net = build(macro)
        assert len(net.layers) == 1

    def test_mobile_config_has_22_layers(self):
        macro = snb.mobile22_config()
        assert macro.num_layers() == 22
        assert len(macro.layer_plans()) == 22

    def test_width_multiplier_halves_rounded_even(self):
        macro = snb.desk_config(width_multiplier=0.5)
        full = snb.desk_config()
        for half_plan, full_plan in zip(macro.layer_plans(), full.layer_plans()):
            assert half_plan.c_out == max(2, round(full_plan.c_out * 0.5 / 2) * 2)
            assert half_plan.c_out % 2 == 0

    def test_scaled_channels_positive_even(self):
        macro = snb.desk_config(width_multiplier=0.05)
        for plan in macro.layer_plans():
            assert plan.c_out >= 2 and plan.c_out % 2 == 0

    def test_stride_and_skip_rules(self):
        macro = snb.desk_config()
        plans = macro.layer_plans()
        # first layer of each block carries the block stride, rest stride 1
        strides = [p.stride for p in plans]
        assert strides == [1, 1, 2, 1, 2, 1]
        for p in plans:
            assert p.skip_allowed == (p.stride == 1 and p.c_in == p.c_out)

    def test_rejects_empty_blocks(self):
        with pytest.raises(ValueError):
            MacroConfig(stem_channels=4, blocks=(), head_channels=8, num_classes=2)

    def test_rejects_bad_block(self):
        with pytest.raises(ValueError):
            BlockSpec(5, 8, 1)
        with pytest.raises(ValueError):
            BlockSpec(1, 8, 3)


class TestDerivedArchitecture:
    def test_length_must_match(self, tiny_macro):
        with pytest.raises(ValueError, match="decisions"):
            DerivedArchitecture(((5, 6),), tiny_macro)

    def test_skip_rejected_where_disallowed(self, tiny_macro):
        with pytest.raises(ValueError, match="skip"):
            DerivedArchitecture((None, (5, 6)), tiny_macro)

    def test_unknown_decision_rejected(self, tiny_macro):
        with pytest.raises(ValueError, match="unknown"):
            DerivedArchitecture(((7, 6), (5, 6)), tiny_macro)


class TestSupernetForward:
    def test_output_shape(self, tiny_macro):
        net = build(tiny_macro)
        x = np.random.default_rng(0).random((3, 3, 16, 16))
        logits, gates = net.forward(Tensor(x))
        assert logits.shape == (3, 4)
        assert len(gates) == 2

    def test_forward_finite(self, tiny_macro):
        net = build(tiny_macro)
        x = np.random.default_rng(1).random((2, 3, 16, 16))
        logits, _ = net.forward(Tensor(x))
        assert np.all(np.isfinite(logits.data))


class TestFullNetworkMaskingEquivalence:
    @pytest.mark.parametrize("decisions", [
        ((5, 6), (5, 6)),
        ((3, 3), (3, 3)),
        ((3, 6), (5, 3)),
        ((5, 3), None),
        ((3, 3), None),
    ])
    def test_pinned_supernet_equals_discrete_copy(self, tiny_macro, decisions):
        net = build(tiny_macro, seed=7)
        arch = DerivedArchitecture(decisions, tiny_macro)
        disc = snb.build_discrete(arch, source=net)
        x = np.random.default_rng(5).random((2, 3, 16, 16))
        with tc.no_tape():
            lo_sup, _ = net.forward(Tensor(x), pins=list(decisions))
            lo_disc = disc.forward(Tensor(x))
        assert np.abs(lo_sup.data - lo_disc.data).max() < 1e-12

    def test_all_skip_reduces_to_stem_head(self):
        macro = MacroConfig(stem_channels=4, blocks=(BlockSpec(2, 4, 1),),
                            head_channels=8, num_classes=2, input_resolution=8)
        net = build(macro, seed=9)
        arch = DerivedArchitecture((None, None), macro)
        disc = snb.build_discrete(arch, source=net)
        assert all(layer is None for layer in disc.layers)
        x = np.random.default_rng(6).random((2, 3, 8, 8))
        with tc.no_tape():
            h = disc.stem.forward(Tensor(x))
            want = disc.head.forward(h)
            got = disc.forward(Tensor(x))
        assert np.array_equal(got.data, want.data)

    def test_copied_weights_share_values_not_storage(self, tiny_macro):
        net = build(tiny_macro, seed=8)
        arch = DerivedArchitecture(((3, 3), (5, 6)), tiny_macro)
        disc = snb.build_discrete(arch, source=net)
        sk = net.layers[0].sk
        assert np.array_equal(disc.layers[0].dw_w.data, sk.subset_weights((3, 3)))
        disc.layers[0].dw_w.data[...] += 1.0
        assert not np.array_equal(disc.layers[0].dw_w.data, sk.subset_weights((3, 3)))

    def test_macro_mismatch_rejected(self, tiny_macro):
        net = build(tiny_macro)
        other = MacroConfig(stem_channels=4, blocks=(BlockSpec(2, 8, 1),),
                            head_channels=8, num_classes=4, input_resolution=16)
        arch = DerivedArchitecture(((5, 6), (5, 6)), other)
        with pytest.raises(ValueError, match="macro"):
            snb.build_discrete(arch, source=net)


class TestParameterCounts:
    def test_supernet_equals_largest_discrete_plus_three_per_layer(self, tiny_macro):
        net = build(tiny_macro)
        largest = snb.build_discrete(
            DerivedArchitecture(((5, 6), (5, 6)), tiny_macro), rng=np.random.default_rng(0))
        assert snb.param_count(net) == snb.param_count(largest) + 3 * len(net.layers)

    def test_supernet_well_under_multipath_strawman(self, tiny_macro):
        # five separate max-capacity paths per layer is the memory baseline
        # a one-path-per-candidate supernet would pay
        net = build(tiny_macro)
        largest = snb.build_discrete(
            DerivedArchitecture(((5, 6), (5, 6)), tiny_macro), rng=np.random.default_rng(0))
        assert snb.param_count(net) < 5 * snb.param_count(largest) / 4


class TestEnumerateSpace:
    def test_two_skip_allowed_layers(self):
        macro = MacroConfig(stem_channels=4, blocks=(BlockSpec(2, 4, 1),),
                            head_channels=8, num_classes=2, input_resolution=8)
        assert snb.space_size(macro) == 25
        archs = list(snb.enumerate_space(macro))
        assert len(archs) == 25
        assert len({a.decisions for a in archs}) == 25

    def test_skip_disallowed_reduces_options(self):
        macro = MacroConfig(stem_channels=4, blocks=(BlockSpec(1, 8, 1), BlockSpec(2, 8, 1)),
                            head_channels=8, num_classes=2, input_resolution=8)
        # layer 0: 4->8 channels (no skip); layers 1-2: skip allowed
        assert snb.space_size(macro) == 4 * 5 * 5

    def test_mobile_space_size_without_iterating(self):
        macro = snb.mobile22_config()
        assert snb.nominal_space_size(macro) == 5**22
        # exact count: skip is illegal at the 7 block-opening layers
        assert snb.space_size(macro) == 4**7 * 5**15

    def test_cap_enforced(self):
        macro = snb.mobile22_config()
        with pytest.raises(snb.SpaceTooLargeError, match="sample"):
            next(iter(snb.enumerate_space(macro, cap=1000)))

    def test_enumeration_matches_closed_form(self, tiny_macro):
        assert len(list(snb.enumerate_space(tiny_macro))) == snb.space_size(tiny_macro)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.25, 3.0))
def test_property_width_scaling_monotone(multiplier):
    base = snb.desk_config()
    scaled = snb.desk_config(width_multiplier=multiplier)
    for bp, sp in zip(base.layer_plans(), scaled.layer_plans()):
        if multiplier >= 1.0:
            assert sp.c_out >= bp.c_out
        else:
            assert sp.c_out <= bp.c_out
