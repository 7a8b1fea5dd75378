import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sknas import superkernel as skm
from sknas import tensor_core as tc
from sknas.superkernel import IndicatorConfig, IndicatorMode
from sknas.tensor_core import Tensor

HARD = IndicatorConfig(temperature=1.0, mode=IndicatorMode.HARD_ST)
RELAXED = IndicatorConfig(temperature=1.0, mode=IndicatorMode.RELAXED)

ALL_DECISIONS = (None, (3, 3), (3, 6), (5, 3), (5, 6))


def make_sk(channels=8, seed=0, skip_allowed=True):
    return skm.make_superkernel(channels, 0, skip_allowed, np.random.default_rng(seed))


class TestGroupNormSq:
    def test_zero_subset(self):
        sk = make_sk()
        sk.weights.data[...] = 0.0
        assert skm.group_norm_sq(sk.weights, sk.shell_mask).item() == 0.0

    def test_all_ones_inner_single_channel(self):
        w = Tensor(np.zeros((2, 5, 5)))
        w.data[0, 1:4, 1:4] = 1.0
        mask = np.zeros((2, 5, 5))
        mask[0, 1:4, 1:4] = 1.0
        assert skm.group_norm_sq(w, mask).item() == 9.0

    def test_against_direct_loop(self):
        sk = make_sk(seed=3)
        got = skm.group_norm_sq(sk.weights, sk.half6_mask).item()
        want = 0.0
        w = sk.weights.data
        for c in range(sk.channels // 2, sk.channels):
            for a in range(5):
                for b in range(5):
                    want += w[c, a, b] ** 2
        assert abs(got - want) < 1e-12


class TestIndicator:
    def test_hard_forward_values_and_tie(self):
        t = Tensor(np.float64(5.0))
        assert skm.indicator(Tensor(np.float64(9.0)), t, HARD).item() == 1.0
        # tie resolves to the smaller architecture
        assert skm.indicator(Tensor(np.float64(9.0)), Tensor(np.float64(9.0)), HARD).item() == 0.0

    def test_relaxed_midpoint(self):
        for tau in (0.5, 1.0, 7.0):
            cfg = IndicatorConfig(temperature=tau, mode=IndicatorMode.RELAXED)
            out = skm.indicator(Tensor(np.float64(4.0)), Tensor(np.float64(4.0)), cfg)
            assert out.item() == 0.5

    def test_relaxed_one_temperature_above(self):
        out = skm.indicator(Tensor(np.float64(3.0)), Tensor(np.float64(2.0)), RELAXED)
        assert out.item() == pytest.approx(0.7310585786300049, abs=1e-12)

    @pytest.mark.parametrize("cfg", [HARD, RELAXED])
    def test_gradient_antisymmetry(self, cfg):
        # d(gate)/dt is the negation of d(gate)/d(norm), both nonzero off-saturation
        norm = Tensor(np.float64(1.3), requires_grad=True)
        t = Tensor(np.float64(1.0), requires_grad=True)
        with tc.Tape() as tape:
            gate = skm.indicator(norm, t, cfg)
            tc.backward(gate, tape)
        assert float(norm.grad) > 0.0
        assert float(t.grad) == -float(norm.grad)

    def test_straight_through_gradient_matches_relaxed(self):
        for value in (0.4, 2.1):
            g_by_mode = {}
            for cfg in (HARD, RELAXED):
                norm = Tensor(np.float64(value), requires_grad=True)
                with tc.Tape() as tape:
                    tc.backward(skm.indicator(norm, Tensor(np.float64(1.0)), cfg), tape)
                g_by_mode[cfg.mode] = float(norm.grad)
            assert g_by_mode[IndicatorMode.HARD_ST] == g_by_mode[IndicatorMode.RELAXED]

    def test_relaxed_gradient_matches_finite_differences(self):
        t = Tensor(np.float64(1.0))

        def f(norm):
            return skm.indicator(norm, t, RELAXED)

        err = tc.finite_difference_check(f, Tensor(np.float64(1.7), requires_grad=True))
        assert err < 1e-6

    def test_temperature_must_be_positive(self):
        with pytest.raises(ValueError):
            IndicatorConfig(temperature=0.0)


class TestEffectiveKernel:
    def test_all_open_equals_weights_exactly(self):
        sk = make_sk(seed=1)
        w_eff = skm.effective_kernel(sk, HARD, pin=(5, 6))
        assert np.array_equal(w_eff.data, sk.weights.data)

    def test_skip_is_all_zero(self):
        sk = make_sk(seed=2)
        w_eff = skm.effective_kernel(sk, HARD, pin=None)
        assert np.all(w_eff.data == 0.0)

    def test_masked_3x3_equals_extracted_center_conv(self):
        sk = make_sk(seed=3)
        x = np.random.default_rng(4).standard_normal((2, 8, 6, 6))
        out = skm.superkernel_forward(Tensor(x), sk, 1, HARD, pin=(3, 6))
        center = sk.subset_weights((3, 6))
        ref = tc.conv2d_depthwise(Tensor(x), Tensor(center), 1)
        assert np.abs(out.data - ref.data).max() < 1e-12
        assert np.all(skm.effective_kernel(sk, HARD, pin=(3, 6)).data * sk.shell_mask == 0.0)

    def test_unpinned_gates_follow_thresholds(self):
        sk = make_sk(seed=5)
        sk.t_k5.data = np.float64(1e9)  # force the shell off
        gates, w_eff = skm.gates_and_kernel(sk, HARD)
        assert float(gates.k5.data) == 0.0
        assert np.all(w_eff.data * sk.shell_mask == 0.0)


class TestMaskingEquivalence:
    """Pinned superkernel forward == discrete depthwise stage, per decision."""

    @pytest.mark.parametrize("decision", ALL_DECISIONS)
    @pytest.mark.parametrize("stride", [1, 2])
    def test_stage_equivalence(self, decision, stride):
        rng = np.random.default_rng(17)
        for draw in range(3):
            sk = make_sk(channels=8, seed=100 + draw)
            x = rng.standard_normal((2, 8, 6, 6))
            out = skm.superkernel_forward(Tensor(x), sk, stride, HARD, pin=decision)
            if decision is None:
                assert np.all(out.data == 0.0)
                continue
            k, e = decision
            rows = 4 if e == 3 else 8
            ref = tc.conv2d_depthwise(Tensor(x[:, :rows]), Tensor(sk.subset_weights(decision)), stride)
            assert np.abs(out.data[:, :rows] - ref.data).max() < 1e-12
            if rows < 8:
                assert np.all(out.data[:, rows:] == 0.0)

    def test_forward_gradients_reach_thresholds(self):
        sk = make_sk(channels=4, seed=6)
        x = np.random.default_rng(7).standard_normal((1, 4, 5, 5))
        cfg = IndicatorConfig(temperature=float(skm.derive_decision(sk).norm_sq_shell) or 1.0,
                              mode=IndicatorMode.RELAXED)

        def loss_for(threshold):
            def f(_):
                y = skm.superkernel_forward(Tensor(x), sk, 1, cfg)
                return tc.tsum(tc.mul(y, y))
            return f

        for t in (sk.t_k5, sk.t_e3, sk.t_e6):
            err = tc.finite_difference_check(loss_for(t), t)
            assert err < 1e-4, err


class TestWeightSharing:
    def test_views_alias_storage(self):
        sk = make_sk(seed=8)
        x = np.random.default_rng(9).standard_normal((1, 8, 5, 5))
        out3_before = skm.superkernel_forward(Tensor(x), sk, 1, HARD, pin=(3, 6)).data.copy()
        out5_before = skm.superkernel_forward(Tensor(x), sk, 1, HARD, pin=(5, 6)).data.copy()
        sk.inner_view()[...] += 0.25  # mutate the shared center through the view
        out3_after = skm.superkernel_forward(Tensor(x), sk, 1, HARD, pin=(3, 6)).data
        out5_after = skm.superkernel_forward(Tensor(x), sk, 1, HARD, pin=(5, 6)).data
        assert not np.allclose(out3_before, out3_after)
        assert not np.allclose(out5_before, out5_after)

    def test_half_views_partition_channels(self):
        sk = make_sk()
        assert sk.half3_view().shape[0] == sk.channels // 2
        assert sk.half3_view().base is sk.weights.data or sk.half3_view().base is sk.weights.data.base
        np.shares_memory(sk.half3_view(), sk.weights.data)


class TestSubsetDropout:
    def test_zero_probability_is_noop(self):
        sk = make_sk(seed=10)
        drop = skm.subset_dropout(sk, 0.0, 0.0, np.random.default_rng(0))
        assert not drop.active
        x = np.random.default_rng(1).standard_normal((1, 8, 5, 5))
        a = skm.superkernel_forward(Tensor(x), sk, 1, HARD)
        b = skm.superkernel_forward(Tensor(x), sk, 1, HARD, drop=drop)
        assert np.array_equal(a.data, b.data)

    def test_certain_drop_equals_gated_off_config(self):
        # p=1 for both subsets behaves exactly like the configuration whose
        # k5 and e6 gates are shut, with the skip gate evaluating naturally.
        sk = make_sk(seed=11)
        drop = skm.subset_dropout(sk, 1.0, 1.0, np.random.default_rng(0))
        assert drop.shell_dropped and drop.half6_dropped
        x = np.random.default_rng(2).standard_normal((2, 8, 6, 6))
        dropped = skm.superkernel_forward(Tensor(x), sk, 1, HARD, drop=drop)
        t_k5_orig, t_e6_orig = float(sk.t_k5.data), float(sk.t_e6.data)
        sk.t_k5.data = np.float64(np.inf)
        sk.t_e6.data = np.float64(np.inf)
        gated = skm.superkernel_forward(Tensor(x), sk, 1, HARD)
        sk.t_k5.data = np.float64(t_k5_orig)
        sk.t_e6.data = np.float64(t_e6_orig)
        assert np.abs(dropped.data - gated.data).max() < 1e-12

    def test_empirical_rate(self):
        sk = make_sk(seed=12)
        rng = np.random.default_rng(99)
        fired = sum(skm.subset_dropout(sk, 0.5, 0.0, rng).shell_dropped for _ in range(10_000))
        assert 0.48 <= fired / 10_000 <= 0.52

    def test_deterministic_under_seed(self):
        sk = make_sk(seed=13)
        draws1 = [(d.shell_dropped, d.half6_dropped) for d in
                  (skm.subset_dropout(sk, 0.3, 0.7, np.random.default_rng(5)) for _ in range(20))]
        draws2 = [(d.shell_dropped, d.half6_dropped) for d in
                  (skm.subset_dropout(sk, 0.3, 0.7, np.random.default_rng(5)) for _ in range(20))]
        assert draws1 == draws2


class TestDeriveDecision:
    def test_zero_weights_skip(self):
        sk = make_sk(seed=14)
        sk.weights.data[...] = 0.0
        sk.t_k5.data = np.float64(1.0)
        sk.t_e3.data = np.float64(1.0)
        sk.t_e6.data = np.float64(1.0)
        snap = skm.derive_decision(sk)
        assert snap.derived is None
        assert (snap.ind_k5, snap.ind_e3, snap.ind_e6) == (0.0, 0.0, 0.0)

    def test_all_gates_open(self):
        sk = make_sk(seed=15)
        for t in sk.thresholds():
            t.data = np.float64(1e-6)
        assert skm.derive_decision(sk).derived == (5, 6)

    def test_constructed_36_case(self):
        sk = make_sk(channels=4, seed=16)
        sk.weights.data[...] = 0.0
        sk.weights.data[:, 1:4, 1:4] = 1.0  # inner norm 9 per channel
        sk.weights.data[:, 0, 0] = np.sqrt(0.5)  # shell norm 2.0 total
        sk.t_k5.data = np.float64(3.0)
        sk.t_e3.data = np.float64(1.0)
        sk.t_e6.data = np.float64(1.0)
        snap = skm.derive_decision(sk)
        assert snap.norm_sq_shell == pytest.approx(2.0, abs=1e-12)
        assert snap.derived == (3, 6)

    def test_skip_disallowed_forces_e3_open(self):
        sk = make_sk(seed=17, skip_allowed=False)
        sk.weights.data[...] = 0.0
        assert skm.derive_decision(sk).derived == (3, 3)

    def test_snapshot_consistent_with_gate_bits(self):
        for seed in range(10):
            sk = make_sk(seed=200 + seed)
            sk.t_e3.data = np.float64(np.random.default_rng(seed).uniform(0, 60))
            snap = skm.derive_decision(sk)
            if snap.ind_e3 == 0.0:
                assert snap.derived is None
            else:
                assert snap.derived == (5 if snap.ind_k5 else 3, 6 if snap.ind_e6 else 3)


@settings(max_examples=60, deadline=None)
@given(
    norms=st.tuples(*[st.floats(0.01, 100.0) for _ in range(3)]),
    thresholds=st.tuples(*[st.floats(0.01, 100.0) for _ in range(3)]),
    skip_allowed=st.booleans(),
    power=st.sampled_from([0.5, 1.0, 3.0]),
)
def test_property_decision_invariant_under_monotone_rescaling(norms, thresholds, skip_allowed, power):
    shell, h3, h6 = norms
    tk, t3, t6 = thresholds
    base = skm.decide_from_norms(shell, tk, h3, t3, h6, t6, skip_allowed)
    # strictly monotone map applied to every norm/threshold pair
    f = lambda v: v**power
    mapped = skm.decide_from_norms(f(shell), f(tk), f(h3), f(t3), f(h6), f(t6), skip_allowed)
    assert base == mapped
