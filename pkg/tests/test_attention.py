"""Residual attention module: mask identity, shapes, and gradient flow."""

import numpy as np
import pytest

import nlran.modules as mod
import nlran.ops as ops
import nlran.tensor as T
from nlran.errors import ConfigError, ShapeError


def build64():
    return mod.Builder(seed=0, dtype=np.float64)


def make_input(rng, channels=4, spatial=(4, 8, 8)):
    return T.Tensor(rng.standard_normal((1, channels) + spatial) * 0.5)


class TestForward:
    def test_output_is_one_plus_mask_times_trunk(self):
        # Rebuild the trunk/mask paths by hand and verify H = (1 + M) * F.
        rng = np.random.default_rng(0)
        att = mod.AttentionModule(4, build64(), down_steps=1, post_units=0)
        x = make_input(rng)
        collect = []
        h = att.forward(x, collect=collect)
        m = collect[0]

        t = x
        for unit in att.pre:
            t = unit.forward(t)
        f = t
        for unit in att.trunk:
            f = unit.forward(f)
        np.testing.assert_allclose(h.data, (1.0 + m.data) * f.data, atol=1e-12)

    def test_preserves_shape(self):
        rng = np.random.default_rng(1)
        for steps, spatial in ((1, (2, 4, 6)), (2, (4, 4, 8))):
            att = mod.AttentionModule(4, build64(), down_steps=steps)
            x = make_input(rng, spatial=spatial)
            assert att.forward(x).shape == x.shape
            assert att.out_shape(x.shape[1:]) == x.shape[1:]

    def test_mask_in_unit_interval(self):
        rng = np.random.default_rng(2)
        att = mod.AttentionModule(4, build64(), down_steps=2, variant="mixed")
        collect = []
        att.forward(make_input(rng), collect=collect)
        m = collect[0].data
        assert m.min() > 0.0 and m.max() < 1.0

    @pytest.mark.parametrize("variant", ["mixed", "channel", "spatial"])
    def test_variants_run(self, variant):
        rng = np.random.default_rng(3)
        att = mod.AttentionModule(4, build64(), down_steps=1, variant=variant)
        out = att.forward(make_input(rng, spatial=(2, 4, 4)))
        assert np.all(np.isfinite(out.data))

    def test_collect_is_pure_observation(self):
        rng = np.random.default_rng(4)
        att = mod.AttentionModule(4, build64(), down_steps=1)
        x = make_input(rng, spatial=(2, 4, 4))
        plain = att.forward(x).data
        observed = att.forward(x, collect=[]).data
        np.testing.assert_array_equal(plain, observed)

    def test_indivisible_extent_rejected(self):
        att = mod.AttentionModule(4, build64(), down_steps=2)
        with pytest.raises(ShapeError):
            att.forward(T.Tensor(np.zeros((1, 4, 4, 6, 8))))  # 6 % 4 != 0

    def test_channel_mismatch_rejected(self):
        att = mod.AttentionModule(4, build64(), down_steps=1)
        with pytest.raises(ShapeError):
            att.forward(T.Tensor(np.zeros((1, 3, 2, 4, 4))))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigError):
            mod.AttentionModule(4, build64(), variant="gaussian")


class TestGradients:
    def test_both_branches_receive_gradient(self):
        rng = np.random.default_rng(5)
        att = mod.AttentionModule(8, build64(), down_steps=1)
        x = make_input(rng, channels=8, spatial=(2, 4, 4))
        T.tsum(att.forward(x) * rng.standard_normal(x.shape)).backward()
        trunk_norm = sum(np.abs(p.grad).sum() for p in att.trunk[0].parameters())
        mask_norm = sum(np.abs(p.grad).sum() for p in att.down_units[0].parameters())
        assert trunk_norm > 0.0
        assert mask_norm > 0.0

    def test_end_to_end_finite_difference(self):
        rng = np.random.default_rng(6)
        att = mod.AttentionModule(4, build64(), down_steps=1, trunk_units=1,
                                  post_units=0)
        weights = rng.standard_normal((1, 4, 2, 4, 4))
        x = T.Tensor(rng.standard_normal((1, 4, 2, 4, 4)) * 0.5, requires_grad=True)
        err = T.finite_difference_check(
            lambda t: T.tsum(att.forward(t) * weights), x
        )
        assert err < 1e-6


class TestAccounting:
    def test_param_count_independent_of_down_steps_minus_skips(self):
        b1, b2 = build64(), build64()
        one = mod.AttentionModule(8, b1, down_steps=1)
        two = mod.AttentionModule(8, b2, down_steps=2)
        n1 = sum(p.count for p in one.parameters())
        n2 = sum(p.count for p in two.parameters())
        # two extra units (down+up) plus one skip unit
        unit_params = sum(p.count for p in one.trunk[0].parameters())
        assert n2 - n1 == 3 * unit_params

    def test_flops_positive_and_shape_preserving(self):
        att = mod.AttentionModule(8, mod.Builder(seed=0, meta=True), down_steps=2)
        flops, shape = att.flops((8, 4, 8, 8))
        assert flops > 0
        assert shape == (8, 4, 8, 8)

    def test_meta_build_declares_without_allocating(self):
        att = mod.AttentionModule(8, mod.Builder(seed=0, meta=True), down_steps=2)
        for p in att.parameters():
            assert p.is_meta
            assert p.count == int(np.prod(p.declared_shape))
