import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from snnqp.quant import (
    QuantConfig,
    induced_sparsity,
    init_scales,
    initial_config,
    parse_precision,
    qat_backward,
    quantize,
    quantize_codes,
    round_half_away,
)

finite = st.floats(-50, 50, allow_nan=False)
configs = st.builds(QuantConfig, bits=st.sampled_from([2, 3, 4, 6, 8]), ternary=st.booleans(),
                    s_in=st.floats(0.01, 10), s_out=st.floats(0.01, 10))


class TestQuantize:
    @pytest.mark.parametrize("x, code", [(2.4, 2), (5.7, 3), (-9.0, -4), (0.0, 0)])
    def test_three_bit_examples(self, x, code):
        assert quantize(np.array([x]), QuantConfig(bits=3))[0] == code

    @pytest.mark.parametrize("x, code", [(1.4, 0), (1.6, 1), (-4.6, -1)])
    def test_ternary_examples(self, x, code):
        assert quantize(np.array([x]), QuantConfig(ternary=True, s_in=3.0))[0] == code

    def test_half_away_from_zero(self):
        np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5])), [1, -1, 2, -3])

    def test_output_scale(self):
        cfg = QuantConfig(bits=4, s_in=0.5, s_out=0.25)
        np.testing.assert_array_equal(quantize(np.array([1.0, -0.74]), cfg), [0.5, -0.25])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            quantize(np.array([np.inf]), QuantConfig())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            QuantConfig(bits=1)
        with pytest.raises(ValueError):
            QuantConfig(s_in=0.0)
        with pytest.raises(ValueError):
            QuantConfig(delta=-0.1)

    def test_parse_precision(self):
        assert parse_precision("ternary") == (2, True)
        assert parse_precision("6b") == (6, False)
        assert parse_precision(4) == (4, False)

    @given(arrays(float, st.integers(1, 50), elements=finite), configs)
    def test_range_membership(self, x, cfg):
        lo, hi = (-1, 1) if cfg.ternary else (-(2 ** (cfg.bits - 1)), 2 ** (cfg.bits - 1) - 1)
        codes = quantize_codes(x, cfg)
        assert set(codes.tolist()) <= set(range(lo, hi + 1))
        np.testing.assert_array_equal(quantize(x, cfg), codes * cfg.s_out)

    @given(arrays(float, st.integers(1, 50), elements=finite), configs)
    def test_idempotent_with_equal_scales(self, x, cfg):
        cfg = cfg.with_scales(cfg.s_in, cfg.s_in)
        once = quantize(x, cfg)
        np.testing.assert_array_equal(quantize(once, cfg), once)

    @given(arrays(float, st.integers(2, 50), elements=finite), configs)
    def test_monotone(self, x, cfg):
        xs = np.sort(x)
        assert np.all(np.diff(quantize(xs, cfg)) >= 0)

    @given(arrays(float, st.integers(1, 50), elements=finite), st.floats(0.01, 10))
    def test_sparsity_monotone_in_bits(self, x, s):
        cfgs = [QuantConfig(ternary=True, s_in=s)] + [QuantConfig(bits=b, s_in=s) for b in (3, 4, 6, 8)]
        sp = [induced_sparsity(quantize(x, c)) for c in cfgs]
        assert all(a >= b for a, b in zip(sp, sp[1:]))


class TestInitScales:
    def test_mean_plus_three_std(self):
        w = np.array([0.1 - 0.2, 0.1 + 0.2])
        s_in, s_out = init_scales(w)
        assert s_in == s_out == pytest.approx(0.7)

    def test_standard(self):
        assert init_scales(np.array([-1.0, 1.0]))[0] == pytest.approx(3.0)

    def test_constant_fallback(self):
        assert init_scales(np.full(5, 0.5)) == (0.5, 0.5)

    def test_zero_tensor_floor(self):
        assert init_scales(np.zeros(3)) == (1e-8, 1e-8)

    def test_negative_mean_fallback(self):
        w = np.array([-10.0, -10.0, -10.0, -9.0])
        assert init_scales(w)[0] == pytest.approx(3 * w.std())

    def test_empty(self):
        with pytest.raises(ValueError):
            init_scales(np.zeros(0))

    @pytest.mark.parametrize("precision, hi", [("8b", 127), ("3b", 3), ("ternary", 1)])
    def test_initial_config_places_top_code_at_range(self, precision, hi):
        bits, ternary = parse_precision(precision)
        w = np.random.default_rng(0).normal(size=500)
        cfg = initial_config(w, QuantConfig(bits=bits, ternary=ternary))
        assert cfg.s_in * hi == pytest.approx(init_scales(w)[0])
        assert cfg.s_in == cfg.s_out


class TestQatBackward:
    def test_gradient_scaling_example(self):
        cfg = QuantConfig(bits=3, delta=0.1)
        x = np.array([2.4])
        gx, _, _ = qat_backward(np.array([1.0]), x, quantize(x, cfg), cfg)
        assert gx[0] == pytest.approx(1.04, abs=1e-12)

    def test_clipped_region_zero(self):
        cfg = QuantConfig(bits=3, delta=0.1)
        x = np.array([5.7, -9.0])
        gx, _, _ = qat_backward(np.ones(2), x, quantize(x, cfg), cfg)
        np.testing.assert_array_equal(gx, [0.0, 0.0])

    @given(arrays(float, st.integers(1, 30), elements=finite), configs,
           arrays(float, 30, elements=st.floats(-5, 5)))
    def test_zero_delta_is_straight_through(self, x, cfg, up):
        cfg = QuantConfig(cfg.bits, cfg.ternary, cfg.s_in, cfg.s_out, delta=0.0)
        g = up[:x.size]
        gx, _, _ = qat_backward(g, x, quantize(x, cfg), cfg)
        lo, hi = cfg.levels
        inside = (x / cfg.s_in >= lo) & (x / cfg.s_in <= hi)
        np.testing.assert_array_equal(gx, np.where(inside, g, 0.0))

    def test_scale_gradients_match_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2.5, 2.5, 40)
        up = rng.normal(size=40)
        cfg = QuantConfig(bits=3, s_in=0.9, s_out=0.7)
        _, _, gs_out = qat_backward(up, x, quantize(x, cfg), cfg)
        h = 1e-6
        f = lambda s: float(np.sum(up * quantize(x, cfg.with_scales(cfg.s_in, s))))
        assert gs_out == pytest.approx((f(0.7 + h) - f(0.7 - h)) / (2 * h), rel=1e-6)

    def test_shape_mismatch(self):
        cfg = QuantConfig()
        with pytest.raises(ValueError):
            qat_backward(np.ones(2), np.ones(2), np.ones(3), cfg)


class TestInducedSparsity:
    def test_examples(self):
        assert induced_sparsity(np.zeros(4)) == 1.0
        assert induced_sparsity(np.array([1, 0, 0, 2])) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            induced_sparsity(np.zeros(0))

    def test_ternary_normal_matches_analytic(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        sp = induced_sparsity(quantize(x, QuantConfig(ternary=True, s_in=3.0)))
        analytic = math.erf(1.5 / math.sqrt(2))
        assert analytic == pytest.approx(0.8664, abs=1e-4)
        assert abs(sp - analytic) <= 0.01
