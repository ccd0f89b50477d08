import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from oracles import brute_nearest
from svquant import autograd as ag
from svquant.autograd import Tensor
from svquant.exceptions import ConfigurationError, CorruptionError, DimensionError, SigmaFloorWarning
from svquant.quantizer import (
    QuantizedTensor,
    QuantizerConfig,
    WeightQuantizer,
    alpha_grad_factor,
    clip,
    dequantize,
    fake_quantize,
    normalize,
    pot_levels,
    project,
    quant_error,
    quantize,
    ste_backward_alpha,
    ste_backward_w,
    uniform_levels,
)

bits_st = st.integers(2, 8)
scheme_st = st.sampled_from(["uniform", "pot"])
alpha_st = st.floats(0.05, 8.0)


def levels_of(scheme, alpha, bits):
    return (uniform_levels if scheme == "uniform" else pot_levels)(alpha, bits)


class TestNormalize:
    def test_degenerate_weights_floor_sigma(self):
        with pytest.warns(SigmaFloorWarning):
            out, mu, sigma = normalize(np.ones(4))
        np.testing.assert_array_equal(out, np.zeros(4))
        assert mu == 1.0 and sigma == pytest.approx(1e-8)

    def test_two_point(self):
        out, mu, sigma = normalize(np.array([0.0, 2.0]))
        np.testing.assert_array_equal(out, [-1.0, 1.0])
        assert (mu, sigma) == (1.0, 1.0)

    def test_random_statistics(self, rng):
        out, _, _ = normalize(rng.normal(3.0, 0.2, 1000))
        out = out.astype(np.float64)
        assert abs(out.mean()) < 1e-6
        assert abs(out.std() - 1) < 1e-6

    def test_empty(self):
        with pytest.raises(DimensionError):
            normalize(np.array([]))


class TestClip:
    @pytest.mark.parametrize("x,expected", [(1.7, 1.2), (-3.0, -1.2), (0.5, 0.5)])
    def test_examples(self, x, expected):
        assert clip(np.array([x]), 1.2)[0] == pytest.approx(expected)

    @pytest.mark.parametrize("alpha", [0.0, -1.0, float("nan")])
    def test_non_positive_alpha(self, alpha):
        with pytest.raises(ConfigurationError):
            clip(np.array([1.0]), alpha)


class TestLevels:
    def test_uniform_b2(self):
        np.testing.assert_array_equal(uniform_levels(1.0, 2).values, [-1, 0, 1])

    def test_uniform_b3_half_alpha(self):
        expected = np.float32([-0.5, -1 / 3, -1 / 6, 0, 1 / 6, 1 / 3, 0.5])
        np.testing.assert_array_equal(uniform_levels(0.5, 3).values, expected)

    def test_uniform_b4_step(self):
        v = uniform_levels(1.0, 4).values
        assert len(v) == 15
        np.testing.assert_allclose(np.diff(v.astype(np.float64)), 1 / 7, rtol=1e-6)

    def test_pot_b2_equals_uniform(self):
        np.testing.assert_array_equal(pot_levels(1.0, 2).values, uniform_levels(1.0, 2).values)

    def test_pot_b4(self):
        mags = [2.0**e for e in range(-6, 1)]
        np.testing.assert_array_equal(pot_levels(1.0, 4).values, np.float32([-m for m in mags[::-1]] + [0] + mags))

    def test_pot_b3_alpha2(self):
        np.testing.assert_array_equal(pot_levels(2.0, 3).values, [-2, -1, -0.5, 0, 0.5, 1, 2])

    @pytest.mark.parametrize("bits", [1, 9, 2.5])
    def test_invalid_bits(self, bits):
        with pytest.raises(ConfigurationError):
            uniform_levels(1.0, bits)
        with pytest.raises(ConfigurationError):
            pot_levels(1.0, bits)

    @given(scheme_st, alpha_st, bits_st)
    def test_count_and_symmetry(self, scheme, alpha, bits):
        v = levels_of(scheme, alpha, bits).values
        assert len(v) == 2**bits - 1
        np.testing.assert_array_equal(v, -v[::-1])
        assert v[len(v) // 2] == 0
        assert np.all(np.diff(v) > 0)
        assert v[-1] == np.float32(alpha)

    @given(scheme_st, alpha_st, bits_st, st.floats(0.1, 10))
    def test_scale_equivariance(self, scheme, alpha, bits, c):
        a = levels_of(scheme, alpha, bits).magnitudes
        b = levels_of(scheme, c * alpha, bits).magnitudes
        np.testing.assert_allclose(b, c * a, rtol=1e-12)

    @given(alpha_st)
    def test_b2_coincidence(self, alpha):
        np.testing.assert_array_equal(uniform_levels(alpha, 2).values, pot_levels(alpha, 2).values)


class TestProject:
    def test_nearest(self):
        q = project(np.array([0.4]), uniform_levels(1.0, 3))
        assert q.values()[0] == np.float32(1 / 3)

    def test_tie_goes_away_from_zero(self):
        q = project(np.array([0.5, -0.5]), uniform_levels(1.0, 3))
        np.testing.assert_array_equal(q.values(), np.float32([2 / 3, -2 / 3]))

    def test_level_is_fixed_point(self):
        levels = pot_levels(1.0, 4)
        q = project(np.array([2.0**-3]), levels)
        assert q.values()[0] == 0.125
        assert quant_error(np.array([0.125]), quantize(np.array([0.125]), QuantizerConfig("pot", 4, 1.0), refit=False)).total == 0

    def test_codes_in_range(self, rng):
        for bits in range(2, 9):
            q = project(rng.uniform(-3, 3, 1000), uniform_levels(3.0, bits))
            assert q.codes.dtype == np.uint8
            assert q.codes.max() <= 2**bits - 2

    @given(scheme_st, st.sampled_from([0.5, 1.0, 2.0, 3.0]), bits_st, st.integers(0, 2**31 - 1))
    def test_projection_optimality(self, scheme, alpha, bits, seed):
        levels = levels_of(scheme, alpha, bits)
        x = np.random.default_rng(seed).uniform(-alpha, alpha, 200)
        got = project(x, levels).values().astype(np.float64)
        exact = levels.magnitudes
        full = np.concatenate([-exact[::-1], [0.0], exact])
        np.testing.assert_array_equal(got, brute_nearest(x, full).astype(np.float32))

    @given(bits_st, st.integers(1, 200))
    def test_exact_midpoints_round_outward(self, bits, k):
        # with alpha = half the uniform levels are the integers, so k + 1/2 is an exact tie
        half = 2 ** (bits - 1) - 1
        k = k % half
        x = k + 0.5
        code = project(np.array([x, -x]), uniform_levels(float(half), bits)).codes
        assert code[0] == half + k + 1 and code[1] == half - k - 1


class TestQuantize:
    def test_levels_round_trip(self, rng):
        cfg = QuantizerConfig("uniform", 3, 1.0, mu=0.5, sigma=2.0)
        codes = rng.integers(0, 7, 64).astype(np.uint8)
        v = cfg.levels.values[codes].astype(np.float64)
        q = quantize(cfg.mu + cfg.sigma * v, cfg, refit=False)
        np.testing.assert_array_equal(q.codes, codes)

    def test_prenormalized_example(self):
        q = quantize(np.array([0.0, 0.25, 1.0]), QuantizerConfig("uniform", 2, 1.0), refit=False)
        np.testing.assert_array_equal(q.values(), [0, 0, 1])

    def test_stores_stats(self, rng):
        w = rng.normal(2.0, 0.5, 100)
        q = quantize(w, QuantizerConfig("pot", 4, 2.5))
        assert q.config.mu == pytest.approx(w.mean(), rel=1e-6)
        assert q.config.sigma == pytest.approx(w.std(), rel=1e-6)
        assert q.config.alpha == 2.5

    def test_pot_concentrates_mass_inward(self, rng):
        w = rng.normal(size=20000)
        pot = quantize(w, QuantizerConfig("pot", 4, 3.0)).values()
        uni = quantize(w, QuantizerConfig("uniform", 4, 3.0)).values()
        # PoT has levels close to zero, so fewer weights collapse onto zero
        assert np.mean(pot == 0) < np.mean(uni == 0)
        assert np.mean(np.abs(pot) <= 0.75) > np.mean(np.abs(uni) <= 0.75)

    @given(scheme_st, bits_st, st.floats(0.5, 4.0), st.integers(0, 2**31 - 1))
    def test_idempotence(self, scheme, bits, alpha, seed):
        w = np.random.default_rng(seed).normal(0.1, 0.3, 50).astype(np.float32)
        cfg = QuantizerConfig(scheme, bits, alpha)
        q = quantize(w, cfg)
        q2 = quantize(dequantize(q), q.config, refit=False)
        np.testing.assert_array_equal(q.codes, q2.codes)


class TestDequantize:
    def test_zero_codes_give_mu(self):
        cfg = QuantizerConfig("uniform", 4, 3.0, mu=0.25, sigma=2.0)
        q = QuantizedTensor(np.full(5, cfg.levels.half, dtype=np.uint8), cfg)
        np.testing.assert_array_equal(dequantize(q), np.full(5, 0.25, np.float32))

    def test_identity_stats(self):
        cfg = QuantizerConfig("pot", 3, 2.0)
        q = QuantizedTensor(np.arange(7, dtype=np.uint8), cfg)
        np.testing.assert_array_equal(dequantize(q), cfg.levels.values)

    def test_out_of_range_code(self):
        q = QuantizedTensor(np.array([3], dtype=np.uint8), QuantizerConfig("uniform", 2, 1.0))
        with pytest.raises(CorruptionError):
            dequantize(q)


class TestQuantError:
    def test_hand_example(self):
        w = np.array([0.0, 0.25, 1.0])
        err = quant_error(w, quantize(w, QuantizerConfig("uniform", 2, 1.0), refit=False))
        assert err.total == pytest.approx(0.0625)
        assert err.average == pytest.approx(0.0625 / 3)

    def test_shape_mismatch(self):
        q = quantize(np.zeros(3) + np.arange(3), QuantizerConfig("uniform", 2, 1.0))
        with pytest.raises(DimensionError):
            quant_error(np.zeros(4), q)

    @pytest.mark.parametrize("scheme", ["uniform", "pot"])
    def test_monotone_in_bits(self, scheme):
        w = np.random.default_rng(7).normal(size=100_000)
        errs = [quant_error(w, quantize(w, QuantizerConfig(scheme, b, 3.0))).average for b in range(2, 9)]
        assert all(a >= b for a, b in zip(errs, errs[1:]))
        assert errs[6] < errs[2] < errs[0]


class TestSte:
    def test_sign_branch(self):
        assert ste_backward_alpha(np.array([1.5]), np.array([1.0]), 1.0, np.array([1.0])) == 1.0
        assert ste_backward_alpha(np.array([-1.5]), np.array([-1.0]), 1.0, np.array([1.0])) == -1.0

    def test_interior_branch(self):
        q = project(np.array([0.4]), uniform_levels(1.0, 3))
        assert ste_backward_alpha(np.array([0.4]), q, 1.0, np.array([1.0])) == pytest.approx(1 / 3 - 0.4, abs=1e-7)

    def test_on_level_contributes_nothing(self):
        assert ste_backward_alpha(np.array([0.5]), np.array([0.5]), 1.0, np.array([1.0])) == 0.0

    def test_invalid_alpha(self):
        with pytest.raises(ConfigurationError):
            alpha_grad_factor(np.array([0.1]), np.array([0.0]), 0.0)

    def test_weight_path_is_identity(self):
        np.testing.assert_array_equal(ste_backward_w(np.array([1.0, 2.0, 3.0])), [1, 2, 3])
        assert ste_backward_w(0.0) == 0.0

    def test_master_weight_sgd_step(self, rng):
        w = Tensor(rng.normal(size=50) * np.where(np.arange(50) < 5, 10, 1), requires_grad=True)
        alpha = Tensor([1.0], requires_grad=True)
        upstream = rng.normal(size=50)
        out = fake_quantize(w, alpha, "uniform", 3)
        ag.tsum(ag.mul(out, Tensor(upstream))).backward()
        lr = 0.01
        stepped = w.data - lr * w.grad
        np.testing.assert_allclose(stepped, w.data - lr * upstream.astype(np.float32), rtol=1e-6)

    def test_fake_quantize_on_levels(self, rng):
        w = Tensor(rng.normal(0.2, 0.1, (4, 6)), requires_grad=True)
        out = fake_quantize(w, Tensor([2.0]), "pot", 4)
        q = out.quantized
        np.testing.assert_array_equal(out.data, dequantize(q))
        ref = quantize(w.data, QuantizerConfig("pot", 4, 2.0))
        np.testing.assert_array_equal(q.codes, ref.codes)

    def test_fake_quantize_alpha_grad(self, rng):
        w = Tensor(rng.normal(size=30), requires_grad=True)
        alpha = Tensor([1.3], requires_grad=True)
        g = rng.normal(size=30)
        out = fake_quantize(w, alpha, "uniform", 4)
        ag.tsum(ag.mul(out, Tensor(g))).backward()
        q = out.quantized
        w_norm = (w.data.astype(np.float64) - q.config.mu) / q.config.sigma
        expected = q.config.sigma * ste_backward_alpha(w_norm, q, q.config.alpha, g)
        assert alpha.grad[0] == pytest.approx(expected, rel=1e-4)


class TestWeightQuantizer:
    def test_params_and_clone(self):
        est = WeightQuantizer("pot", 4, 2.0)
        assert est.get_params() == {"scheme": "pot", "bits": 4, "alpha": 2.0}
        assert clone(est).get_params() == est.get_params()

    def test_fit_transform(self, rng):
        w = rng.normal(1.0, 0.5, (8, 8))
        est = WeightQuantizer("uniform", 8).fit(w)
        out = est.transform(w)
        assert out.shape == w.shape
        assert np.abs(out - w).max() < 0.5 * 3.0 / 127 * 0.5 + 1e-3
        assert len(est.levels_) == 255
        assert est.quantization_error(w) < 1e-3

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            WeightQuantizer().transform(np.ones((2, 2)))
