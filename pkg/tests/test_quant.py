from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from conftest import rel_error
from ternvit.quant import (
    QuantConfig,
    absmean_scale,
    dequantize,
    quantize_activations,
    quantize_weights,
    round_clip,
    round_half_away,
    ste_activation_grad,
    ste_weight_grad,
)
from ternvit.tensor import ShapeError

finite = st.floats(-3, 3, allow_nan=False, width=32)
matrices = arrays(np.float32, array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=12), elements=finite)


def decimal_round(x: float) -> int:
    return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def oracle_weights(w, eps=1e-6):
    """Elementwise evaluation with python floats and decimal rounding."""
    vals = [float(v) for v in np.ravel(w)]
    alpha = sum(abs(v) for v in vals) / len(vals)
    trits = [max(-1, min(1, decimal_round(v / (alpha + eps)))) for v in vals]
    return np.array(trits, dtype=np.int8).reshape(np.shape(w)), alpha


def oracle_codes(x, b=8, eps_gamma=1e-8):
    vals = [float(v) for v in np.ravel(x)]
    q = 2 ** (b - 1)
    gamma = max(max(abs(v) for v in vals), eps_gamma)
    codes = [max(-(q - 1), min(q - 1, decimal_round(v * q / gamma))) for v in vals]
    return np.array(codes).reshape(np.shape(x)), gamma


class TestConfig:
    def test_defaults(self):
        cfg = QuantConfig()
        assert (cfg.b, cfg.q_b, cfg.code_max) == (8, 128, 127)

    @pytest.mark.parametrize("kwargs", [{"b": 1}, {"eps": 0}, {"eps_gamma": -1}])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            QuantConfig(**kwargs)


class TestRoundClip:
    @pytest.mark.parametrize("x,want", [(0.4, 0), (-2.7, -1), (0.5, 1), (-0.5, -1), (1.5, 1), (0.49999999999999994, 0)])
    def test_examples(self, x, want):
        assert round_clip(x, -1, 1) == want

    def test_reversed_bounds(self):
        with pytest.raises(ValueError):
            round_clip(0.0, 1, -1)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-1e6, 1e6, allow_nan=False) | st.integers(-1000, 1000).map(lambda i: i + 0.5))
    def test_half_away_matches_decimal(self, x):
        assert round_half_away(x) == decimal_round(x)


class TestAbsmean:
    def test_examples(self):
        assert absmean_scale(np.zeros((2, 2))) == 0
        assert absmean_scale([[1, -1], [1, -1]]) == 1
        assert absmean_scale([[0.5, -1.2], [0.1, 0]]) == pytest.approx(0.45, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            absmean_scale(np.zeros((0, 3)))


class TestQuantizeWeights:
    def test_zeros(self):
        tw = quantize_weights(np.zeros((3, 4)))
        assert not tw.trits.any() and tw.beta == 0

    def test_hand_example(self):
        tw = quantize_weights(np.array([[0.5, -1.2], [0.1, 0.0]]))
        assert tw.trits.tolist() == [[1, -1], [0, 0]]
        assert tw.beta == pytest.approx(0.45, abs=1e-15)

    def test_needs_matrix(self):
        with pytest.raises(ShapeError):
            quantize_weights(np.ones(4))

    @settings(max_examples=150, deadline=None)
    @given(matrices)
    def test_trits_in_range_and_beta_is_alpha(self, w):
        tw = quantize_weights(w)
        assert set(np.unique(tw.trits)) <= {-1, 0, 1}
        assert tw.beta >= 0
        assert abs(tw.beta - absmean_scale(w)) <= 1e-12

    @settings(max_examples=150, deadline=None)
    @given(matrices)
    def test_matches_oracle(self, w):
        trits, alpha = oracle_weights(w)
        tw = quantize_weights(w)
        assert np.array_equal(tw.trits, trits)
        assert tw.beta == pytest.approx(alpha, rel=1e-12, abs=1e-300)

    @settings(max_examples=100, deadline=None)
    @given(matrices, st.sampled_from([0.25, 2.0, 8.0, 1024.0]))
    def test_scale_invariance(self, w, c):
        # exact power-of-two scaling; require alpha well above eps
        assume(absmean_scale(w) > 1e-2)
        a = quantize_weights(w.astype(np.float64)).trits
        b = quantize_weights(w.astype(np.float64) * c).trits
        # eps shifts the threshold by a relative 1e-6/alpha; ignore entries sitting that close to it
        scaled = np.abs(w / absmean_scale(w))
        near = np.abs(scaled - 0.5) < 1e-4
        assert np.array_equal(a[~near], b[~near])


class TestQuantizeActivations:
    def test_zeros(self):
        qa = quantize_activations(np.zeros(5))
        assert not qa.codes.any() and qa.gamma == 1e-8

    def test_hand_example(self):
        qa = quantize_activations(np.array([0.5, -1.0, 0.25]))
        assert qa.gamma == 1.0
        assert qa.codes.tolist() == [64, -127, 32]

    def test_single_max_element(self):
        assert quantize_activations(np.array([0.37])).codes.tolist() == [127]

    @settings(max_examples=150, deadline=None)
    @given(arrays(np.float32, array_shapes(max_dims=3, max_side=10), elements=st.floats(-1e3, 1e3, width=32)))
    def test_codes_in_range_and_match_oracle(self, x):
        qa = quantize_activations(x)
        codes, gamma = oracle_codes(x)
        assert qa.codes.min(initial=0) >= -127 and qa.codes.max(initial=0) <= 127
        assert qa.gamma >= 1e-8 and qa.gamma == gamma
        assert np.array_equal(qa.codes, codes)

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (4, 9), elements=st.floats(-5, 5)))
    def test_roundtrip_error_bound(self, x):
        qa = quantize_activations(x)
        step = qa.gamma / 128
        err = np.abs(x - dequantize(qa.codes, 1.0, qa.gamma))
        clamped = np.abs(qa.codes) == 127
        tol = 1e-12 * max(qa.gamma, 1)
        assert np.all(err[~clamped] <= step / 2 + tol)
        assert np.all(err[clamped] <= step + tol)

    def test_batch_dims_gives_one_gamma_per_item(self):
        x = np.stack([np.full((2, 3), 0.5), np.full((2, 3), 4.0)])
        qa = quantize_activations(x, batch_dims=1)
        assert np.ravel(qa.gamma).tolist() == [0.5, 4.0]
        assert np.all(qa.codes == 127)


class TestDequantize:
    def test_examples(self):
        assert dequantize(100, 0.45, 1.0) == pytest.approx(0.3515625, abs=1e-12)
        assert not dequantize(np.arange(5), 0.0, 3.0).any()
        assert dequantize(0, 7.0, 3.0) == 0


class TestSte:
    def test_weight_identity(self, rng):
        g = rng.standard_normal((3, 4))
        assert np.array_equal(ste_weight_grad(np.ones((3, 4)), (3, 4)), np.ones((3, 4)))
        assert np.array_equal(ste_weight_grad(g, (3, 4)), g)

    def test_weight_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ste_weight_grad(np.ones((3, 4)), (4, 3))

    def test_activation_passthrough(self, rng):
        x = rng.uniform(-0.5, 0.5, 10)
        g = rng.standard_normal(10)
        assert np.array_equal(ste_activation_grad(g, x, 1.0), g)

    def test_activation_saturated_zero(self):
        out = ste_activation_grad(np.ones(3), np.array([0.1, 2.0, -3.0]), 1.0)
        assert out.tolist() == [1.0, 0.0, 0.0]

    def test_activation_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ste_activation_grad(np.ones(3), np.ones(4), 1.0)

    def test_matches_clip_finite_differences(self, rng):
        gamma = 1.0
        x = rng.uniform(-2, 2, 40)
        x = x[np.abs(np.abs(x) - gamma) > 1e-2]  # keep away from the kinks
        r = rng.standard_normal(x.size)
        h = 1e-6
        fd = np.array([
            (np.dot(np.clip(x + h * e, -gamma, gamma), r) - np.dot(np.clip(x - h * e, -gamma, gamma), r)) / (2 * h)
            for e in np.eye(x.size)
        ])
        assert rel_error(ste_activation_grad(r, x, gamma), fd) < 1e-4
