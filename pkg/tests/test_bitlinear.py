import numpy as np
import pytest

from conftest import check_gradients
from ternvit.bitlinear import BitLinearLayer, StateError, layer_norm
from ternvit.quant import QuantConfig, absmean_scale, quantize_weights
from ternvit.tensor import ShapeError, Tensor, backward, cross_entropy, mean, sum_all
from ternvit.train import AdamW
from ternvit.trit_pack import OpCounter


class TestLayerNorm:
    def test_constant_row(self):
        assert not layer_norm(Tensor([[4.0, 4.0, 4.0]])).data.any()

    def test_one_two_three(self):
        out = layer_norm(Tensor([[1.0, 2.0, 3.0]])).data
        assert np.allclose(out, [[-1.2247, 0.0, 1.2247]], atol=1e-3)

    def test_random_rows_standardized(self, rng):
        out = layer_norm(Tensor(rng.normal(3, 5, (16, 64)))).data
        assert np.allclose(out.mean(axis=1), 0, atol=1e-6)
        assert np.allclose(out.var(axis=1), 1, atol=1e-3)

    def test_gradient(self, rng):
        x, r = rng.normal(0, 2, (3, 7)), rng.standard_normal((3, 7))
        assert check_gradients(lambda t: sum_all(layer_norm(t) * Tensor(r)), [x]) < 1e-4

    def test_gradient_batched(self, rng):
        x, r = rng.normal(0, 2, (2, 3, 5)), rng.standard_normal((2, 3, 5))
        assert check_gradients(lambda t: sum_all(layer_norm(t) * Tensor(r)), [x]) < 1e-4


def small_example(ln_eps):
    layer = BitLinearLayer(2, 1, weight=np.array([[1.0, -1.0]]), ln_eps=ln_eps)
    return layer, Tensor([[3.0, -1.0]])


class TestForward:
    # [3, -1] has mean 1 and variance 4, so LN gives [1, -1] / sqrt(1 + ln_eps/4).
    # gamma shrinks by the same factor, codes stay at +-127, and the output is
    # 254 / 128 / sqrt(1 + ln_eps/4).
    @pytest.mark.parametrize("ln_eps", [1e-12, 1e-9])
    def test_hand_example_tiny_eps(self, ln_eps):
        layer, x = small_example(ln_eps)
        assert layer.forward_train(x).data[0, 0] == pytest.approx(1.984375, abs=1e-6)
        layer.freeze()
        assert layer.forward_inference(x).data[0, 0] == pytest.approx(1.984375, abs=1e-6)

    def test_hand_example_default_eps(self):
        layer, x = small_example(1e-5)
        expected = 254 / 128 / np.sqrt(1 + 1e-5 / 4)
        assert layer.forward_train(x).data[0, 0] == pytest.approx(expected, abs=1e-6)
        assert layer.forward_train(x).data[0, 0] == pytest.approx(1.984375, abs=1e-5)

    def test_zero_weight(self, rng):
        layer = BitLinearLayer(5, 3, weight=np.zeros((3, 5)))
        out = layer.forward_train(Tensor(rng.standard_normal((4, 5))))
        assert not out.data.any()
        backward(sum_all(out))
        assert layer.latent_weight.grad.shape == (3, 5)
        assert np.all(np.isfinite(layer.latent_weight.grad))
        assert layer.latent_weight.grad.any()

    def test_column_mismatch(self):
        with pytest.raises(ShapeError):
            BitLinearLayer(4, 2).forward_train(Tensor(np.ones((1, 3))))

    def test_weight_shape_checked(self):
        with pytest.raises(ShapeError):
            BitLinearLayer(4, 2, weight=np.ones((4, 2)))

    def test_zero_input_inference(self, rng):
        layer = BitLinearLayer(6, 4, rng=rng)
        layer.freeze()
        assert not layer.forward_inference(Tensor(np.zeros((3, 6)))).data.any()


class TestFreeze:
    def test_idempotent_and_consistent(self, rng):
        layer = BitLinearLayer(13, 7, rng=rng)
        a = layer.freeze()
        b = layer.freeze()
        assert a.packed == b.packed and a.beta == b.beta
        assert a.beta == absmean_scale(layer.latent_weight.data)
        assert np.array_equal(a.trits, quantize_weights(layer.latent_weight.data).trits)

    def test_inference_requires_freeze(self):
        with pytest.raises(StateError):
            BitLinearLayer(3, 2).forward_inference(Tensor(np.ones((1, 3))))

    def test_drop_latent(self, rng):
        layer = BitLinearLayer(5, 2, rng=rng)
        layer.freeze(drop_latent=True)
        assert layer.latent_weight is None and layer.parameters() == []
        with pytest.raises(StateError):
            layer.unfreeze()
        with pytest.raises(StateError):
            layer.forward_train(Tensor(np.ones((1, 5))))

    def test_call_dispatches_on_state(self, rng):
        layer = BitLinearLayer(5, 3, rng=rng)
        x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
        assert layer(x).requires_grad
        layer.freeze()
        assert not layer(x).requires_grad
        layer.unfreeze()
        assert layer.frozen is None


class TestPathEquivalence:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_layers(self, seed):
        rng = np.random.default_rng(seed)
        m, n = rng.integers(1, 80, 2)
        layer = BitLinearLayer(int(m), int(n), rng=rng)
        x = Tensor(rng.normal(0, 3, (int(rng.integers(1, 9)), int(m))).astype(np.float32))
        train = layer.forward_train(x).data
        layer.freeze()
        counter = OpCounter()
        infer = layer.forward_inference(x, counter).data
        assert np.max(np.abs(train - infer)) < 1e-6
        assert counter.mults == 0

    def test_batched_per_item_gamma(self, rng):
        layer = BitLinearLayer(16, 8, rng=rng)
        x = rng.standard_normal((3, 5, 16)).astype(np.float32)
        x[1] *= 50
        batched = layer.forward_train(Tensor(x)).data
        single = np.stack([layer.forward_train(Tensor(x[i])).data for i in range(3)])
        assert np.array_equal(batched, single)
        layer.freeze()
        assert np.max(np.abs(layer.forward_inference(Tensor(x)).data - batched)) < 1e-6


class TestSte:
    def test_hooks_see_ternary_and_codes(self, rng):
        seen = []
        layer = BitLinearLayer(9, 4, rng=rng)
        layer.hooks.append(lambda lyr, trits, codes: seen.append((trits.copy(), codes.copy())))
        layer.forward_train(Tensor(rng.standard_normal((3, 9))))
        trits, codes = seen[0]
        assert set(np.unique(trits)) <= {-1, 0, 1}
        assert codes.dtype == np.int8 and np.abs(codes).max() <= 127

    def test_weight_gradient_formula(self, rng):
        layer = BitLinearLayer(6, 4, rng=rng)
        x = Tensor(rng.standard_normal((5, 6)))
        g = rng.standard_normal((5, 4)).astype(np.float32)
        captured = {}
        layer.hooks.append(lambda lyr, trits, codes: captured.update(codes=codes))
        backward(sum_all(layer.forward_train(x) * Tensor(g)))
        u = layer_norm(x).data
        gamma = np.abs(u).max()
        x_hat = captured["codes"] * gamma / 128
        assert np.allclose(layer.latent_weight.grad, g.T @ x_hat, rtol=1e-5, atol=1e-6)

    def test_linear_probe_loss_decreases(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((128, 16)).astype(np.float32)
        true_w = rng.standard_normal((3, 16))
        labels = np.argmax(x @ true_w.T, axis=1)
        layer = BitLinearLayer(16, 3, rng=rng)
        opt = AdamW(layer.parameters(), weight_decay=0.0)
        losses = []
        for _ in range(50):
            out = layer.forward_train(Tensor(x))
            assert np.all(np.isfinite(out.data))
            loss = cross_entropy(mul_scale(out, 4.0), labels)
            losses.append(loss.item())
            backward(loss)
            opt.step(1e-2)
            opt.zero_grad()
        assert losses[-1] < losses[0] - 0.1
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_custom_bit_width(self, rng):
        layer = BitLinearLayer(8, 2, cfg=QuantConfig(b=4), rng=rng)
        codes = []
        layer.hooks.append(lambda lyr, trits, c: codes.append(c))
        layer.forward_train(Tensor(rng.standard_normal((3, 8))))
        assert np.abs(codes[0]).max() <= 7


def mul_scale(t, c):
    return t * c
