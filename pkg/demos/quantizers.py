"""
Ternary weights and 8-bit activations
=====================================

A latent weight matrix is scaled by its mean absolute value and rounded to
{-1, 0, +1}.  Activations are scaled by their largest magnitude and rounded to
signed 8-bit codes.
"""

import numpy as np

from ternvit.quant import absmean_scale, dequantize, quantize_activations, quantize_weights

w = np.array([[0.5, -1.2], [0.1, 0.0]])
tw = quantize_weights(w)
print("absmean scale:", absmean_scale(w))  # 0.45
print("trits:\n", tw.trits)  # [[1, -1], [0, 0]]
print("beta:", tw.beta)

# A random matrix ends up roughly one third zeros.
rng = np.random.default_rng(0)
big = quantize_weights(rng.standard_normal((256, 256)))
values, counts = np.unique(big.trits, return_counts=True)
print("trit histogram:", dict(zip(values.tolist(), (counts / counts.sum()).round(3).tolist())))

x = np.array([0.5, -1.0, 0.25])
qa = quantize_activations(x)
print("gamma:", qa.gamma, "codes:", qa.codes)  # codes [64, -127, 32]; -128 is never produced

# Dequantized activations sit within half a step of the input, except where
# the clamp to +-127 bites (only the extreme value -gamma, off by one step).
x = rng.standard_normal(1000)
qa = quantize_activations(x)
err = np.abs(x - dequantize(qa.codes, 1.0, qa.gamma))
clamped = np.abs(qa.codes) == 127
step = qa.gamma / 128
print(f"step {step:.5f}; max error unclamped {err[~clamped].max():.5f}, clamped {err[clamped].max():.5f}")
