"""
One BitLinear layer, two execution paths
========================================

During training the layer keeps a full-precision latent weight, quantizes it
on every call and lets gradients pass straight through.  After ``freeze`` it
runs the packed integer kernel instead.  Both paths produce the same numbers.
"""

import numpy as np

from ternvit.bitlinear import BitLinearLayer
from ternvit.tensor import Tensor, backward, cross_entropy
from ternvit.train import AdamW
from ternvit.trit_pack import OpCounter

layer = BitLinearLayer(2, 1, weight=np.array([[1.0, -1.0]]), ln_eps=1e-12)
print("hand example:", layer(Tensor([[3.0, -1.0]])).data)  # 254 / 128 = 1.984375

rng = np.random.default_rng(0)
layer = BitLinearLayer(96, 32, rng=rng)
x = Tensor(rng.standard_normal((4, 10, 96)).astype(np.float32))
train_out = layer.forward_train(x).data
layer.freeze()
counter = OpCounter()
infer_out = layer.forward_inference(x, counter).data
print("max |train - inference|:", np.abs(train_out - infer_out).max())
print("kernel ops:", counter)
layer.unfreeze()

# The straight-through estimator is enough to fit a linear probe.
x = rng.standard_normal((256, 32)).astype(np.float32)
labels = np.argmax(x @ rng.standard_normal((32, 4)), axis=1)
probe = BitLinearLayer(32, 4, rng=rng)
opt = AdamW(probe.parameters(), weight_decay=0.0)
for step in range(101):
    loss = cross_entropy(probe(Tensor(x)) * 4.0, labels)
    if step % 25 == 0:
        print(f"step {step:3d} loss {loss.item():.4f}")
    backward(loss)
    opt.step(3e-3)
    opt.zero_grad()
